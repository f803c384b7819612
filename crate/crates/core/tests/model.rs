#![allow(clippy::single_range_in_vec_init)]

mod common;

use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use umnmt::corpus::{ImageFeatureGrid, Lang, TokenSeq, BOS, EOS};
use umnmt::model::*;
use umnmt::Error;
use umnmt_tensor::{Graph, Tensor};

fn seq(lang: Lang, ids: &[usize]) -> TokenSeq {
    TokenSeq::new(lang, ids.to_vec()).unwrap()
}

fn grid(rng: &mut ChaCha8Rng, k: usize, d: usize) -> ImageFeatureGrid {
    ImageFeatureGrid::new(random_tensor(rng, k, d)).unwrap()
}

fn model(seed: u64) -> Model {
    let mut m = Model::new(tiny_config()).unwrap();
    randomize(&mut m, seed);
    m
}

#[test]
fn encoder_shapes_and_determinism() {
    let m = model(1);
    let s = seq(Lang::X, &[4, 5, 6]);
    let g = Graph::no_grad();
    let a = m
        .encode_text(&g, &[&s], Lang::X, &mut Dropout::Off)
        .unwrap();
    let b = m
        .encode_text(&g, &[&s], Lang::X, &mut Dropout::Off)
        .unwrap();
    assert_eq!(g.shape(a.states).dims(), [5, 8]);
    assert_eq!(*g.value(a.states), *g.value(b.states));
}

#[test]
fn batched_encoding_matches_single_sentences() {
    let m = model(2);
    let s1 = seq(Lang::Y, &[4, 5]);
    let s2 = seq(Lang::Y, &[6, 7, 8, 9]);
    let g = Graph::no_grad();
    let both = m
        .encode_text(&g, &[&s1, &s2], Lang::Y, &mut Dropout::Off)
        .unwrap();
    let one = m
        .encode_text(&g, &[&s2], Lang::Y, &mut Dropout::Off)
        .unwrap();
    let all = g.value(both.states).clone();
    let single = g.value(one.states).clone();
    assert_eq!(both.segments, vec![0..4, 4..10]);
    assert_eq!(&all.data()[4 * 8..], single.data());
}

#[test]
fn overlong_input_is_a_length_error() {
    let m = model(3);
    let s = seq(Lang::X, &[4; 11]);
    let err = m
        .encode_text(&Graph::no_grad(), &[&s], Lang::X, &mut Dropout::Off)
        .unwrap_err();
    assert!(matches!(err, Error::Length { len: 13, max: 12 }));
}

#[test]
fn image_encoder_contract() {
    let m = model(4);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let g = Graph::new();
    let img = m.encode_image(&g, &[&grid(&mut rng, 4, 6)]).unwrap();
    assert_eq!(g.shape(img.states).dims(), [4, 8]);
    let wrong = grid(&mut rng, 4, 5);
    assert!(matches!(
        m.encode_image(&g, &[&wrong]),
        Err(Error::Tensor(_))
    ));

    // A zero grid projects to the bias row before normalization.
    let zero = ImageFeatureGrid::new(Tensor::zeros(4, 6)).unwrap();
    let g = Graph::no_grad();
    let out = m.encode_image(&g, &[&zero]).unwrap();
    let bias = param(&m, "img.proj.b");
    let gain = param(&m, "img.ln.g");
    let shift = param(&m, "img.ln.b");
    let mean = bias.data.iter().sum::<f64>() / 8.0;
    let var = bias.data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
    let expect: Vec<f64> = (0..8)
        .map(|j| (bias.data[j] - mean) / (var + 1e-5).sqrt() * gain.data[j] + shift.data[j])
        .collect();
    let t = g.value(out.states);
    for r in 0..4 {
        for (v, e) in t.row(r).iter().zip(&expect) {
            assert!((v - e).abs() < 1e-12);
        }
    }
}

#[test]
fn features_receive_no_gradient() {
    let m = model(5);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let g = Graph::new();
    let img = m.encode_image(&g, &[&grid(&mut rng, 4, 6)]).unwrap();
    let loss = g.sum(g.mul(img.states, img.states).unwrap()).unwrap();
    g.backward(loss).unwrap();
    // Only the projection and norm tensors are trainable leaves here; the
    // feature grid enters as a constant.
    let names: Vec<&str> = g
        .param_vars()
        .iter()
        .filter(|(_, v)| g.grad(*v).is_some())
        .map(|(id, _)| m.params.get(*id).name.as_str())
        .collect();
    assert_eq!(names, ["img.proj.w", "img.proj.b", "img.ln.g", "img.ln.b"]);
}

#[test]
fn context_matches_term_by_term_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut worst = 0.0f64;
    for case in 0..100 {
        let m = model(1000 + case);
        let (nq, nk, ni) = (2, 3, 2);
        let hd = random_tensor(&mut rng, nq, 8);
        let he = random_tensor(&mut rng, nk, 8);
        let hi = random_tensor(&mut rng, ni, 8);
        let layer = (case % 2) as usize;
        let lang = if case % 3 == 0 { Lang::X } else { Lang::Y };
        let prefix = if layer == 0 {
            "dec.shared.0".to_string()
        } else {
            format!("dec.{lang}.1")
        };
        for gates in [
            Gates::TEXT_ONLY,
            Gates::IMAGE,
            Gates::ALL,
            Gates {
                image: false,
                composed: true,
            },
        ] {
            let g = Graph::no_grad();
            let text = Encoded::from_lengths(g.constant(he.clone()).unwrap(), &[nk]);
            let image = Encoded::from_lengths(g.constant(hi.clone()).unwrap(), &[ni]);
            let mem = m
                .decoder_memory(&g, lang, &text, Some(&image), gates)
                .unwrap();
            let q = g.constant(hd.clone()).unwrap();
            let (c, _) = m
                .controllable_context(&g, &mem, layer, q, &[0..nq], &[0])
                .unwrap();
            let oracle = context_oracle(
                &m,
                &prefix,
                &Mat::from_tensor(&hd),
                &Mat::from_tensor(&he),
                &Mat::from_tensor(&hi),
                gates.image,
                gates.composed,
            );
            worst = worst.max(oracle.max_abs_diff(&g.value(c)));
        }
    }
    assert!(worst < 1e-10, "max deviation {worst}");
}

#[test]
fn closed_gates_match_a_model_without_image_weights() {
    let cfg = tiny_config();
    let with = Model::new(cfg.clone()).unwrap();
    let without = Model::new(cfg.without_image_pathway()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let src = seq(Lang::X, &[4, 5, 6, 7]);
    let img = grid(&mut rng, 4, 6);
    let tgt = [BOS, 5, 6, 7];
    let run = |m: &Model, image: bool| {
        let g = Graph::no_grad();
        let text = m
            .encode_text(&g, &[&src], Lang::X, &mut Dropout::Off)
            .unwrap();
        let enc_img = image.then(|| m.encode_image(&g, &[&img]).unwrap());
        let mem = m
            .decoder_memory(&g, Lang::Y, &text, enc_img.as_ref(), Gates::TEXT_ONLY)
            .unwrap();
        let out = m.decode(&g, &mem, &[&tgt], &mut Dropout::Off).unwrap();
        let v = g.value(out.logits).clone();
        v
    };
    assert_eq!(run(&with, true), run(&without, false));
}

#[test]
fn image_gate_without_image_is_a_modality_error() {
    let m = model(6);
    let g = Graph::no_grad();
    let text = m
        .encode_text(&g, &[&seq(Lang::X, &[4])], Lang::X, &mut Dropout::Off)
        .unwrap();
    for gates in [Gates::IMAGE, Gates::ALL] {
        let err = m
            .decoder_memory(&g, Lang::Y, &text, None, gates)
            .unwrap_err();
        assert!(matches!(err, Error::Modality(_)));
    }
    let plain = Model::new(tiny_config().without_image_pathway()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(matches!(
        plain.encode_image(&g, &[&grid(&mut rng, 4, 6)]),
        Err(Error::Modality(_))
    ));
}

#[test]
fn single_text_key_returns_its_value() {
    let m = model(7);
    let g = Graph::no_grad();
    let he = Tensor::from_rows(&[[0.3, -0.2, 0.5, 0.1, 0.0, 0.9, -0.4, 0.2]]).unwrap();
    let hd = Tensor::from_rows(&[[1.0; 8], [-1.0; 8]]).unwrap();
    let text = Encoded::from_lengths(g.constant(he.clone()).unwrap(), &[1]);
    let mem = m
        .decoder_memory(&g, Lang::X, &text, None, Gates::TEXT_ONLY)
        .unwrap();
    let q = g.constant(hd).unwrap();
    let (c, trace) = m
        .controllable_context(&g, &mem, 0, q, &[0..2], &[0])
        .unwrap();
    let v = affine(&m, &Mat::from_tensor(&he), "dec.shared.0.cross.v");
    let expect = affine(&m, &v, "dec.shared.0.cross.o");
    let out = g.value(c);
    for r in 0..2 {
        for j in 0..8 {
            assert!((out.row(r)[j] - expect.data[j]).abs() < 1e-12);
        }
    }
    for w in g.attention_weights(trace.text).unwrap() {
        assert!(w.data().iter().all(|&x| x == 1.0));
    }
}

fn teacher_forced(
    m: &Model,
    src: &TokenSeq,
    img: Option<&ImageFeatureGrid>,
    tgt: &[usize],
) -> Tensor {
    let g = Graph::no_grad();
    let text = m
        .encode_text(&g, &[src], src.lang, &mut Dropout::Off)
        .unwrap();
    let enc_img = img.map(|i| m.encode_image(&g, &[i]).unwrap());
    let gates = if img.is_some() {
        Gates::ALL
    } else {
        Gates::TEXT_ONLY
    };
    let mem = m
        .decoder_memory(&g, src.lang.other(), &text, enc_img.as_ref(), gates)
        .unwrap();
    let out = m.decode(&g, &mem, &[tgt], &mut Dropout::Off).unwrap();
    let v = g.value(out.logits).clone();
    v
}

#[test]
fn logits_have_target_vocab_width() {
    let m = model(8);
    let t = teacher_forced(&m, &seq(Lang::X, &[4, 5]), None, &[BOS, 4]);
    assert_eq!(t.shape().dims(), [2, 10]);
    let t = teacher_forced(&m, &seq(Lang::Y, &[4, 5]), None, &[BOS]);
    assert_eq!(t.shape().dims(), [1, 9]);
}

#[test]
fn causality_of_decoder() {
    let m = model(9);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let img = grid(&mut rng, 4, 6);
    let src = seq(Lang::X, &[4, 5, 6]);
    let a = teacher_forced(&m, &src, Some(&img), &[BOS, 4, 5, 6, 7]);
    for t in 1..5 {
        let mut changed = vec![BOS, 4, 5, 6, 7];
        changed[t] = 9;
        let b = teacher_forced(&m, &src, Some(&img), &changed);
        for r in 0..t {
            assert_eq!(a.row(r), b.row(r), "row {r} changed when token {t} changed");
        }
        assert_ne!(a.row(t), b.row(t));
    }
}

#[test]
fn incremental_decoding_equals_teacher_forcing_exactly() {
    let m = model(10);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let imgs = [grid(&mut rng, 4, 6), grid(&mut rng, 4, 6)];
    let srcs = [seq(Lang::Y, &[4, 5, 6]), seq(Lang::Y, &[7, 8])];
    let tgts: [&[usize]; 2] = [&[BOS, 4, 5, 6, 7, 8], &[BOS, 8, 7]];
    for gates in [Gates::TEXT_ONLY, Gates::IMAGE, Gates::ALL] {
        let g = Graph::no_grad();
        let text = m
            .encode_text(&g, &[&srcs[0], &srcs[1]], Lang::Y, &mut Dropout::Off)
            .unwrap();
        let image = m.encode_image(&g, &[&imgs[0], &imgs[1]]).unwrap();
        let mem = m
            .decoder_memory(&g, Lang::X, &text, Some(&image), gates)
            .unwrap();
        let full = m.decode(&g, &mem, &tgts, &mut Dropout::Off).unwrap();
        let full = g.value(full.logits).clone();
        let mut cache = m.new_cache(2);
        for t in 0..6 {
            let active: Vec<usize> = (0..2).filter(|&i| t < tgts[i].len()).collect();
            let tokens: Vec<usize> = active.iter().map(|&i| tgts[i][t]).collect();
            let step = m
                .decode_step(&g, &mem, &mut cache, &active, &tokens)
                .unwrap();
            let step = g.value(step);
            for (j, &i) in active.iter().enumerate() {
                let row = if i == 0 { t } else { 6 + t };
                assert_eq!(
                    step.row(j),
                    full.row(row),
                    "gates {gates:?} item {i} step {t}"
                );
            }
        }
    }
}

#[test]
fn image_cells_are_exchangeable() {
    let m = model(11);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let img = grid(&mut rng, 4, 6);
    let src = seq(Lang::X, &[4, 5, 6]);
    let base = teacher_forced(&m, &src, Some(&img), &[BOS, 4, 5]);
    for _ in 0..5 {
        let mut order: Vec<usize> = (0..4).collect();
        for i in (1..4).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let permuted = img.permute_cells(&order).unwrap();
        let out = teacher_forced(&m, &src, Some(&permuted), &[BOS, 4, 5]);
        assert!(base.max_abs_diff(&out) < 1e-9);
    }
}

#[test]
fn cross_attention_rows_are_distributions() {
    let m = model(12);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let img = grid(&mut rng, 4, 6);
    let g = Graph::no_grad();
    let text = m
        .encode_text(&g, &[&seq(Lang::X, &[4, 5])], Lang::X, &mut Dropout::Off)
        .unwrap();
    let image = m.encode_image(&g, &[&img]).unwrap();
    let mem = m
        .decoder_memory(&g, Lang::Y, &text, Some(&image), Gates::IMAGE)
        .unwrap();
    let out = m
        .decode(&g, &mem, &[&[BOS, 4, 5]], &mut Dropout::Off)
        .unwrap();
    for trace in &out.cross {
        for var in [Some(trace.text), trace.image].into_iter().flatten() {
            for w in g.attention_weights(var).unwrap() {
                for r in 0..w.rows() {
                    assert!(w.row(r).iter().all(|&p| p >= 0.0));
                    assert!((w.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
                }
            }
        }
    }
}

#[test]
fn greedy_decode_matches_repeated_argmax_over_teacher_forcing() {
    let m = model(13);
    let src = seq(Lang::X, &[4, 5, 6]);
    let out = m
        .greedy_decode(&[&src], Lang::X, None, Gates::TEXT_ONLY, 6)
        .unwrap();
    let ids = &out[0].ids;
    assert!(ids.len() <= 6);
    let mut prefix = vec![BOS];
    prefix.extend_from_slice(ids);
    let logits = teacher_forced(&m, &src, None, &prefix);
    for (t, &id) in ids.iter().enumerate() {
        assert_eq!(argmax(logits.row(t)), id);
        assert_ne!(id, EOS);
    }
    if ids.len() < 6 {
        assert_eq!(argmax(logits.row(ids.len())), EOS);
    }
    let capped = m
        .greedy_decode(&[&src], Lang::X, None, Gates::TEXT_ONLY, 2)
        .unwrap();
    assert!(capped[0].len() <= 2);
    assert_eq!(out[0].lang, Lang::Y);
}

#[test]
fn shared_blocks_are_one_storage() {
    let mut m = model(14);
    let before_x = param(&m, "enc.shared.0.self.q.w");
    assert!(m.params.by_name("enc.x.0.self.q.w").is_none());
    assert!(m.params.by_name("enc.y.0.self.q.w").is_none());
    // An update computed through the X encoder moves the tensor the Y encoder reads.
    let g = Graph::new();
    let text = m
        .encode_text(&g, &[&seq(Lang::X, &[4, 5])], Lang::X, &mut Dropout::Off)
        .unwrap();
    let loss = g.sum(text.states).unwrap();
    let loss = g.mul(loss, loss).unwrap();
    g.backward(loss).unwrap();
    m.params.accumulate_grads(&g);
    let id = m.params.id("enc.shared.0.self.q.w").unwrap();
    let p = m.params.get_mut(id);
    assert_eq!(p.grad_count, 1);
    let grad = p.grad.clone();
    for (v, g) in p.value.data_mut().iter_mut().zip(grad.data()) {
        *v -= 0.1 * g;
    }
    let after = param(&m, "enc.shared.0.self.q.w");
    assert!(after.data.iter().zip(&before_x.data).any(|(a, b)| a != b));
    let gy = Graph::no_grad();
    let ty = m
        .encode_text(&gy, &[&seq(Lang::Y, &[4, 5])], Lang::Y, &mut Dropout::Off)
        .unwrap();
    drop(ty);
    let used = gy.param_vars();
    assert!(used.iter().any(|(pid, _)| *pid == id));
}
