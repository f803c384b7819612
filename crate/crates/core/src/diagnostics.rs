//! Finite-difference gradient checks over every tensor op and the model's
//! decoding losses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use umnmt_tensor::{grad_check, AttentionLayout, GradCheckReport, Graph, Real, Tensor, Var};

use crate::corpus::{Batch, Example, ImageFeatureGrid, Lang, Modality, TokenSeq, BOS};
use crate::error::Result;
use crate::model::{Dropout, Gates, Model, ModelConfig};
use crate::training::{loss_auto, loss_cycle_from, NoiseConfig};

/// Central-difference step.
pub const GRAD_EPS: Real = 1e-6;
/// Largest accepted relative error.
pub const GRAD_TOLERANCE: Real = 1e-4;

#[derive(Debug, Clone, Serialize)]
pub struct GradCase {
    pub name: String,
    pub max_rel_error: Real,
    pub entries_checked: usize,
}

impl GradCase {
    fn from_report(name: &str, r: GradCheckReport) -> Self {
        Self {
            name: name.to_string(),
            max_rel_error: r.max_rel_error,
            entries_checked: r.entries_checked,
        }
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error < GRAD_TOLERANCE
    }
}

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    Tensor::new(rows, cols, data).expect("sized data")
}

/// Contracts any output with fixed distinct weights to a scalar.
fn project(g: &Graph, y: Var) -> umnmt_tensor::Result<Var> {
    let shape = g.shape(y);
    let data = (0..shape.len())
        .map(|i| ((i * 7 % 11) as Real - 5.0) / 3.0)
        .collect();
    let w = g.constant(Tensor::new(shape.rows, shape.cols, data)?)?;
    let prod = g.mul(y, w)?;
    g.sum(prod)
}

type OpFn = Box<dyn Fn(&Graph, &[Var]) -> umnmt_tensor::Result<Var>>;

/// One check per differentiable op plus a few compositions.
pub fn op_suite(seed: u64) -> Result<Vec<GradCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = |rows, cols| random(&mut rng, rows, cols);
    let cases: Vec<(&str, Vec<Tensor>, OpFn)> = vec![
        (
            "matmul",
            vec![r(3, 4), r(4, 2)],
            Box::new(|g, x| project(g, g.matmul(x[0], x[1])?)),
        ),
        (
            "add",
            vec![r(3, 4), r(3, 4)],
            Box::new(|g, x| project(g, g.add(x[0], x[1])?)),
        ),
        (
            "add_row",
            vec![r(3, 4), r(1, 4)],
            Box::new(|g, x| project(g, g.add_row(x[0], x[1])?)),
        ),
        (
            "mul",
            vec![r(3, 4), r(3, 4)],
            Box::new(|g, x| project(g, g.mul(x[0], x[1])?)),
        ),
        (
            "scale",
            vec![r(3, 4)],
            Box::new(|g, x| project(g, g.scale(x[0], -1.7)?)),
        ),
        ("sum", vec![r(3, 4)], Box::new(|g, x| g.sum(x[0]))),
        (
            "concat_rows",
            vec![r(3, 4), r(2, 4)],
            Box::new(|g, x| project(g, g.concat_rows(&[x[0], x[1]])?)),
        ),
        (
            "concat_cols",
            vec![r(3, 4), r(3, 2)],
            Box::new(|g, x| project(g, g.concat_cols(&[x[1], x[0]])?)),
        ),
        (
            "slice_rows",
            vec![r(4, 3)],
            Box::new(|g, x| project(g, g.slice_rows(x[0], 1, 2)?)),
        ),
        (
            "slice_cols",
            vec![r(3, 4)],
            Box::new(|g, x| project(g, g.slice_cols(x[0], 1, 2)?)),
        ),
        (
            "select_rows",
            vec![r(3, 4)],
            Box::new(|g, x| project(g, g.select_rows(x[0], &[2, 0, 2])?)),
        ),
        (
            "transpose",
            vec![r(3, 4)],
            Box::new(|g, x| project(g, g.transpose(x[0])?)),
        ),
        (
            "relu",
            vec![r(3, 4)],
            Box::new(|g, x| project(g, g.relu(x[0])?)),
        ),
        (
            "embedding_lookup",
            vec![r(5, 3)],
            Box::new(|g, x| project(g, g.embedding_lookup(x[0], &[4, 1, 4, 0])?)),
        ),
        (
            "softmax_rows",
            vec![r(3, 5)],
            Box::new(|g, x| project(g, g.softmax_rows(x[0])?)),
        ),
        (
            "layer_norm_rows",
            vec![r(3, 5), r(1, 5), r(1, 5)],
            Box::new(|g, x| {
                project(
                    g,
                    g.layer_norm_rows(x[0], x[1], x[2], umnmt_tensor::LAYER_NORM_EPS)?,
                )
            }),
        ),
        (
            "dropout",
            vec![r(3, 4)],
            Box::new(|g, x| {
                let mut mask = ChaCha8Rng::seed_from_u64(99);
                project(g, g.dropout(x[0], 0.4, &mut mask)?)
            }),
        ),
        (
            "cross_entropy_rows",
            vec![r(3, 5)],
            Box::new(|g, x| g.cross_entropy_rows(x[0], &[4, 0, 2], Some(0))),
        ),
        (
            "stop_gradient",
            vec![r(3, 4)],
            Box::new(|g, x| {
                let fixed = Tensor::new(3, 4, (0..12).map(|i| i as Real / 6.0 - 1.0).collect())?;
                let frozen = g.stop_gradient(g.constant(fixed)?)?;
                let other = g.stop_gradient(x[0])?;
                project(g, g.add(g.mul(x[0], frozen)?, g.scale(other, 0.0)?)?)
            }),
        ),
        (
            "attention",
            vec![r(5, 4), r(6, 4), r(6, 4)],
            Box::new(|g, x| {
                let layout = AttentionLayout::new(2, vec![0..2, 2..5], vec![0..4, 4..6]);
                project(g, g.attention(x[0], x[1], x[2], &layout)?)
            }),
        ),
        (
            "attention_causal",
            vec![r(6, 4), r(6, 4), r(6, 4)],
            Box::new(|g, x| {
                let layout = AttentionLayout::new(2, vec![0..4, 4..6], vec![0..4, 4..6]).causal();
                project(g, g.attention(x[0], x[1], x[2], &layout)?)
            }),
        ),
        (
            "softmax_cross_entropy_chain",
            vec![r(4, 3), r(3, 6), r(1, 6)],
            Box::new(|g, x| {
                let h = g.add_row(g.matmul(x[0], x[1])?, x[2])?;
                g.cross_entropy_rows(g.relu(h)?, &[0, 5, 2, 2], None)
            }),
        ),
    ];
    cases
        .into_iter()
        .map(|(name, inputs, f)| {
            Ok(GradCase::from_report(
                name,
                grad_check(f, &inputs, GRAD_EPS)?,
            ))
        })
        .collect()
}

/// Central differences over every model parameter entry.
pub fn model_grad_check<F>(model: &Model, loss: F, eps: Real) -> Result<GradCheckReport>
where
    F: Fn(&Model, &Graph) -> Result<Var>,
{
    let g = Graph::new();
    let out = loss(model, &g)?;
    g.backward(out)?;
    let vars = g.param_vars();
    let mut work = model.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        entries_checked: 0,
    };
    let ids: Vec<_> = model.params.iter().map(|(id, _)| id).collect();
    for (pi, id) in ids.into_iter().enumerate() {
        let analytic = vars
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| g.grad(*v));
        let n = model.params.get(id).value.data().len();
        for j in 0..n {
            let base = model.params.get(id).value.data()[j];
            let mut eval = |delta: Real| -> Result<Real> {
                work.params.get_mut(id).value.data_mut()[j] = base + delta;
                let ng = Graph::no_grad();
                let v = loss(&work, &ng)?;
                let value = ng.value(v).item();
                Ok(value)
            };
            let numeric = (eval(eps)? - eval(-eps)?) / (2.0 * eps);
            work.params.get_mut(id).value.data_mut()[j] = base;
            let a = analytic.as_ref().map_or(0.0, |t| t.data()[j]);
            let rel = (a - numeric).abs() / 1.0_f64.max(a.abs()).max(numeric.abs());
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((pi, j));
            }
            report.entries_checked += 1;
        }
    }
    Ok(report)
}

/// Configuration of the model used by [`model_suite`]: every attention
/// term enabled.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_heads: 2,
        n_layers: 2,
        n_shared: 1,
        d_ff: 12,
        vocab_size_x: 9,
        vocab_size_y: 10,
        d_img: 6,
        k_img: 4,
        max_len: 12,
        lambda1: 1,
        lambda2: 1,
        dropout_p: 0.0,
        ..ModelConfig::default()
    }
}

/// Reconstruction, cycle and incremental decode-step losses of a tiny
/// model, checked against every parameter.
pub fn model_suite(seed: u64) -> Result<Vec<GradCase>> {
    let cfg = tiny_model_config();
    let mut model = Model::new(ModelConfig {
        init_seed: seed,
        ..cfg.clone()
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, p) in model.params.iter_mut() {
        for v in p.value.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    let mut seq = |lang: Lang, len: usize| {
        let vocab = cfg.vocab_size(lang);
        TokenSeq::new(lang, (0..len).map(|_| rng.random_range(4..vocab)).collect())
    };
    let xs = [seq(Lang::X, 3)?, seq(Lang::X, 5)?];
    let ys = [seq(Lang::Y, 4)?, seq(Lang::Y, 2)?];
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    let grids: Vec<_> = (0..2)
        .map(|_| {
            ImageFeatureGrid::new(random(&mut rng, cfg.k_img, cfg.d_img)).map(std::sync::Arc::new)
        })
        .collect::<Result<_>>()?;
    let batch = Batch::new(
        xs.iter()
            .zip(&grids)
            .map(|(t, i)| Example::with_image(t.clone(), i.clone()))
            .collect(),
        Modality::TextImage,
    )?;

    let mut out = Vec::new();
    let auto = model_grad_check(
        &model,
        |m, g| {
            loss_auto(
                m,
                g,
                &batch,
                &NoiseConfig::NONE,
                &mut ChaCha8Rng::seed_from_u64(0),
                &mut Dropout::Off,
            )
        },
        GRAD_EPS,
    )?;
    out.push(GradCase::from_report("model.loss_auto", auto));
    let cycle = model_grad_check(
        &model,
        |m, g| loss_cycle_from(m, g, &batch, &ys, &mut Dropout::Off),
        GRAD_EPS,
    )?;
    out.push(GradCase::from_report("model.loss_cycle", cycle));
    let step = model_grad_check(
        &model,
        |m, g| {
            let src: Vec<&TokenSeq> = ys.iter().collect();
            let imgs: Vec<&ImageFeatureGrid> = grids.iter().map(|i| i.as_ref()).collect();
            let text = m.encode_text(g, &src, Lang::Y, &mut Dropout::Off)?;
            let image = m.encode_image(g, &imgs)?;
            let memory = m.decoder_memory(g, Lang::X, &text, Some(&image), Gates::ALL)?;
            let mut cache = m.new_cache(2);
            let logits = m.decode_step(g, &memory, &mut cache, &[0, 1], &[BOS, BOS])?;
            Ok(g.cross_entropy_rows(logits, &[xs[0].ids[0], xs[1].ids[0]], None)?)
        },
        GRAD_EPS,
    )?;
    out.push(GradCase::from_report("model.decode_step", step));
    Ok(out)
}

/// [`op_suite`] followed by [`model_suite`].
pub fn gradient_suite(seed: u64) -> Result<Vec<GradCase>> {
    let mut cases = op_suite(seed)?;
    cases.extend(model_suite(seed)?);
    Ok(cases)
}
