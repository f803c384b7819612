//! Independent dense reference implementations shared by integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use umnmt::model::{Model, ModelConfig};
use umnmt_tensor::Tensor;

/// Row-major matrix used by the reference code.
#[derive(Clone, Debug)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn from_tensor(t: &Tensor) -> Self {
        Self {
            rows: t.rows(),
            cols: t.cols(),
            data: t.data().to_vec(),
        }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows);
        let mut data = vec![0.0; self.rows * other.cols];
        for i in 0..self.rows {
            for j in 0..other.cols {
                let mut s = 0.0;
                for k in 0..self.cols {
                    s += self.at(i, k) * other.at(k, j);
                }
                data[i * other.cols + j] = s;
            }
        }
        Mat {
            rows: self.rows,
            cols: other.cols,
            data,
        }
    }

    pub fn plus_row(&self, bias: &Mat) -> Mat {
        let mut out = self.clone();
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[i * self.cols + j] += bias.data[j];
            }
        }
        out
    }

    pub fn plus(&self, other: &Mat) -> Mat {
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Mat {
            data,
            ..self.clone()
        }
    }

    pub fn relu(&self) -> Mat {
        Mat {
            data: self.data.iter().map(|v| v.max(0.0)).collect(),
            ..self.clone()
        }
    }

    pub fn cols_range(&self, start: usize, len: usize) -> Mat {
        let mut data = Vec::with_capacity(self.rows * len);
        for i in 0..self.rows {
            for j in start..start + len {
                data.push(self.at(i, j));
            }
        }
        Mat {
            rows: self.rows,
            cols: len,
            data,
        }
    }

    pub fn max_abs_diff(&self, t: &Tensor) -> f64 {
        assert_eq!((self.rows, self.cols), (t.rows(), t.cols()));
        self.data
            .iter()
            .zip(t.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

pub fn param(model: &Model, name: &str) -> Mat {
    Mat::from_tensor(
        &model
            .params
            .by_name(name)
            .unwrap_or_else(|| panic!("no tensor {name}"))
            .value,
    )
}

pub fn affine(model: &Model, x: &Mat, name: &str) -> Mat {
    x.matmul(&param(model, &format!("{name}.w")))
        .plus_row(&param(model, &format!("{name}.b")))
}

pub fn ffn(model: &Model, x: &Mat, name: &str) -> Mat {
    let h = affine(model, x, &format!("{name}.up")).relu();
    affine(model, &h, &format!("{name}.down"))
}

/// Multi-head `softmax(Q K^T / sqrt(d_head)) V`, heads concatenated.
pub fn attention(q: &Mat, k: &Mat, v: &Mat, heads: usize) -> Mat {
    let dh = q.cols / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; q.rows * q.cols];
    for h in 0..heads {
        for i in 0..q.rows {
            let scores: Vec<f64> = (0..k.rows)
                .map(|j| {
                    (0..dh)
                        .map(|c| q.at(i, h * dh + c) * k.at(j, h * dh + c))
                        .sum::<f64>()
                        * scale
                })
                .collect();
            let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..dh {
                out[i * q.cols + h * dh + c] =
                    (0..k.rows).map(|j| e[j] / z * v.at(j, h * dh + c)).sum();
            }
        }
    }
    Mat {
        rows: q.rows,
        cols: q.cols,
        data: out,
    }
}

/// Gated context written out term by term:
/// `O(text + l1 * image + l2 * (text->image composite + image->text composite))`.
pub fn context_oracle(
    model: &Model,
    prefix: &str,
    hd: &Mat,
    he: &Mat,
    hi: &Mat,
    l1: bool,
    l2: bool,
) -> Mat {
    let heads = model.config().n_heads;
    let d = model.config().d_model;
    let p = |s: &str| format!("{prefix}.cross{s}");
    let qd = affine(model, hd, &p(".q"));
    let ke = affine(model, he, &p(".k"));
    let ve = affine(model, he, &p(".v"));
    let mut c = attention(&qd, &ke, &ve, heads);
    let ki = affine(model, hi, &p(".img_k"));
    let vi = affine(model, hi, &p(".img_v"));
    if l1 {
        c = c.plus(&attention(&qd, &ki, &vi, heads));
    }
    if l2 {
        let qe = affine(model, he, &p(".comp.q_txt"));
        let kv_ei = ffn(model, &attention(&qe, &ki, &vi, heads), &p(".comp.ffn_ei"));
        let qi = affine(model, hi, &p(".comp.q_img"));
        let kv_ie = ffn(model, &attention(&qi, &ke, &ve, heads), &p(".comp.ffn_ie"));
        c = c.plus(&attention(
            &qd,
            &kv_ei.cols_range(0, d),
            &kv_ei.cols_range(d, d),
            heads,
        ));
        c = c.plus(&attention(
            &qd,
            &kv_ie.cols_range(0, d),
            &kv_ie.cols_range(d, d),
            heads,
        ));
    }
    affine(model, &c, &p(".o"))
}

pub fn tiny_config() -> ModelConfig {
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
        dropout_p: 0.0,
        ..ModelConfig::default()
    }
}

/// Overwrites every parameter with small random values so biases and
/// norms are exercised too.
pub fn randomize(model: &mut Model, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, p) in model.params.iter_mut() {
        for v in p.value.data_mut() {
            *v = rng.random_range(-0.6..0.6f64) as f32 as f64;
        }
    }
}

pub fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::new(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    )
    .unwrap()
}

/// Hand-computed sentence BLEU case.
pub struct Fixture {
    pub hyp: &'static [usize],
    pub reference: &'static [usize],
    pub precisions: [f64; 4],
    pub bp: f64,
    pub score: f64,
}

pub const FIXTURES: [Fixture; 7] = [
    Fixture {
        hyp: &[4, 5, 6, 7],
        reference: &[4, 5, 6, 7],
        precisions: [1.0, 1.0, 1.0, 1.0],
        bp: 1.0,
        score: 1.0,
    },
    // one substituted final token: 3/4 2/3 1/2, 4-gram smoothed to 1/2
    Fixture {
        hyp: &[4, 5, 6, 7],
        reference: &[4, 5, 6, 8],
        precisions: [0.75, 2.0 / 3.0, 0.5, 0.5],
        bp: 1.0,
        score: 0.5946035575013605,
    },
    // short hypothesis: no 4-grams, penalty exp(1 - 6/3)
    Fixture {
        hyp: &[4, 5, 6],
        reference: &[4, 5, 6, 7, 8, 9],
        precisions: [1.0, 1.0, 1.0, 1.0],
        bp: 0.36787944117144233,
        score: 0.36787944117144233,
    },
    // long hypothesis: no penalty, product 1/5
    Fixture {
        hyp: &[4, 5, 6, 7, 9],
        reference: &[4, 5, 6, 7],
        precisions: [0.8, 0.75, 2.0 / 3.0, 0.5],
        bp: 1.0,
        score: 0.668740304976422,
    },
    // reversed: only unigrams match, higher orders smoothed
    Fixture {
        hyp: &[4, 5, 6, 7],
        reference: &[7, 6, 5, 4],
        precisions: [1.0, 0.25, 1.0 / 3.0, 0.5],
        bp: 1.0,
        score: 0.45180100180492244,
    },
    // repeated token is clipped to its reference count
    Fixture {
        hyp: &[4, 4, 4, 4],
        reference: &[4, 5, 6, 7],
        precisions: [0.25, 0.25, 1.0 / 3.0, 0.5],
        bp: 1.0,
        score: 0.3194715521231362,
    },
    // no unigram match scores zero
    Fixture {
        hyp: &[8, 9],
        reference: &[4, 5, 6],
        precisions: [0.0, 1.0 / 2.0, 1.0, 1.0],
        bp: 0.6065306597126334,
        score: 0.0,
    },
];
