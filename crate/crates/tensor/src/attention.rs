//! Segmented multi-head scaled dot-product attention.
//!
//! Queries, keys and values are stacked row-wise for a whole batch. Segment
//! `s` of the queries only attends to segment `s` of the keys, so a batch of
//! ragged sentences needs no padding. Heads split the columns evenly.

use std::ops::Range;

use crate::error::{Result, TensorError};
use crate::kernels::{dot, softmax_in_place};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionLayout {
    pub heads: usize,
    pub query_segments: Vec<Range<usize>>,
    pub key_segments: Vec<Range<usize>>,
    /// Query row `i` of a segment sees key rows `0..=i + (len_k - len_q)`.
    /// With equal lengths this is the usual lower-triangular mask; a single
    /// query row against a longer key segment is one incremental decode step.
    pub causal: bool,
}

impl AttentionLayout {
    pub fn new(
        heads: usize,
        query_segments: Vec<Range<usize>>,
        key_segments: Vec<Range<usize>>,
    ) -> Self {
        Self {
            heads,
            query_segments,
            key_segments,
            causal: false,
        }
    }

    pub fn causal(mut self) -> Self {
        self.causal = true;
        self
    }

    pub(crate) fn validate(&self, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<()> {
        let invalid = |reason: String| TensorError::Invalid {
            op: "attention",
            reason,
        };
        if q.cols() != k.cols() {
            return Err(TensorError::Shape {
                op: "attention",
                left: q.shape(),
                right: k.shape(),
            });
        }
        if k.rows() != v.rows() || v.cols() != q.cols() {
            return Err(TensorError::Shape {
                op: "attention",
                left: k.shape(),
                right: v.shape(),
            });
        }
        if self.heads == 0 || !q.cols().is_multiple_of(self.heads) {
            return Err(invalid(format!(
                "{} columns cannot be split into {} heads",
                q.cols(),
                self.heads
            )));
        }
        if self.query_segments.len() != self.key_segments.len() {
            return Err(invalid(format!(
                "{} query segments vs {} key segments",
                self.query_segments.len(),
                self.key_segments.len()
            )));
        }
        for (qs, ks) in self.query_segments.iter().zip(&self.key_segments) {
            if qs.end > q.rows() || ks.end > k.rows() || qs.start > qs.end || ks.start > ks.end {
                return Err(invalid(format!("segment {qs:?}/{ks:?} out of bounds")));
            }
            if ks.is_empty() && !qs.is_empty() {
                return Err(invalid("query segment has no keys".into()));
            }
            if self.causal && ks.len() < qs.len() {
                return Err(invalid("causal segment has fewer keys than queries".into()));
            }
        }
        Ok(())
    }

    fn visible_keys(&self, seg: usize, query_row: usize) -> usize {
        let kl = self.key_segments[seg].len();
        if self.causal {
            query_row + 1 + (kl - self.query_segments[seg].len())
        } else {
            kl
        }
    }
}

/// Attention probabilities for one (segment, head) pair, `len_q x len_k`.
pub type AttentionWeights = Vec<Tensor>;

pub(crate) fn forward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    layout: &AttentionLayout,
) -> (Tensor, AttentionWeights) {
    let d = q.cols();
    let dh = d / layout.heads;
    let scale = 1.0 / (dh as Real).sqrt();
    let mut out = Tensor::zeros(q.rows(), d);
    let mut weights = Vec::with_capacity(layout.query_segments.len() * layout.heads);
    for (s, (qs, ks)) in layout
        .query_segments
        .iter()
        .zip(&layout.key_segments)
        .enumerate()
    {
        for h in 0..layout.heads {
            let cols = h * dh..(h + 1) * dh;
            let mut w = Tensor::zeros(qs.len(), ks.len());
            for i in 0..qs.len() {
                let visible = layout.visible_keys(s, i);
                let qrow = &q.row(qs.start + i)[cols.clone()];
                let wrow = &mut w.row_mut(i)[..visible];
                for (j, wj) in wrow.iter_mut().enumerate() {
                    *wj = scale * dot(qrow, &k.row(ks.start + j)[cols.clone()]);
                }
                softmax_in_place(wrow);
                let orow = &mut out.row_mut(qs.start + i)[cols.clone()];
                for (j, &wj) in wrow.iter().enumerate() {
                    let vrow = &v.row(ks.start + j)[cols.clone()];
                    for (o, &vv) in orow.iter_mut().zip(vrow) {
                        *o += wj * vv;
                    }
                }
            }
            weights.push(w);
        }
    }
    (out, weights)
}

pub(crate) struct AttentionGrads {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
}

pub(crate) fn backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    layout: &AttentionLayout,
    weights: &AttentionWeights,
    grad_out: &Tensor,
) -> AttentionGrads {
    let d = q.cols();
    let dh = d / layout.heads;
    let scale = 1.0 / (dh as Real).sqrt();
    let mut gq = Tensor::zeros(q.rows(), d);
    let mut gk = Tensor::zeros(k.rows(), d);
    let mut gv = Tensor::zeros(v.rows(), d);
    let mut dw = Vec::new();
    for (s, (qs, ks)) in layout
        .query_segments
        .iter()
        .zip(&layout.key_segments)
        .enumerate()
    {
        for h in 0..layout.heads {
            let cols = h * dh..(h + 1) * dh;
            let w = &weights[s * layout.heads + h];
            for i in 0..qs.len() {
                let visible = layout.visible_keys(s, i);
                let go = &grad_out.row(qs.start + i)[cols.clone()];
                let wrow = &w.row(i)[..visible];
                // dW_ij = dOut_i . V_j ; dV_j += W_ij dOut_i
                dw.clear();
                for (j, &wj) in wrow.iter().enumerate() {
                    let vr = ks.start + j;
                    dw.push(dot(go, &v.row(vr)[cols.clone()]));
                    for (g, &o) in gv.row_mut(vr)[cols.clone()].iter_mut().zip(go) {
                        *g += wj * o;
                    }
                }
                // softmax backward: dS_ij = W_ij (dW_ij - sum_l W_il dW_il)
                let inner: Real = wrow.iter().zip(&dw).map(|(a, b)| a * b).sum();
                for (j, (&wj, &dwj)) in wrow.iter().zip(&dw).enumerate() {
                    let ds = scale * wj * (dwj - inner);
                    if ds == 0.0 {
                        continue;
                    }
                    let kr = ks.start + j;
                    let qr = qs.start + i;
                    for c in cols.clone() {
                        gq.data_mut()[qr * d + c] += ds * k.get(kr, c);
                        gk.data_mut()[kr * d + c] += ds * q.get(qr, c);
                    }
                }
            }
        }
    }
    AttentionGrads {
        q: gq,
        k: gk,
        v: gv,
    }
}

#[cfg(test)]
#[allow(clippy::single_range_in_vec_init)]
mod tests {
    use super::*;

    #[test]
    fn causal_visibility_aligns_the_last_query_with_the_last_key() {
        let full = AttentionLayout::new(1, vec![0..3], vec![0..3]).causal();
        assert_eq!(
            (0..3).map(|i| full.visible_keys(0, i)).collect::<Vec<_>>(),
            [1, 2, 3]
        );
        let step = AttentionLayout::new(1, vec![0..1], vec![0..4]).causal();
        assert_eq!(step.visible_keys(0, 0), 4);
        let open = AttentionLayout::new(1, vec![0..2], vec![0..5]);
        assert_eq!(open.visible_keys(0, 0), 5);
    }

    #[test]
    fn equal_keys_average_the_values() {
        let q = Tensor::new(1, 2, vec![0.3, -0.7]).unwrap();
        let k = Tensor::new(2, 2, vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let v = Tensor::new(2, 2, vec![2.0, 4.0, 6.0, 8.0]).unwrap();
        let layout = AttentionLayout::new(2, vec![0..1], vec![0..2]);
        let (out, w) = forward(&q, &k, &v, &layout);
        assert_eq!(out.data(), &[4.0, 6.0]);
        assert_eq!(w.len(), 2);
        assert_eq!(w[0].data(), &[0.5, 0.5]);
    }

    #[test]
    fn segments_do_not_mix() {
        let q = Tensor::new(2, 1, vec![1.0, 1.0]).unwrap();
        let k = Tensor::new(2, 1, vec![0.0, 0.0]).unwrap();
        let v = Tensor::new(2, 1, vec![3.0, -5.0]).unwrap();
        let layout = AttentionLayout::new(1, vec![0..1, 1..2], vec![0..1, 1..2]);
        let (out, _) = forward(&q, &k, &v, &layout);
        assert_eq!(out.data(), &[3.0, -5.0]);
    }

    #[test]
    fn mismatched_widths_are_rejected() {
        let q = Tensor::zeros(1, 4);
        let k = Tensor::zeros(2, 3);
        let layout = AttentionLayout::new(2, vec![0..1], vec![0..2]);
        assert!(layout.validate(&q, &k, &k).is_err());
        let q = Tensor::zeros(1, 3);
        assert!(layout.validate(&q, &k, &k).is_err());
    }
}
