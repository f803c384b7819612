use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::corpus::TokenId;

pub const MAX_ORDER: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuReport {
    pub score: f64,
    pub precisions: Vec<f64>,
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
    /// Set when at least one hypothesis was empty.
    pub empty_hypothesis: bool,
}

/// Clipped n-gram matches and hypothesis n-gram totals per order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BleuStats {
    pub matches: Vec<usize>,
    pub totals: Vec<usize>,
    pub hyp_len: usize,
    pub ref_len: usize,
    pub empty_hypothesis: bool,
}

fn ngram_counts(ids: &[TokenId], n: usize) -> HashMap<&[TokenId], usize> {
    let mut counts = HashMap::new();
    if ids.len() >= n {
        for w in ids.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

impl BleuStats {
    pub fn new(max_n: usize) -> Self {
        Self {
            matches: vec![0; max_n],
            totals: vec![0; max_n],
            ..Default::default()
        }
    }

    pub fn add(&mut self, hyp: &[TokenId], reference: &[TokenId]) {
        assert!(!reference.is_empty(), "BLEU reference must be non-empty");
        self.hyp_len += hyp.len();
        self.ref_len += reference.len();
        self.empty_hypothesis |= hyp.is_empty();
        for n in 1..=self.matches.len() {
            let h = ngram_counts(hyp, n);
            let r = ngram_counts(reference, n);
            self.matches[n - 1] += h
                .iter()
                .map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
            self.totals[n - 1] += hyp.len().saturating_sub(n - 1);
        }
    }

    /// Precision of each order as a `(numerator, denominator)` count pair;
    /// for orders above one a zero match count becomes `1 / (total + 1)`.
    fn fractions(&self) -> Vec<(u128, u128)> {
        self.matches
            .iter()
            .zip(&self.totals)
            .enumerate()
            .map(|(i, (&m, &t))| match (i, m) {
                (0, _) => (m as u128, t as u128),
                (_, 0) => (1, t as u128 + 1),
                _ => (m as u128, t as u128),
            })
            .collect()
    }

    pub fn report(&self) -> BleuReport {
        let fractions = self.fractions();
        let precisions: Vec<f64> = fractions
            .iter()
            .map(|&(m, t)| if t == 0 { 0.0 } else { m as f64 / t as f64 })
            .collect();
        let brevity_penalty = if self.hyp_len == 0 {
            0.0
        } else if self.hyp_len < self.ref_len {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        } else {
            1.0
        };
        let score = if self.hyp_len == 0 || precisions[0] == 0.0 {
            0.0
        } else {
            brevity_penalty * geometric_mean(&fractions, &precisions)
        };
        BleuReport {
            score,
            precisions,
            brevity_penalty,
            hyp_len: self.hyp_len,
            ref_len: self.ref_len,
            empty_hypothesis: self.empty_hypothesis,
        }
    }
}

/// Geometric mean of the precisions. The product is taken exactly over the
/// integer counts and a power-of-two root uses repeated square roots, so the
/// usual case is correctly rounded; otherwise falls back to mean log.
fn geometric_mean(fractions: &[(u128, u128)], precisions: &[f64]) -> f64 {
    let n = fractions.len();
    let product = fractions
        .iter()
        .try_fold((1u128, 1u128), |(num, den), &(m, t)| {
            Some((num.checked_mul(m)?, den.checked_mul(t)?))
        });
    match product {
        Some((num, den)) if n.is_power_of_two() => {
            let mut v = num as f64 / den as f64;
            for _ in 0..n.trailing_zeros() {
                v = v.sqrt();
            }
            v
        }
        _ => (precisions.iter().map(|p| p.ln()).sum::<f64>() / n as f64).exp(),
    }
}

/// Sentence-level BLEU up to `max_n`-grams.
pub fn bleu(hyp: &[TokenId], reference: &[TokenId], max_n: usize) -> BleuReport {
    let mut s = BleuStats::new(max_n);
    s.add(hyp, reference);
    s.report()
}

/// Corpus BLEU from pooled n-gram counts.
pub fn corpus_bleu<H: AsRef<[TokenId]>, R: AsRef<[TokenId]>>(
    hyps: &[H],
    refs: &[R],
    max_n: usize,
) -> BleuReport {
    assert_eq!(hyps.len(), refs.len(), "one reference per hypothesis");
    let mut s = BleuStats::new(max_n);
    for (h, r) in hyps.iter().zip(refs) {
        s.add(h.as_ref(), r.as_ref());
    }
    s.report()
}
