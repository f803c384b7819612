use rand::Rng;

use super::features::ImageFeatureGrid;
use super::vocab::TokenSeq;

/// Drops each token with probability `p_del`; keeps the first token when
/// every token would be dropped.
pub fn noise_delete<R: Rng + ?Sized>(seq: &TokenSeq, p_del: f64, rng: &mut R) -> TokenSeq {
    assert!((0.0..1.0).contains(&p_del), "p_del must lie in [0, 1)");
    if p_del == 0.0 {
        return seq.clone();
    }
    let mut ids: Vec<_> = seq
        .ids
        .iter()
        .copied()
        .filter(|_| rng.random::<f64>() >= p_del)
        .collect();
    if ids.is_empty() {
        ids.push(seq.ids[0]);
    }
    TokenSeq::decoded(seq.lang, ids)
}

/// Local shuffle: each position gets the key `i + U(0, window + 1)` and
/// tokens are stably sorted by key, so no token moves more than `window`
/// places.
pub fn noise_permute<R: Rng + ?Sized>(seq: &TokenSeq, window: usize, rng: &mut R) -> TokenSeq {
    if window == 0 || seq.len() < 2 {
        return seq.clone();
    }
    let span = (window + 1) as f64;
    let mut keyed: Vec<(f64, usize)> = seq
        .ids
        .iter()
        .enumerate()
        .map(|(i, &id)| (i as f64 + rng.random::<f64>() * span, id))
        .collect();
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0));
    TokenSeq::decoded(seq.lang, keyed.into_iter().map(|(_, id)| id).collect())
}

/// Inverted dropout over every feature entry.
pub fn corrupt_image<R: Rng + ?Sized>(
    grid: &ImageFeatureGrid,
    p_drop: f64,
    rng: &mut R,
) -> ImageFeatureGrid {
    assert!((0.0..1.0).contains(&p_drop), "p_drop must lie in [0, 1)");
    if p_drop == 0.0 {
        return grid.clone();
    }
    let scale = 1.0 / (1.0 - p_drop);
    let mut out = grid.clone();
    for v in out.data_mut() {
        *v = if rng.random::<f64>() < p_drop {
            0.0
        } else {
            *v * scale
        };
    }
    out
}
