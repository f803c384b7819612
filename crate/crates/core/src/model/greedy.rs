use umnmt_tensor::{Graph, Real};

use super::config::Gates;
use super::network::{Dropout, Model};
use crate::corpus::{ImageFeatureGrid, Lang, TokenId, TokenSeq, BOS, EOS};
use crate::error::{Error, Result};

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: &[Real]) -> TokenId {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Lockstep greedy decoding of `items` sequences.
///
/// `step(active, last)` returns next-token logits for every still-active
/// item given its most recent token (BOS first). Decoding stops at EOS or
/// after `max_len` tokens; outputs exclude BOS and EOS.
pub fn greedy_loop<F>(items: usize, max_len: usize, mut step: F) -> Result<Vec<Vec<TokenId>>>
where
    F: FnMut(&[usize], &[TokenId]) -> Result<Vec<Vec<Real>>>,
{
    let mut out = vec![Vec::new(); items];
    let mut active: Vec<usize> = (0..items).collect();
    let mut last = vec![BOS; items];
    for _ in 0..max_len {
        if active.is_empty() {
            break;
        }
        let logits = step(&active, &last)?;
        if logits.len() != active.len() {
            return Err(Error::Data("step returned the wrong number of rows".into()));
        }
        let mut still = Vec::with_capacity(active.len());
        let mut next_last = Vec::with_capacity(active.len());
        for (&item, row) in active.iter().zip(&logits) {
            let tok = argmax(row);
            if tok == EOS {
                continue;
            }
            out[item].push(tok);
            still.push(item);
            next_last.push(tok);
        }
        active = still;
        last = next_last;
    }
    Ok(out)
}

impl Model {
    /// Inference-mode translation from `src_lang` into the other language.
    /// Runs on its own gradient-free graph, so nothing computed from the
    /// output can reach the parameters. Output length is capped at
    /// `max_len` and at what the encoders accept.
    pub fn greedy_decode(
        &self,
        sources: &[&TokenSeq],
        src_lang: Lang,
        images: Option<&[&ImageFeatureGrid]>,
        gates: Gates,
        max_len: usize,
    ) -> Result<Vec<TokenSeq>> {
        if sources.is_empty() {
            return Ok(Vec::new());
        }
        let g = Graph::no_grad();
        let text = self.encode_text(&g, sources, src_lang, &mut Dropout::Off)?;
        let image = match images {
            Some(grids) if gates.wants_image() => Some(self.encode_image(&g, grids)?),
            _ => None,
        };
        let tgt = src_lang.other();
        let memory = self.decoder_memory(&g, tgt, &text, image.as_ref(), gates)?;
        let mut cache = self.new_cache(sources.len());
        let cap = max_len.min(self.config().max_len - 2);
        let ids = greedy_loop(sources.len(), cap, |active, last| {
            let logits = self.decode_step(&g, &memory, &mut cache, active, last)?;
            let t = g.value(logits);
            Ok((0..t.rows()).map(|r| t.row(r).to_vec()).collect())
        })?;
        Ok(ids.into_iter().map(|v| TokenSeq::decoded(tgt, v)).collect())
    }
}
