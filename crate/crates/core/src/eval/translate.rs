use serde::{Deserialize, Serialize};

use super::bleu::{BleuReport, BleuStats, MAX_ORDER};
use crate::corpus::{ImageFeatureGrid, Lang, Modality, ParallelPair, TokenId, TokenSeq};
use crate::error::{Error, Result};
use crate::model::{Gates, Model};

/// Extra output tokens allowed beyond the longest source in a batch.
pub const LENGTH_SLACK: usize = 3;
const CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalModality {
    WithImage,
    TextOnly,
}

impl EvalModality {
    pub fn batch_modality(self) -> Modality {
        match self {
            EvalModality::WithImage => Modality::TextImage,
            EvalModality::TextOnly => Modality::TextOnly,
        }
    }
}

/// Greedy translation of every source, in chunks.
pub fn translate(
    model: &Model,
    sources: &[&TokenSeq],
    src_lang: Lang,
    images: Option<&[&ImageFeatureGrid]>,
    gates: Gates,
) -> Result<Vec<TokenSeq>> {
    if let Some(imgs) = images {
        if imgs.len() != sources.len() {
            return Err(Error::Data(format!(
                "{} images for {} sentences",
                imgs.len(),
                sources.len()
            )));
        }
    }
    let mut out = Vec::with_capacity(sources.len());
    for (i, chunk) in sources.chunks(CHUNK).enumerate() {
        let imgs = images.map(|all| &all[i * CHUNK..i * CHUNK + chunk.len()]);
        let budget = chunk.iter().map(|s| s.len()).max().unwrap_or(0) + LENGTH_SLACK;
        out.extend(model.greedy_decode(chunk, src_lang, imgs, gates, budget)?);
    }
    Ok(out)
}

/// Position-wise matches over reference length, pooled over sentences.
pub fn token_accuracy<H: AsRef<[TokenId]>, R: AsRef<[TokenId]>>(hyps: &[H], refs: &[R]) -> f64 {
    let mut hits = 0;
    let mut total = 0;
    for (h, r) in hyps.iter().zip(refs) {
        let (h, r) = (h.as_ref(), r.as_ref());
        hits += h.iter().zip(r).filter(|(a, b)| a == b).count();
        total += r.len();
    }
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionReport {
    pub source: Lang,
    pub bleu: f64,
    pub token_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bleu: f64,
    pub precisions: Vec<f64>,
    pub bp: f64,
    pub token_accuracy: f64,
    pub n_sentences: usize,
    pub modality: EvalModality,
    pub directions: Vec<DirectionReport>,
}

/// Translates the test pairs in both directions. Corpus BLEU pools n-gram
/// counts over both directions; token accuracy is the mean of the two
/// directions.
pub fn evaluate(
    model: &Model,
    test: &[ParallelPair],
    modality: EvalModality,
) -> Result<EvalReport> {
    let gates = match modality {
        EvalModality::WithImage => {
            if !model.config().image_pathway {
                return Err(Error::Modality("model has no image pathway".into()));
            }
            if test.iter().any(|p| p.image.is_none()) {
                return Err(Error::Modality(
                    "with_image evaluation needs features for every pair".into(),
                ));
            }
            let gates = model.config().gates_for(Modality::TextImage);
            if !gates.wants_image() {
                return Err(Error::Modality(
                    "model config keeps the image gates closed".into(),
                ));
            }
            gates
        }
        EvalModality::TextOnly => Gates::TEXT_ONLY,
    };
    let images: Option<Vec<&ImageFeatureGrid>> = match modality {
        EvalModality::WithImage => Some(
            test.iter()
                .map(|p| p.image.as_deref().expect("checked"))
                .collect(),
        ),
        EvalModality::TextOnly => None,
    };
    let mut pooled = BleuStats::new(MAX_ORDER);
    let mut directions = Vec::new();
    for src in [Lang::X, Lang::Y] {
        let sources: Vec<&TokenSeq> = test.iter().map(|p| p.side(src)).collect();
        let refs: Vec<&[TokenId]> = test
            .iter()
            .map(|p| p.side(src.other()).ids.as_slice())
            .collect();
        let hyps = translate(model, &sources, src, images.as_deref(), gates)?;
        let hyp_ids: Vec<&[TokenId]> = hyps.iter().map(|h| h.ids.as_slice()).collect();
        let mut dir = BleuStats::new(MAX_ORDER);
        for (h, r) in hyp_ids.iter().zip(&refs) {
            dir.add(h, r);
            pooled.add(h, r);
        }
        directions.push(DirectionReport {
            source: src,
            bleu: dir.report().score,
            token_accuracy: token_accuracy(&hyp_ids, &refs),
        });
    }
    let BleuReport {
        score,
        precisions,
        brevity_penalty,
        ..
    } = pooled.report();
    let token_accuracy =
        directions.iter().map(|d| d.token_accuracy).sum::<f64>() / directions.len() as f64;
    Ok(EvalReport {
        bleu: score,
        precisions,
        bp: brevity_penalty,
        token_accuracy,
        n_sentences: test.len(),
        modality,
        directions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_counts_positions_over_reference_length() {
        let hyps: [&[usize]; 2] = [&[4, 5, 9], &[6]];
        let refs: [&[usize]; 2] = [&[4, 5, 6, 7], &[6, 7]];
        assert_eq!(token_accuracy(&hyps, &refs), 3.0 / 6.0);
        let long: [&[usize]; 1] = [&[4, 4, 4, 4, 4]];
        assert_eq!(token_accuracy(&long, &[&[4usize][..]]), 1.0);
    }
}
