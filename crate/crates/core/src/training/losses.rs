use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use umnmt_tensor::{Graph, Var};

use crate::corpus::{
    corrupt_image, noise_delete, noise_permute, Batch, ImageFeatureGrid, TokenId, TokenSeq, BOS,
    EOS,
};
use crate::error::{Error, Result};
use crate::model::{Dropout, Gates, Model};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub p_del: f64,
    pub k_w: usize,
    pub p_drop: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            p_del: 0.1,
            k_w: 3,
            p_drop: 0.1,
        }
    }
}

impl NoiseConfig {
    pub const NONE: NoiseConfig = NoiseConfig {
        p_del: 0.0,
        k_w: 0,
        p_drop: 0.0,
    };
}

/// Gates for `batch`, checked against what the model can do.
pub fn batch_gates(model: &Model, batch: &Batch) -> Result<Gates> {
    let gates = model.config().gates_for(batch.modality);
    if gates.wants_image() && batch.images().is_none() {
        return Err(Error::Modality(
            "image gate open on a batch without images".into(),
        ));
    }
    Ok(gates)
}

/// Decoder inputs `BOS ++ x` and targets `x ++ EOS`.
pub(crate) fn teacher_pairs(texts: &[&TokenSeq]) -> (Vec<Vec<TokenId>>, Vec<TokenId>) {
    let mut inputs = Vec::with_capacity(texts.len());
    let mut targets = Vec::new();
    for t in texts {
        let mut inp = Vec::with_capacity(t.len() + 1);
        inp.push(BOS);
        inp.extend_from_slice(&t.ids);
        inputs.push(inp);
        targets.extend_from_slice(&t.ids);
        targets.push(EOS);
    }
    (inputs, targets)
}

/// Mean cross-entropy of reconstructing `targets` with the decoder of
/// their language, given already-encoded sources.
fn reconstruct(
    model: &Model,
    g: &Graph,
    source: (&[&TokenSeq], crate::corpus::Lang),
    images: Option<&[&ImageFeatureGrid]>,
    gates: Gates,
    targets: &[&TokenSeq],
    drop: &mut Dropout<'_>,
) -> Result<Var> {
    let text = model.encode_text(g, source.0, source.1, drop)?;
    let image = match images {
        Some(grids) if gates.wants_image() => Some(model.encode_image(g, grids)?),
        _ => None,
    };
    let lang = targets[0].lang;
    let memory = model.decoder_memory(g, lang, &text, image.as_ref(), gates)?;
    let (inputs, flat_targets) = teacher_pairs(targets);
    let refs: Vec<&[TokenId]> = inputs.iter().map(Vec::as_slice).collect();
    let out = model.decode(g, &memory, &refs, drop)?;
    Ok(g.cross_entropy_rows(out.logits, &flat_targets, None)?)
}

/// Denoising reconstruction: encode a permuted-then-thinned copy of each
/// sentence (and a dropout-corrupted image when the image gate is open)
/// and predict the clean sentence.
pub fn loss_auto(
    model: &Model,
    g: &Graph,
    batch: &Batch,
    noise: &NoiseConfig,
    rng: &mut ChaCha8Rng,
    drop: &mut Dropout<'_>,
) -> Result<Var> {
    let gates = batch_gates(model, batch)?;
    let clean = batch.texts();
    let noisy: Vec<TokenSeq> = clean
        .iter()
        .map(|t| noise_delete(&noise_permute(t, noise.k_w, rng), noise.p_del, rng))
        .collect();
    let noisy_refs: Vec<&TokenSeq> = noisy.iter().collect();
    let corrupted: Option<Vec<ImageFeatureGrid>> = match batch.images() {
        Some(grids) if gates.wants_image() => Some(
            grids
                .iter()
                .map(|g| corrupt_image(g, noise.p_drop, rng))
                .collect(),
        ),
        _ => None,
    };
    let img_refs: Option<Vec<&ImageFeatureGrid>> = corrupted.as_ref().map(|v| v.iter().collect());
    reconstruct(
        model,
        g,
        (&noisy_refs, batch.lang),
        img_refs.as_deref(),
        gates,
        &clean,
        drop,
    )
}

/// Pseudo-translations of the batch into the other language, decoded
/// greedily in inference mode.
pub fn pseudo_translate(model: &Model, batch: &Batch) -> Result<Vec<TokenSeq>> {
    let gates = batch_gates(model, batch)?;
    let texts = batch.texts();
    let images = batch.images();
    let max_len = texts.iter().map(|t| t.len()).max().unwrap_or(1) + crate::eval::LENGTH_SLACK;
    model.greedy_decode(&texts, batch.lang, images.as_deref(), gates, max_len)
}

/// Cycle loss given pseudo-translations: the reverse model reads each
/// pseudo sentence plus the image and must reproduce the original text.
pub fn loss_cycle_from(
    model: &Model,
    g: &Graph,
    batch: &Batch,
    pseudo: &[TokenSeq],
    drop: &mut Dropout<'_>,
) -> Result<Var> {
    let gates = batch_gates(model, batch)?;
    if pseudo.len() != batch.len() {
        return Err(Error::Data(
            "one pseudo-translation per example is required".into(),
        ));
    }
    let other = batch.lang.other();
    if pseudo.iter().any(|p| p.lang != other) {
        return Err(Error::Data(
            "pseudo-translations must be in the other language".into(),
        ));
    }
    let src: Vec<&TokenSeq> = pseudo.iter().collect();
    let images = batch.images();
    reconstruct(
        model,
        g,
        (&src, other),
        images.as_deref(),
        gates,
        &batch.texts(),
        drop,
    )
}

/// Cycle-consistency loss with a fresh inference-mode pseudo-translation.
pub fn loss_cycle(model: &Model, g: &Graph, batch: &Batch, drop: &mut Dropout<'_>) -> Result<Var> {
    let pseudo = pseudo_translate(model, batch)?;
    loss_cycle_from(model, g, batch, &pseudo, drop)
}
