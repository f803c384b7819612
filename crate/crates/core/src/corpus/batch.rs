use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::features::ImageFeatureGrid;
use super::vocab::{Lang, TokenId, TokenSeq, PAD};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub text: TokenSeq,
    pub image: Option<Arc<ImageFeatureGrid>>,
}

impl Example {
    pub fn text_only(text: TokenSeq) -> Self {
        Self { text, image: None }
    }

    pub fn with_image(text: TokenSeq, image: Arc<ImageFeatureGrid>) -> Self {
        Self {
            text,
            image: Some(image),
        }
    }
}

/// Held-out sentence pair with an optional shared image.
#[derive(Debug, Clone, PartialEq)]
pub struct ParallelPair {
    pub x: TokenSeq,
    pub y: TokenSeq,
    pub image: Option<Arc<ImageFeatureGrid>>,
}

impl ParallelPair {
    pub fn side(&self, lang: Lang) -> &TokenSeq {
        match lang {
            Lang::X => &self.x,
            Lang::Y => &self.y,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    TextOnly,
    TextImage,
}

impl Modality {
    pub fn uses_image(self) -> bool {
        self == Modality::TextImage
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModalitySchedule {
    #[default]
    Alternate,
    TextOnly,
    ImageOnly,
}

impl ModalitySchedule {
    /// Modality of the `index`-th batch in a stream.
    pub fn modality_at(self, index: usize) -> Modality {
        match self {
            ModalitySchedule::TextOnly => Modality::TextOnly,
            ModalitySchedule::ImageOnly => Modality::TextImage,
            ModalitySchedule::Alternate if index.is_multiple_of(2) => Modality::TextOnly,
            ModalitySchedule::Alternate => Modality::TextImage,
        }
    }
}

/// Examples of one language, padded with PAD to the longest sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub lang: Lang,
    pub modality: Modality,
    pub examples: Vec<Example>,
    pub padded: Vec<Vec<TokenId>>,
}

impl Batch {
    pub fn new(examples: Vec<Example>, modality: Modality) -> Result<Self> {
        let lang = examples
            .first()
            .ok_or_else(|| Error::Data("batch has no examples".into()))?
            .text
            .lang;
        if examples.iter().any(|e| e.text.lang != lang) {
            return Err(Error::Data("batch mixes languages".into()));
        }
        if modality.uses_image() && examples.iter().any(|e| e.image.is_none()) {
            return Err(Error::Modality(
                "text-image batch contains an example without an image".into(),
            ));
        }
        let width = examples.iter().map(|e| e.text.len()).max().unwrap_or(0);
        let padded = examples
            .iter()
            .map(|e| {
                let mut row = e.text.ids.clone();
                row.resize(width, PAD);
                row
            })
            .collect();
        Ok(Self {
            lang,
            modality,
            examples,
            padded,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn texts(&self) -> Vec<&TokenSeq> {
        self.examples.iter().map(|e| &e.text).collect()
    }

    /// Images of every example; `None` unless the batch is text-image.
    pub fn images(&self) -> Option<Vec<&ImageFeatureGrid>> {
        if !self.modality.uses_image() {
            return None;
        }
        Some(
            self.examples
                .iter()
                .map(|e| e.image.as_deref().expect("checked"))
                .collect(),
        )
    }
}

/// One shuffled pass over `examples`, tagged by `schedule`.
pub fn make_batches<R: Rng + ?Sized>(
    examples: &[Example],
    batch_size: usize,
    schedule: ModalitySchedule,
    rng: &mut R,
) -> Result<BatchStream> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(rng);
    let chunks: Vec<Vec<Example>> = order
        .chunks(batch_size)
        .map(|c| c.iter().map(|&i| examples[i].clone()).collect())
        .collect();
    Ok(BatchStream {
        chunks: chunks.into_iter(),
        schedule,
        index: 0,
    })
}

pub struct BatchStream {
    chunks: std::vec::IntoIter<Vec<Example>>,
    schedule: ModalitySchedule,
    index: usize,
}

impl Iterator for BatchStream {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        let chunk = self.chunks.next()?;
        let modality = self.schedule.modality_at(self.index);
        self.index += 1;
        Some(Batch::new(chunk, modality))
    }
}

/// Endless batch sampler that reshuffles every epoch from `(seed, epoch)`,
/// so the batch at any step can be recomputed after a restart.
#[derive(Debug, Clone)]
pub struct EpochSampler {
    n: usize,
    batch_size: usize,
    seed: u64,
    cached: Option<(usize, Vec<usize>)>,
}

impl EpochSampler {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::EmptyCorpus);
        }
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(Self {
            n,
            batch_size,
            seed,
            cached: None,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.n.div_ceil(self.batch_size)
    }

    /// Example indices of batch number `step`.
    pub fn indices(&mut self, step: usize) -> Vec<usize> {
        let per_epoch = self.batches_per_epoch();
        let epoch = step / per_epoch;
        let within = step % per_epoch;
        if self.cached.as_ref().map(|c| c.0) != Some(epoch) {
            let mut rng = ChaCha8Rng::seed_from_u64(
                self.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
            );
            let mut order: Vec<usize> = (0..self.n).collect();
            order.shuffle(&mut rng);
            self.cached = Some((epoch, order));
        }
        let order = &self.cached.as_ref().expect("filled above").1;
        let start = within * self.batch_size;
        order[start..(start + self.batch_size).min(self.n)].to_vec()
    }
}
