use serde::{Deserialize, Serialize};

use crate::corpus::{Lang, Modality, NUM_SPECIALS};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    /// Leading encoder and decoder layers shared by both languages.
    pub n_shared: usize,
    pub d_ff: usize,
    pub vocab_size_x: usize,
    pub vocab_size_y: usize,
    pub d_img: usize,
    pub k_img: usize,
    /// Longest encoder or decoder input, counting BOS and EOS.
    pub max_len: usize,
    /// Image attention term, 0 or 1.
    pub lambda1: u8,
    /// Composed text-image attention terms, 0 or 1.
    pub lambda2: u8,
    pub dropout_p: f64,
    /// Build the image encoder and image attention weights at all.
    pub image_pathway: bool,
    /// Seed for weight initialization.
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            n_shared: 1,
            d_ff: 128,
            vocab_size_x: 24 + NUM_SPECIALS,
            vocab_size_y: 24 + NUM_SPECIALS,
            d_img: 32,
            k_img: 16,
            max_len: 16,
            lambda1: 1,
            lambda2: 0,
            dropout_p: 0.1,
            image_pathway: true,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    /// 512-wide, 4-layer configuration with 14x14 image grids.
    pub fn full_scale() -> Self {
        Self {
            d_model: 512,
            n_heads: 8,
            n_layers: 4,
            n_shared: 3,
            d_ff: 2048,
            d_img: 1024,
            k_img: 196,
            max_len: 64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(msg.into()))
            }
        };
        check(
            self.d_model > 0 && self.n_heads > 0,
            "d_model and n_heads must be positive",
        )?;
        check(
            self.d_model.is_multiple_of(self.n_heads),
            "d_model must be divisible by n_heads",
        )?;
        check(self.n_layers > 0, "n_layers must be positive")?;
        check(
            self.n_shared <= self.n_layers,
            "n_shared must not exceed n_layers",
        )?;
        check(
            self.d_ff > 0 && self.d_img > 0 && self.k_img > 0,
            "widths must be positive",
        )?;
        check(
            self.vocab_size_x > NUM_SPECIALS && self.vocab_size_y > NUM_SPECIALS,
            "vocabularies must hold a token beyond the specials",
        )?;
        check(
            self.max_len >= 3,
            "max_len must leave room for BOS, EOS and one token",
        )?;
        check(
            self.lambda1 <= 1 && self.lambda2 <= 1,
            "lambda gates must be 0 or 1",
        )?;
        check(
            (0.0..1.0).contains(&self.dropout_p),
            "dropout_p must lie in [0, 1)",
        )?;
        check(
            self.image_pathway || (self.lambda1 == 0 && self.lambda2 == 0),
            "lambda gates need the image pathway",
        )?;
        Ok(())
    }

    pub fn vocab_size(&self, lang: Lang) -> usize {
        match lang {
            Lang::X => self.vocab_size_x,
            Lang::Y => self.vocab_size_y,
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Gates for a batch of the given modality.
    pub fn gates_for(&self, modality: Modality) -> Gates {
        if modality.uses_image() {
            Gates {
                image: self.lambda1 == 1,
                composed: self.lambda2 == 1,
            }
        } else {
            Gates::TEXT_ONLY
        }
    }

    /// Same network without the image encoder or image attention weights.
    pub fn without_image_pathway(&self) -> Self {
        Self {
            image_pathway: false,
            lambda1: 0,
            lambda2: 0,
            ..self.clone()
        }
    }
}

/// The two controllable-attention switches for one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Gates {
    pub image: bool,
    pub composed: bool,
}

impl Gates {
    pub const TEXT_ONLY: Gates = Gates {
        image: false,
        composed: false,
    };
    pub const IMAGE: Gates = Gates {
        image: true,
        composed: false,
    };
    pub const ALL: Gates = Gates {
        image: true,
        composed: true,
    };

    pub fn wants_image(self) -> bool {
        self.image || self.composed
    }
}
