//! Unsupervised multi-modal translation: two text encoder/decoder pairs and
//! an image-feature encoder trained with denoising auto-encoding and
//! cycle-consistency losses.

pub mod corpus;
pub mod diagnostics;
mod error;
pub mod eval;
pub mod model;
pub mod training;

pub use error::{Error, Result};
