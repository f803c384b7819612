//! Two text encoder/decoder pairs with shared leading layers, an image
//! feature encoder, and gated multi-source cross-attention.

mod checkpoint;
mod config;
mod greedy;
mod network;
mod weights;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{Gates, ModelConfig};
pub use greedy::{argmax, greedy_loop};
pub use network::{
    CrossTrace, DecodeCache, DecodeOutput, DecoderMemory, Dropout, Encoded, LayerMemory, Model,
};
pub use weights::is_image_param;
