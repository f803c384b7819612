use std::io;

use thiserror::Error;
use umnmt_tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty sentence")]
    EmptySentence,
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("sequence of {len} tokens exceeds the model limit of {max}")]
    Length { len: usize, max: usize },
    #[error("modality error: {0}")]
    Modality(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid distribution: {0}")]
    Distribution(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("malformed {what}: {reason}")]
    Format { what: &'static str, reason: String },
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGrad(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn format(what: &'static str, reason: impl Into<String>) -> Self {
        Self::Format {
            what,
            reason: reason.into(),
        }
    }

    /// True for failures caused by non-finite numbers.
    pub fn is_numerics(&self) -> bool {
        matches!(
            self,
            Error::NonFiniteGrad(_) | Error::Tensor(TensorError::Numerics { .. })
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
