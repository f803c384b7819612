use thiserror::Error;

use crate::tensor::Shape;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {left} vs {right}")]
    Shape {
        op: &'static str,
        left: Shape,
        right: Shape,
    },
    #[error("invalid argument to {op}: {reason}")]
    Invalid { op: &'static str, reason: String },
    #[error("non-finite value produced by {op}")]
    Numerics { op: &'static str },
    #[error("backward requires a scalar loss, got {0}")]
    NotScalar(Shape),
    #[error("backward already ran on this graph; reset it before calling again")]
    BackwardTwice,
    #[error("loss does not depend on any differentiable input")]
    NoGradPath,
    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;
