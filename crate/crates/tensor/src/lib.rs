//! Reverse-mode automatic differentiation over dense row-major matrices.
//!
//! Build a [`Graph`], record operations on [`Var`] handles, then call
//! [`Graph::backward`] on a scalar result. Trainable weights live in a
//! [`ParamStore`] and enter a graph through [`Graph::param`].
//!
//! ```
//! use umnmt_tensor::{Graph, Tensor};
//!
//! let g = Graph::new();
//! let w = g.leaf(Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap()).unwrap();
//! let x = g.constant(Tensor::from_rows(&[[1.0], [1.0]]).unwrap()).unwrap();
//! let y = g.matmul(w, x).unwrap();
//! assert_eq!(g.value(y).data(), &[3.0, 7.0]);
//! let loss = g.sum(y).unwrap();
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(w).unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
//! ```

mod attention;
mod error;
mod gradcheck;
mod graph;
mod kernels;
mod params;
mod tensor;

pub use attention::{AttentionLayout, AttentionWeights};
pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Graph, Var};
pub use params::{Param, ParamId, ParamStore};
pub use tensor::{Real, Shape, Tensor};

/// Epsilon used by every layer norm in this workspace.
pub const LAYER_NORM_EPS: Real = 1e-5;
