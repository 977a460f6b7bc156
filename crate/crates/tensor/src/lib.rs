//! Dense tensor core with reverse-mode differentiation.
//!
//! Values live in [`Tensor`]; differentiable computation is recorded on a
//! per-pass [`Graph`] through [`Var`] handles. Learnable state is kept in a
//! [`ParamStore`] and updated by [`AdamW`].

mod backward;
pub mod checkpoint;
mod error;
pub mod gradcheck;
mod graph;
pub mod nn;
mod optim;
mod param;
mod tensor;

pub use error::{Result, TensorError};
pub use graph::{sigmoid, Graph, Var};
pub use optim::{adamw_step, AdamState, AdamW, AdamWConfig};
pub use param::{ParamId, ParamStore};
pub use tensor::{broadcast_shape, numel, Precision, Tensor};
