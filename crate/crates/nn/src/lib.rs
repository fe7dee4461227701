//! Minimal numerics for small sequence-to-sequence models: dense `f64`
//! tensors, a tape-based reverse-mode autodiff, pre-norm transformer blocks
//! with relative position bias, Adam, and a named-parameter checkpoint format.

pub mod attention;
pub mod checkpoint;
mod error;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod optim;
mod params;
mod tape;
mod tensor;

pub use error::{NnError, Result};
pub use params::{Grads, ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
