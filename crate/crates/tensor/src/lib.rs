//! Minimal dense tensors with tape-based reverse-mode differentiation.
//!
//! Values live on a [`Tape`]; every operation appends a node and
//! [`Tape::backward`] sweeps the tape in reverse. Parameters are held in a
//! [`ParamStore`] and bound onto a fresh tape for every forward pass.

mod error;
pub mod gradcheck;
mod optim;
mod params;
mod scalar;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use optim::{Adam, AdamConfig};
pub use params::{Bound, ParamId, ParamStore};
pub use scalar::Scalar;
pub use tape::{Band, Gradients, Tape, Var};
pub use tensor::Tensor;
