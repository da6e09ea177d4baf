//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records primitive operations as they are evaluated; a single
//! reverse sweep from a scalar output produces [`Gradients`] for every node.
//! [`Mlp`] builds on top of it, and [`Adam`] updates parameter tensors from
//! the resulting gradients.

mod error;
pub mod gradcheck;
mod loss;
mod mlp;
mod optim;
mod tape;
mod tensor;

pub use error::{Error, Result};
pub use loss::{half_mse, huber, huber_value};
pub use mlp::{Activation, BoundMlp, Mlp};
pub use optim::{Adam, AdamConfig};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
