//! Dense tensors and a reverse-mode tape.

pub mod gradcheck;
mod tape;
mod tensor;

pub use tape::{Tape, Var};
pub use tensor::Tensor;

/// Default negative slope for LeakyReLU.
pub const LEAKY_SLOPE: f64 = 0.01;
