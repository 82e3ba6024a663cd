//! Tape-based reverse-mode automatic differentiation over `f64` tensors.
//!
//! The op set is exactly what the encoders and the evidential loss need:
//! matrix products, row-wise softmax / log-softmax / normalization, softplus,
//! ψ and ln Γ, and a handful of reshaping and reduction ops.

pub mod gradcheck;
pub mod ops;
pub mod special;
mod tape;
mod tensor;

pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
