//! A compact reverse-mode automatic differentiation tape over dense `f64`
//! tensors, with support for differentiating through gradients.

pub mod kernels;
pub mod tape;
pub mod tensor;

pub use tape::{sigmoid, softplus, AutogradError, Result, Tape, Var};
pub use tensor::Tensor;
