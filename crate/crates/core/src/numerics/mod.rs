//! Dense `f64` linear algebra with exact reverse-mode differentiation.

mod activation;
mod graph;
mod tensor;

pub use activation::Nonlinearity;
pub(crate) use graph::log_sum_exp;
pub use graph::{GradientContext, Gradients, Var};
pub use tensor::Tensor;
