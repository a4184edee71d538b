//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.

mod conv;
mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{finite_diff_grad, max_relative_error, relative_error};
pub use graph::{Gradients, Graph, TensorId};
pub use tensor::Tensor;
