//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Provides just enough to train small convolutional heatmap regressors:
//! 2D convolutions (plain and transposed), elementwise ops, reductions, and
//! an extension point ([`Function`]) for fused losses with hand-written
//! backward passes.

pub mod conv;
pub mod gradcheck;
mod graph;
pub mod linalg;
pub mod optim;
mod tensor;

pub use graph::{Function, Gradients, Graph, Var};
pub use tensor::Tensor;
