//! Reverse-mode automatic differentiation over small dense arrays.

mod graph;
mod store;
mod tensor;

pub mod gradcheck;

pub use graph::{Graph, Var};
pub use store::ParameterStore;
pub use tensor::Tensor;
