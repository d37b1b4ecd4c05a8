//! Minimal tape-based reverse-mode autodiff.

mod graph;
mod params;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use params::{group_of, Adam, Init, Param, ParamId, ParamStore};
pub use tensor::{Scalar, Tensor};
