//! Minimal reverse-mode automatic differentiation over `f64` tensors.
//!
//! Only the operations needed by the models in this crate are provided.

mod graph;
mod optim;
mod tensor;

pub use graph::{Graph, GuardMode, Var, DIV_GUARD_EPS};
pub use optim::{Adam, Optimizer, Sgd};
pub use tensor::Tensor;
