//! Dense tensors, reverse-mode differentiation and the optimizer.

mod graph;
mod optim;
mod tensor;

pub use graph::{softmax, Gradients, Graph, Var};
pub use optim::{optimizer_steps_total, Adam, AdamConfig, Parameter};
pub use tensor::{Scalar, Tensor};


