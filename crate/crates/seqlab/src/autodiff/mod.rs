//! Tensors, the computation graph, gradient checking, and Adam.

mod check;
mod graph;
mod optim;
mod tensor;

pub use check::{grad_check, GradCheckReport};
pub use graph::{Graph, NodeId};
pub use optim::{Adam, GradBuffer, ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
