//! Tensors, reverse-mode differentiation, Adam, and Cholesky solves.

mod adam;
mod graph;
mod linalg;
mod params;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use graph::{backward, cross_log_density, gaussian_log_density, Activation, Gradients, Graph, NodeId, LN_2PI};
pub use linalg::{cholesky, cholesky_solve};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
