//! Tensors, differentiable operations and the gradient oracle.

pub mod checkpoint;
pub mod gradcheck;
mod graph;
mod ops;
pub mod optim;
mod param;
mod scalar;
mod tensor;

pub use gradcheck::{gradcheck, GradcheckConfig, GradcheckReport, ParamCheck};
pub use graph::{Gradients, Graph, Var};
pub use optim::clipped_step;
pub use param::{Param, ParamInit, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;
