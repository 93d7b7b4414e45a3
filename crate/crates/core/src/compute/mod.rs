//! Dense tensors, reverse-mode differentiation, and the Adam optimizer.

pub mod checkpoint;
pub mod gradcheck;
mod graph;
pub mod kernels;
mod optim;
mod tensor;

pub use gradcheck::{gradient_check, GradCheckConfig, GradCheckReport, ParamCheck};
pub use graph::{AttnShape, Gradients, Graph, Var, MASK_NEG};
pub use optim::{optimizer_step, AdamConfig, AdamState};
pub use tensor::{ParameterSet, Tensor};

#[cfg(test)]
mod tests;
