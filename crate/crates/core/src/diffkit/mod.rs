//! Minimal differentiable-computation kit: parameter storage, a reverse-mode
//! tape over dense matrices, input-time derivatives and Adam.

mod adam;
mod check;
mod dual;
mod graph;
mod params;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use check::{grad_check, gradient, rel_err, GradCheck};
pub use dual::{time_derivative, Dual};
pub use graph::{Graph, ParamGrads, Var};
pub use params::{Param, ParamId, ParamStore};
pub use tensor::{sigmoid, softplus, Tensor};
