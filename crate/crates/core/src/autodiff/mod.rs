//! Dense tensors with reverse-mode automatic differentiation.

mod adamw;
mod gradcheck;
mod graph;
mod real;
mod rng;
mod tensor;

pub use adamw::{adamw_step, AdamWParams, AdamWState, Moments};
pub use gradcheck::{grad_check, grad_check_with, relative_error, GradCheckOptions, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use real::Real;
pub use rng::{gaussian_draw, RngState};
pub use tensor::Tensor;
