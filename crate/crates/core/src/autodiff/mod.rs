//! Minimal reverse-mode differentiation over the operator set the codec needs.

mod gradcheck;
mod graph;
pub mod kernels;
mod params;
mod tensor;

pub use gradcheck::{grad_check, GradCheckEntry, GradCheckOptions, GradCheckReport};
pub use graph::{Gradients, Graph, RoundMode, Var};
pub use params::ParamStore;
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
