//! Minimal dense-tensor substrate with reverse-mode differentiation.
//!
//! Graphs are rebuilt per example (define-by-run). Parameters enter a graph
//! as borrowed leaves, so building a graph never copies model weights.

mod check;
mod graph;
mod tensor;

pub use check::{grad_check, relative_error, GradCheckReport, RELATIVE_ERROR_FLOOR};
pub use graph::{log_sum_exp, CustomBackward, Gradients, Graph, Var};
pub use tensor::Tensor;
