//! Reverse-mode differentiation over [`Tensor`](crate::tensor::Tensor)
//! values, plus a finite-difference gradient checker.

mod gradcheck;
mod graph;
pub(crate) mod kernels;

pub use gradcheck::{grad_check, GradCheck};
pub use graph::{BinaryOp, Gradients, Graph, ReduceOp, UnaryOp, Var};

#[cfg(test)]
mod tests;
