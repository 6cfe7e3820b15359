//! Minimal reverse-mode automatic differentiation over `f64` tensors.
//!
//! A [`Tape`] records every operation as it is evaluated; [`Tape::backward`]
//! then sweeps the tape in reverse, summing gradients into every node that
//! requires one. Parameters live outside the tape as owned [`Tensor`]s and
//! are registered as leaves each step.

mod kernels;
mod ops;
pub mod smt;
mod tape;
mod tensor;

pub use kernels::matmul as matmul_values;
pub use ops::{logistic, softmax_row, CE_PROB_FLOOR};
pub use tape::{Diagnostics, Tape, Var};
pub use tensor::Tensor;
