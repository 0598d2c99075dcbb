//! Dense tensors and a tape-based reverse-mode differentiation engine.
//!
//! Shapes are always explicit: there is no broadcasting, and every binary
//! op checks that its operands agree exactly. A [`Graph`] borrows the
//! [`ParamStore`] it reads parameters from and returns gradients by value,
//! so several graphs over the same store can run on worker threads and be
//! reduced afterwards in a fixed order.

mod gradcheck;
mod graph;
mod params;
mod scalar;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckConfig, GradCheckReport, ParamCheck};
pub use graph::{Grads, Graph, PoolKind, Var};
pub use params::{AdamConfig, Gradients, ParamGroup, ParamId, ParamStore};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;
