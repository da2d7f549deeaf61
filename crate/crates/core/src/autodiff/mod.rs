//! Reverse-mode automatic differentiation over [`Tensor`](crate::tensor::Tensor) values.
//!
//! Operations are recorded on a [`Tape`] as they are evaluated; [`Tape::backward`]
//! then sweeps the record in reverse. Broadcasting is limited to equal shapes
//! and single-element operands; wider broadcasts go through `matmul` with a ones vector.

mod conv;
pub mod gradcheck;
mod ops;
mod tape;

pub use tape::{Gradients, NodeInfo, Tape, Var};
