//! Multi-view variational autoencoders with task-related multi-view contrastive
//! learning, for auditory attention decoding from EEG and competing speech.

// Validation deliberately uses `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod data;
pub mod error;
pub mod gaussian;
pub mod io;
pub mod losses;
pub mod model;
pub mod mvt1;
pub mod optim;
pub mod parallel;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
