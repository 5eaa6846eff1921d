//! Trainable magnitude pruning with differentiable sparsity objectives.
// `!(x > 0.0)` rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod emit;
pub mod equiv;
pub mod error;
pub mod export;
pub mod gradcheck;
pub mod nn;
pub mod prune;
pub mod sparsity_loss;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
