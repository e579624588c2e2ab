//! Sparse training with iterative exploitation and exploration of the
//! parameter space, plus the reference sparse-training baselines.

pub mod baselines;
pub mod data;
pub mod engine;
pub mod error;
pub mod events;
pub mod flops;
pub mod importance;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod select;
pub mod sparsity;
pub mod structured;

pub use error::{Error, Result};
