//! Experiment harness: configuration, dataset loaders, seed sweeps, grid
//! ablations, cost tables and structure-convergence reports.

pub mod ablate;
pub mod config;
pub mod costs;
pub mod data;
pub mod error;
pub mod report;
pub mod runner;

pub use error::{HarnessError, Result};
