//! Desk-scale unlearning experiments built on `negmerge-core`: synthetic
//! Gaussian-cluster data, a small ReLU classifier, fine-tune pools over
//! hyperparameter grids, accuracy and membership-attack metrics, and a
//! pipeline comparing merge strategies under a retain-accuracy floor.

pub mod dataset;
mod error;
pub mod experiment;
pub mod metrics;
pub mod mlp;
pub mod pool;

pub use crate::error::{HarnessError, Result};
pub use crate::experiment::{run_experiment, run_experiment_threads, ExperimentConfig, ExperimentReport, MethodId};
