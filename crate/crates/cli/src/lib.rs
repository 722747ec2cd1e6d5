//! Experiment runner for trainable-gate pruning: configs, synthetic
//! datasets, IDX ingestion, the brute-force selection oracle and recipes.

// `!(x > 0.0)` style checks also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod datasets;
pub mod experiments;
pub mod idx;
pub mod oracle;
pub mod recipes;

pub use config::{ConfigError, DatasetSpec, ExperimentConfig, ExperimentKind, ExperimentOptions};
pub use experiments::{run_experiment, run_experiment_file, Outcome, RunError, Summary};
