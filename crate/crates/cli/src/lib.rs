//! Experiment runner for GHM-CWAP: dataset generation, training, evaluation
//! and ablation comparisons driven by a TOML config.

pub mod commands;
pub mod config;
pub mod error;
pub mod runner;

pub use config::{DatasetSource, ExperimentConfig, Overrides};
pub use error::{CliError, CliResult};
