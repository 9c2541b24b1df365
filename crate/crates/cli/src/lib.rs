//! Batch experiment runner: parses a config, loads or simulates data, runs
//! the chosen sampler on the chosen model and writes traces and summaries.

pub mod compare;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod simulate;

pub use compare::{compare_experiments, ComparisonRow};
pub use config::{ExperimentConfig, ModelSpec, RawConfig};
pub use error::{CliError, ConfigError};
pub use experiment::{run_chains, run_experiment, Summary};
