//! Configuration, experiment runner and acceptance suite behind the `salab`
//! binary.

pub mod acceptance;
pub mod analyze;
pub mod config;
pub mod experiment;

pub use config::{ConfigError, ExperimentConfig};
pub use experiment::{execute, run_experiment, Outcome, RunError};
