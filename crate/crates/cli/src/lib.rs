//! Experiment runner and report renderer.

pub mod config;
pub mod error;
pub mod pipeline;
pub mod report;

pub use config::ExperimentConfig;
pub use error::{CliError, CliResult};
