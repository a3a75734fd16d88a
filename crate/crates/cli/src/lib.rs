//! Experiment runner: one TOML configuration drives training, detector
//! calibration, clean and corrupted evaluation, and attack campaigns.

pub mod config;
pub mod pipeline;

pub use config::{ConfigError, Experiment, ExperimentConfig};
pub use pipeline::{Cell, CliError, CliResult, Models, Run};
