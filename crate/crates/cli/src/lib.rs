//! Configuration, experiment drivers and CSV output for the `ggn` binary.

pub mod config;
pub mod error;
pub mod experiment;
pub mod metrics;

pub use config::ExperimentConfig;
pub use error::CliError;
