//! Command-line front end: configuration, data ingestion, experiment
//! orchestration and report assembly.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod pipeline;

pub use config::RunConfig;
pub use error::{CliError, CliResult};
