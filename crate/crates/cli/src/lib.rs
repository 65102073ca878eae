//! Library side of the `dsibh` binary: experiment config and subcommands.

pub mod commands;
pub mod config;

pub use commands::{CliError, CliResult};
pub use config::ExperimentConfig;
