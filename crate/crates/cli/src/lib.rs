//! Configuration and subcommands behind the `upat` binary.

pub mod commands;
pub mod config;

pub use commands::CliError;
pub use config::{ExperimentConfig, Radius};
