//! Library half of the `otkd` binary: run configuration and subcommands.

pub mod commands;
pub mod config;

pub use commands::CliError;
pub use config::{ConfigError, RunConfig};
