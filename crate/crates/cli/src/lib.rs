//! Command implementations behind the `lasaft` binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod selftest;

pub use config::RunConfig;
pub use error::{CliError, EXIT_IO, EXIT_NUMERIC, EXIT_USAGE};
