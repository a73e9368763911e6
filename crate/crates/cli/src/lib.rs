//! Command implementations behind the `recap` binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod experiment;

pub use error::CliError;
