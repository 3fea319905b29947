//! Command-line orchestration of the saber pipeline:
//! simulate, preprocess, erp, lateralize, iem, stats, run and validate.
//!
//! Every subcommand is a plain function taking parsed arguments, so the
//! binary, the tests and the Python bindings share one code path.

pub mod args;
pub mod commands;
pub mod config;
pub mod manifest;
pub mod pipeline;
pub mod plot;
pub mod report;

use std::fmt;

pub use args::{Cli, Command};
pub use commands::dispatch;
pub use config::PipelineConfig;

/// Failure with its process exit code: 2 for usage and configuration
/// problems, 1 for everything that goes wrong while running.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }

    pub fn from_core(e: saber_core::Error) -> Self {
        match e {
            saber_core::Error::Config(_) => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.into()),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Runtime(e) => write!(f, "{e:#}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<saber_core::Error> for CliError {
    fn from(e: saber_core::Error) -> Self {
        CliError::from_core(e)
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
