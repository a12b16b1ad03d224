//! Experiment front-end: config parsing, result tables, plots, and the
//! multi-run harnesses behind each subcommand.

pub mod config;
pub mod harness;
pub mod pca;
pub mod report;
pub mod svg;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad invocation or malformed config; exit code 1.
    #[error("{0}")]
    Usage(String),
    /// Failure while running; exit code 2.
    #[error("{0}")]
    Runtime(String),
}

impl From<raglab_core::error::Error> for CliError {
    fn from(e: raglab_core::error::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}
