//! Command-line front end for the simulator and the training harness.

pub mod bridge;
pub mod commands;
pub mod manifest;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, missing inputs or invalid configuration.
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
    /// A replay that did not reproduce its recording.
    #[error("{0}")]
    Mismatch(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) | CliError::Mismatch(_) => 1,
        }
    }
}

impl From<surgisim::SimError> for CliError {
    fn from(e: surgisim::SimError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<surgisim_rl::RlError> for CliError {
    fn from(e: surgisim_rl::RlError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
