use std::process::ExitCode;

use thiserror::Error;

/// Failures of a CLI command, grouped by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad arguments, invalid configuration, or unreadable inputs.
    #[error("{0}")]
    Config(String),
    /// Training or evaluation failed after the inputs were accepted.
    #[error("{0}")]
    Runtime(String),
    /// A verification command found a mismatch.
    #[error("{0}")]
    Verification(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Config(_) => 1,
            Self::Runtime(_) => 2,
            Self::Verification(_) => 3,
        }
    }

    pub fn to_exit(&self) -> ExitCode {
        ExitCode::from(self.exit_code())
    }

    pub(crate) fn config(e: impl std::fmt::Display) -> Self {
        Self::Config(e.to_string())
    }

    pub(crate) fn runtime(e: impl std::fmt::Display) -> Self {
        Self::Runtime(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
