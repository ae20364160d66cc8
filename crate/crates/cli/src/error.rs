use std::process::ExitCode;

use thiserror::Error;

/// A failure with the exit code it maps to.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad arguments, config or input data; nothing was run.
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Runtime(String),
    /// A model endpoint stayed unreachable or kept returning unusable output.
    #[error("{0}")]
    Exhausted(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            CliError::Runtime(_) => 1,
            CliError::Invalid(_) => 2,
            CliError::Exhausted(_) => 3,
        })
    }

    pub fn runtime(e: impl std::fmt::Display) -> Self {
        CliError::Runtime(e.to_string())
    }

    pub fn invalid(e: impl std::fmt::Display) -> Self {
        CliError::Invalid(e.to_string())
    }
}
