use std::process::ExitCode;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags or configuration; nothing was computed.
    #[error("invalid configuration: {0}")]
    Validation(String),

    #[error(transparent)]
    Runtime(#[from] featdenoise::Error),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Validation(_) => ExitCode::from(1),
            CliError::Runtime(_) => ExitCode::from(2),
        }
    }
}

/// Validation failures reported by the library while checking a config.
pub fn validation(e: featdenoise::Error) -> CliError {
    CliError::Validation(e.to_string())
}
