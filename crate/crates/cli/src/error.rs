use std::process::ExitCode;

use gamem::error::{DesignError, FitError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad files, flags or data. Exit code 1.
    #[error("{0}")]
    Input(String),
    /// The numerics failed on valid input. Exit code 2.
    #[error("{0}")]
    Numerical(String),
    /// The reader of stdout went away; treated as success.
    #[error("broken pipe")]
    ClosedOutput,
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Input(_) => ExitCode::from(1),
            CliError::Numerical(_) => ExitCode::from(2),
            CliError::ClosedOutput => ExitCode::SUCCESS,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

pub fn input(msg: impl Into<String>) -> CliError {
    CliError::Input(msg.into())
}

impl From<DesignError> for CliError {
    fn from(e: DesignError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<FitError> for CliError {
    fn from(e: FitError) -> Self {
        match e {
            FitError::Design(d) => d.into(),
            other => CliError::Numerical(other.to_string()),
        }
    }
}
