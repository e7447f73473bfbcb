use std::process::ExitCode;

use rshift::Error as CoreError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Parse(String),
    #[error("data kinds do not match: {0}")]
    KindMismatch(String),
    #[error("windows do not match: {0}")]
    WindowMismatch(String),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            CliError::Usage(_) => 2,
            CliError::Parse(_) => 3,
            CliError::KindMismatch(_) => 4,
            CliError::WindowMismatch(_) => 5,
            CliError::Core(e) => match e {
                CoreError::Parse(_) => 3,
                CoreError::Config(_) | CoreError::Parameter { .. } => 2,
                _ => 1,
            },
            CliError::Io(_) => 1,
        })
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
