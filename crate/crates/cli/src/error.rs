use std::io;
use std::process::ExitCode;

use thiserror::Error;

/// Failure of a command, grouped by what the user has to fix.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing data: {0}")]
    MissingData(String),

    #[error("training diverged: {0}")]
    NonFinite(String),

    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Other(_) => 1,
            CliError::Config(_) => 2,
            CliError::MissingData(_) => 3,
            CliError::NonFinite(_) => 4,
            CliError::Usage(_) => 64,
        }
    }
}

impl From<CliError> for ExitCode {
    fn from(e: CliError) -> Self {
        ExitCode::from(e.exit_code())
    }
}

impl From<swr_core::Error> for CliError {
    fn from(e: swr_core::Error) -> Self {
        use swr_core::Error as E;
        match e {
            E::Config(m) | E::Architecture(m) => CliError::Config(m),
            E::Io { ref source, .. } if source.kind() == io::ErrorKind::NotFound => {
                CliError::MissingData(e.to_string())
            }
            E::NonFinite(m) => CliError::NonFinite(m),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Other(e.to_string())
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
