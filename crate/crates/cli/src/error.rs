use std::path::PathBuf;

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] latent_update::Error),

    #[error("{0}")]
    Usage(String),

    #[error("refusing to overwrite existing artifact {}", .0.display())]
    Exists(PathBuf),

    #[error("workspace is locked by {}; another writer may be running", .0.display())]
    Locked(PathBuf),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Machine-readable error codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Code {
    StaleCache,
    DegenerateWeights,
    CappedEss,
    Validation,
}

impl CliError {
    pub fn code(&self) -> Code {
        match self {
            CliError::Core(latent_update::Error::StaleCache { .. }) => Code::StaleCache,
            CliError::Core(latent_update::Error::DegenerateWeights { .. }) => {
                Code::DegenerateWeights
            }
            _ => Code::Validation,
        }
    }
}

#[derive(Serialize)]
pub struct ErrorReport<'a> {
    pub error: Code,
    pub message: &'a str,
}

#[derive(Serialize)]
pub struct WarningReport<'a> {
    pub warning: Code,
    pub message: &'a str,
}
