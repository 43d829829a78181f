use std::fmt::Display;
use std::path::Path;

use thiserror::Error;

/// Command failure, split by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad parameters or a failed invariant check; exit code 1.
    #[error("{0}")]
    Invalid(String),
    /// Unreadable or unparsable input, or an output that could not be written; exit code 2.
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn invalid(e: impl Display) -> Self {
        Self::Invalid(e.to_string())
    }

    pub fn parse(path: &Path, e: impl Display) -> Self {
        Self::Io(format!("cannot parse {}: {e}", path.display()))
    }

    pub fn write(path: &Path, e: impl Display) -> Self {
        Self::Io(format!("cannot write {}: {e}", path.display()))
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Invalid(_) => 1,
            Self::Io(_) => 2,
        }
    }
}
