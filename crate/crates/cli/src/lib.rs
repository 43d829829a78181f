//! Command implementations behind the `mvwin` binary.

pub mod canonical;
pub mod commands;
pub mod config;
pub mod error;

use std::path::Path;

pub use config::PipelineConfig;
pub use error::CliError;

/// Reads a UTF-8 input file, mapping failures to exit code 2.
pub fn read_input(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("cannot open input {}: {e}", path.display())))
}
