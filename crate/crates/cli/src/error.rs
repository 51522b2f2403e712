use std::fmt;
use std::path::Path;

use mfgp_core::Error as CoreError;

/// A message plus the process exit code it maps to: 2 for usage and
/// validation problems, 1 for failed checks and failed training.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub msg: String,
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        Self { code: 2, msg: msg.into() }
    }

    pub fn failure(msg: impl Into<String>) -> Self {
        Self { code: 1, msg: msg.into() }
    }

    pub fn io(path: &Path, e: impl fmt::Display) -> Self {
        Self::usage(format!("{}: {e}", path.display()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.msg)
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Argument(_) | CoreError::Precondition(_) => Self::usage(e.to_string()),
            CoreError::Numerical { .. } | CoreError::Convergence { .. } => Self::failure(e.to_string()),
        }
    }
}
