//! Error type for IO, configuration, and orchestration.

use std::fmt;
use std::path::PathBuf;

#[derive(Debug)]
pub enum LabError {
    /// Invalid configuration or command line (exit code 1).
    Config(String),
    /// File IO failure with the offending path.
    Io { path: PathBuf, source: std::io::Error },
    /// Malformed file contents.
    Format { path: PathBuf, message: String },
    /// Failure propagated from the numeric core.
    Core(poisonlab_core::Error),
    /// Anything else that stops a run (exit code 2).
    Runtime(String),
}

impl fmt::Display for LabError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LabError::Config(msg) => write!(f, "config error: {msg}"),
            LabError::Io { path, source } => write!(f, "io error on {}: {source}", path.display()),
            LabError::Format { path, message } => {
                write!(f, "malformed file {}: {message}", path.display())
            }
            LabError::Core(e) => write!(f, "{e}"),
            LabError::Runtime(msg) => write!(f, "runtime error: {msg}"),
        }
    }
}

impl std::error::Error for LabError {}

impl From<poisonlab_core::Error> for LabError {
    fn from(e: poisonlab_core::Error) -> Self {
        LabError::Core(e)
    }
}

impl LabError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LabError::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        LabError::Format { path: path.into(), message: message.into() }
    }

    /// Process exit code: 1 for configuration problems, 2 otherwise.
    pub fn exit_code(&self) -> u8 {
        match self {
            LabError::Config(_) => 1,
            _ => 2,
        }
    }
}

pub type LabResult<T> = Result<T, LabError>;
