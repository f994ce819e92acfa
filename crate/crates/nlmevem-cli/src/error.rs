//! CLI-side error type with the process exit-code policy attached.

use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("{path} line {line}: {message}")]
    Data {
        path: String,
        line: u64,
        message: String,
    },
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] nlmevem::error::Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub fn parse(path: &Path, message: impl Into<String>) -> Self {
        CliError::Parse {
            path: path.display().to_string(),
            message: message.into(),
        }
    }

    pub fn data(path: &Path, line: u64, message: impl Into<String>) -> Self {
        CliError::Data {
            path: path.display().to_string(),
            line,
            message: message.into(),
        }
    }

    /// 2 for usage/configuration/data problems, 3 for numerical failures.
    /// The split follows the library's own classification: an error that
    /// depends on the evaluation point is numerical, everything else is a
    /// problem with the inputs.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) if e.is_point_dependent() => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
