use std::path::{Path, PathBuf};

use serde::Serialize;

/// Process exit statuses.
pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error("invalid configuration at `{path}`: {reason}")]
    Config { path: String, reason: String },
    #[error("numerical abort: {0}")]
    Numerical(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Core(flowrl_core::error::Error),
    #[error("{0}")]
    Other(String),
}

pub type LabResult<T> = Result<T, LabError>;

impl From<flowrl_core::error::Error> for LabError {
    fn from(e: flowrl_core::error::Error) -> Self {
        use flowrl_core::error::Error as E;
        match e {
            E::Config { path, reason } => LabError::Config { path, reason },
            E::UnsupportedOracle(reason) => LabError::Config {
                path: String::from("reward"),
                reason,
            },
            E::Numerical(m) => LabError::Numerical(m),
            E::NonFinite { context } => {
                LabError::Numerical(format!("non-finite value in {context}"))
            }
            other => LabError::Core(other),
        }
    }
}

impl From<csv::Error> for LabError {
    fn from(e: csv::Error) -> Self {
        LabError::Other(format!("csv: {e}"))
    }
}

impl LabError {
    pub fn config(path: impl Into<String>, reason: impl Into<String>) -> Self {
        LabError::Config {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        LabError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Config { .. } => EXIT_CONFIG,
            LabError::Numerical(_) => EXIT_NUMERICAL,
            _ => EXIT_FAILURE,
        }
    }

    /// Machine-readable form printed to stdout on failure.
    pub fn report(&self) -> ErrorReport {
        let (kind, path) = match self {
            LabError::Config { path, .. } => ("config", Some(path.clone())),
            LabError::Numerical(_) => ("numerical", None),
            LabError::Io { path, .. } => ("io", Some(path.display().to_string())),
            LabError::Core(_) | LabError::Other(_) => ("error", None),
        };
        let message = match self {
            LabError::Config { reason, .. } => reason.clone(),
            other => other.to_string(),
        };
        ErrorReport {
            status: "error",
            kind,
            path,
            message,
            exit_code: self.exit_code(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ErrorReport {
    pub status: &'static str,
    pub kind: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    pub message: String,
    pub exit_code: i32,
}
