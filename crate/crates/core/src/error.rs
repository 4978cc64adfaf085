use alloc::string::String;

/// Errors raised anywhere in the laboratory core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value in {context}")]
    NonFinite { context: String },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid configuration at `{path}`: {reason}")]
    Config { path: String, reason: String },
    #[error("estimator constraint violated: {0}")]
    Estimator(String),
    #[error("unsupported oracle: {0}")]
    UnsupportedOracle(String),
    #[error("numerical abort: {0}")]
    Numerical(String),
}

pub type Result<T> = core::result::Result<T, Error>;

impl Error {
    pub(crate) fn config(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
