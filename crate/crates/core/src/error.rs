use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the workbench.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("non-finite value in {context} at index {index}")]
    NonFinite { context: String, index: usize },

    #[error("invalid {field}: {reason}")]
    Invalid { field: String, reason: String },

    #[error("parse error in {source_name} at {location}: {reason}")]
    Parse {
        source_name: String,
        location: String,
        reason: String,
    },

    #[error("usage: {0}")]
    Usage(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Invalid {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 1 usage, 2 data, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Invalid { .. } => 1,
            Error::Parse { .. } | Error::Io { .. } => 2,
            Error::Shape { .. } | Error::Domain(_) | Error::NonFinite { .. } => 3,
        }
    }
}

/// Returns the first non-finite entry of `values`, if any.
pub(crate) fn check_finite(values: &[f64], context: &str) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite {
            context: context.to_string(),
            index,
        }),
        None => Ok(()),
    }
}
