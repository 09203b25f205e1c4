use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value is out of range or inconsistent with another.
    #[error("invalid configuration: {field}: {reason}")]
    Config { field: String, reason: String },

    /// A call received arguments that violate its preconditions.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// Two shapes that must agree do not.
    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    /// An on-disk artifact is malformed.
    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    /// A computation produced NaN or infinity.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("adapter `{adapter}` failed on frame {frame}: {reason}")]
    Adapter {
        adapter: String,
        frame: usize,
        reason: String,
    },
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn shape(expected: impl ToString, actual: impl ToString) -> Self {
        Error::Shape {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error class: 2 validation, 3 numeric, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::Argument(_) | Error::Shape { .. } => 2,
            Error::Numeric(_) => 3,
            Error::Format { .. } | Error::Io { .. } | Error::Adapter { .. } => 4,
        }
    }
}

pub(crate) fn ensure_finite(values: &[f64], what: &str) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(idx) => Err(Error::Numeric(format!(
            "{what}: non-finite value {} at index {idx}",
            values[idx]
        ))),
    }
}
