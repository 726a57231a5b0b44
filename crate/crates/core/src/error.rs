use std::fmt;
use std::path::PathBuf;

/// One invariant violation found while validating a parameter bundle.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub field: String,
    pub message: String,
}

impl Violation {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("failed to parse {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("invalid configuration: {}", format_violations(.0))]
    Validation(Vec<Violation>),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("calibration response bin {bin} is singular")]
    SingularResponse { bin: usize },

    #[error("calibration response has {got} bins, scan needs {expected}")]
    ResponseLength { expected: usize, got: usize },

    #[error("drift correction: {0}")]
    Drift(String),

    #[error("scan is already extended to {0} samples")]
    AlreadyExtended(usize),

    #[error("unknown scan direction (az {az} deg, el {el} deg)")]
    UnknownDirection { az: f64, el: f64 },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("schema error in {path}: {message}")]
    Schema { path: PathBuf, message: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn format_violations(v: &[Violation]) -> String {
    v.iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn schema(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Schema {
            path: path.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
