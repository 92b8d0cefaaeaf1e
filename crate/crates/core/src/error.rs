use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A spatial extent is not a multiple of what the operation needs.
    #[error("axis {axis}: extent {extent} is not divisible by {divisor}")]
    NotDivisible {
        axis: char,
        extent: usize,
        divisor: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("label value {value} out of range for {classes} classes")]
    LabelOutOfRange { value: u8, classes: usize },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("non-finite loss at step {step}: {value}")]
    Divergence { step: usize, value: f64 },

    #[error("bad magic in {0}")]
    BadMagic(String),

    #[error("unsupported format version {0}")]
    BadVersion(u16),

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("malformed file: {0}")]
    Malformed(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable short identifier used in machine-readable failure lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::NotDivisible { .. } => "not_divisible",
            Error::Config(_) => "config",
            Error::LabelOutOfRange { .. } => "label_range",
            Error::Empty(_) => "empty",
            Error::Divergence { .. } => "divergence",
            Error::BadMagic(_) => "bad_magic",
            Error::BadVersion(_) => "bad_version",
            Error::Truncated(_) => "truncated",
            Error::Malformed(_) => "malformed",
            Error::Io { .. } => "io",
        }
    }
}
