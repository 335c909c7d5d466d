use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate box: {0}")]
    DegenerateBox(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("missing pyramid level P{0}")]
    MissingLevel(u8),

    #[error("cost matrix contains NaN at ({row}, {col})")]
    NanCost { row: usize, col: usize },

    #[error("stale cache: {0}")]
    StaleCache(String),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checksum mismatch: {0}")]
    Checksum(String),

    #[error("malformed file {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Process exit code for the command line: 2 config, 3 data or I/O, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Shape(_)
            | Error::MissingLevel(_)
            | Error::StaleCache(_)
            | Error::Version { .. }
            | Error::Checksum(_)
            | Error::Format { .. }
            | Error::Io { .. } => 3,
            Error::DegenerateBox(_) | Error::NanCost { .. } | Error::NonFinite(_) | Error::UndefinedCorrelation(_) => 4,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
