use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    MalformedRow { path: PathBuf, line: u64, message: String },

    #[error("duplicate patient_id `{0}`")]
    DuplicatePatient(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    /// A fit was requested on data that cannot support it (one class, empty set, ...).
    #[error("degenerate training data: {0}")]
    Degenerate(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("test-split instance entered a fit call ({context})")]
    Leakage { context: String },

    #[error("unknown patient `{0}`")]
    UnknownPatient(String),

    #[error("unsupported format_version {found} (expected {expected})")]
    FormatVersion { found: u32, expected: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable category name used by the CLI for machine-parsable errors.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Degenerate(_) => "degenerate",
            Error::Leakage { .. } => "leakage",
            Error::MalformedRow { .. }
            | Error::DuplicatePatient(_)
            | Error::Data(_)
            | Error::DimensionMismatch { .. }
            | Error::UnknownPatient(_)
            | Error::FormatVersion { .. }
            | Error::Csv(_)
            | Error::Json(_) => "data",
            Error::Io(_) => "io",
        }
    }
}
