use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("duplicate doc_id: {0}")]
    DuplicateDocId(String),

    #[error("duplicate query_id {0} in {1}")]
    DuplicateQueryId(u64, &'static str),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("k out of range: k={k}, corpus size={n}")]
    KOutOfRange { k: usize, n: usize },

    #[error("sample size out of range: m={m}, available={available}")]
    SampleOutOfRange { m: usize, available: usize },

    #[error(
        "random complement exhausted for query {query_id}: \
         {available} candidates outside the neighbor set, {needed} requested"
    )]
    ComplementExhausted {
        query_id: u64,
        available: usize,
        needed: usize,
    },

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("degenerate variance in {0}")]
    DegenerateVariance(&'static str),

    #[error("row {row} has norm {norm}, outside 1 +/- {tolerance}")]
    NormViolation { row: usize, norm: f64, tolerance: f64 },

    #[error("matrix file {path}: {detail}")]
    MatrixFormat { path: PathBuf, detail: String },

    #[error("embedding service: {0}")]
    Service(String),

    #[error("schema violation: {0}")]
    Schema(String),

    #[error("missing input: {0}")]
    MissingInput(PathBuf),

    #[error("run directory locked by {0} (remove stale lock file to proceed)")]
    LockHeld(PathBuf),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Schema(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Schema(e.to_string())
    }
}

impl Error {
    /// Stable kebab-case tag for machine-parseable diagnostics.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::DuplicateDocId(_) => "duplicate-doc-id",
            Error::DuplicateQueryId(..) => "duplicate-query-id",
            Error::DimMismatch { .. } => "dim-mismatch",
            Error::InvalidParameter(_) => "invalid-parameter",
            Error::KOutOfRange { .. } => "k-out-of-range",
            Error::SampleOutOfRange { .. } => "sample-out-of-range",
            Error::ComplementExhausted { .. } => "complement-exhausted",
            Error::EmptyCorpus => "empty-corpus",
            Error::EmptyInput(_) => "empty-input",
            Error::DegenerateVariance(_) => "degenerate-variance",
            Error::NormViolation { .. } => "norm-violation",
            Error::MatrixFormat { .. } => "matrix-format",
            Error::Service(_) => "service",
            Error::Schema(_) => "schema",
            Error::MissingInput(_) => "missing-input",
            Error::LockHeld(_) => "lock-held",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
