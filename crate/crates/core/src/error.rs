use std::path::PathBuf;

/// Errors produced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("matrix is not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },

    #[error("matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("spectral basis needs {required} modes, above the cap of {cap}")]
    ModeCapExceeded { required: usize, cap: usize },

    #[error("no point accepted after {proposals} proposals (point {index} of {rank})")]
    ProposalBudgetExceeded {
        proposals: u64,
        index: usize,
        rank: usize,
    },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("{0}")]
    EmptyInput(&'static str),

    #[error("row {row}, column `{column}`: cannot parse `{value}` as a number")]
    ParseCell {
        row: usize,
        column: String,
        value: String,
    },

    #[error("unknown label value `{value}` (expected `{positive}` or one other value)")]
    UnknownLabel { value: String, positive: String },

    #[error("column `{0}` not found in header")]
    MissingColumn(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
