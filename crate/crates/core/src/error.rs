use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition (shapes, ranges, ids).
    #[error("contract violation in {op}: {detail}")]
    Contract { op: &'static str, detail: String },

    #[error("matrix is not positive definite (pivot {pivot:e} at index {index})")]
    NotPositiveDefinite { index: usize, pivot: f64 },

    #[error("active-set solver stalled after {changes} active-set changes (column {column})")]
    SolverStall { column: usize, changes: usize },

    #[error("reduced KKT system is singular on active set of size {active} (column {column})")]
    DegenerateActiveSet { column: usize, active: usize },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },

    /// Configuration or checkpoint problems, one entry per issue, each
    /// starting with a JSON pointer where one applies.
    #[error("schema error: {}", .0.join("; "))]
    Schema(Vec<String>),

    #[error("training aborted at step {step}: {detail}")]
    Aborted { step: u64, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn contract(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Contract {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
