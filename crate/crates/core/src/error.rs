use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("recovery cell n_t={n_t}, regime={regime}, seed={seed}: {source}")]
    GridCell {
        n_t: usize,
        regime: &'static str,
        seed: u64,
        source: Box<Error>,
    },

    #[error("non-finite value in {term}{}", step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    NonFinite { term: String, step: Option<u64> },

    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),

    #[error("{file}: row {row} has {found} fields, expected {expected}")]
    RaggedRow {
        file: String,
        row: usize,
        found: usize,
        expected: usize,
    },

    #[error("{file}: row {row}, column {col}: dosage value {value:?} is not 0 or 1")]
    NonBinaryDosage {
        file: String,
        row: usize,
        col: usize,
        value: String,
    },

    #[error("{file}: row {row}, column {col}: negative count {value}")]
    NegativeCount {
        file: String,
        row: usize,
        col: usize,
        value: f64,
    },

    #[error("{file}: row {row} has zero total count")]
    EmptyRow { file: String, row: usize },

    #[error("{file}: row {row}, column {col}: cannot parse {value:?}")]
    Parse {
        file: String,
        row: usize,
        col: usize,
        value: String,
    },

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("unknown perturbation {0:?}")]
    UnknownPerturbation(String),

    #[error("condition {0} has no cells in the evaluated rows")]
    EmptyCondition(String),

    #[error("correlation undefined: {0} is constant")]
    UndefinedCorrelation(&'static str),

    #[error("perturbation {0:?} appears in a batch but has no training cells")]
    UnseenPerturbation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Whether the failure is a problem with user-supplied inputs rather than
    /// a runtime or numerical failure.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::GridCell { source, .. } => source.is_validation(),
            other => !matches!(other, Error::NonFinite { .. } | Error::Shape { .. }),
        }
    }
}
