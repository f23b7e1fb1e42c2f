use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid shape {shape:?} for {values} values")]
    InvalidShape { shape: Vec<usize>, values: usize },

    #[error("mask row {row} has no unmasked positions")]
    DegenerateMask { row: usize },

    #[error("target index {index} out of range for {classes} classes (row {row})")]
    TargetOutOfRange {
        row: usize,
        index: usize,
        classes: usize,
    },

    #[error("loss node must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("node {0} does not belong to this graph")]
    UnknownNode(usize),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    IdOutOfRange { id: usize, vocab_size: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("row {row} is not unit-norm (norm {norm})")]
    NotNormalized { row: usize, norm: f64 },

    #[error("undefined similarity: {0}")]
    UndefinedSimilarity(String),

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("{malformed} of {total} lines malformed in {path} (limit {limit:.2}%)")]
    TooManyMalformed {
        path: PathBuf,
        malformed: usize,
        total: usize,
        limit: f64,
    },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("checkpoint integrity check failed: {0}")]
    Integrity(String),

    #[error("checkpoint dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("unsupported checkpoint version {0}")]
    Version(u32),

    #[error("power iteration did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("zero total variance")]
    ZeroVariance,

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}
