use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("numerical singularity in channel {channel}, state index {index}: |1 - dt*a/2| = {pivot:e}")]
    NumericalSingularity {
        channel: usize,
        index: usize,
        pivot: f64,
    },

    #[error("numerical overflow: {0}")]
    NumericalOverflow(String),

    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("invalid parameters: {0}")]
    InvalidParameters(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("empty bag: sequences must contain at least one token")]
    EmptyBag,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("parse error in {path} at byte {offset}: {reason}")]
    Parse {
        path: PathBuf,
        offset: u64,
        reason: String,
    },

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable identifier for the error family.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::NumericalSingularity { .. } => "numerical-singularity",
            Error::NumericalOverflow(_) => "numerical-overflow",
            Error::ContractViolation(_) => "contract-violation",
            Error::ShapeMismatch { .. } => "shape-mismatch",
            Error::InvalidParameters(_) => "invalid-parameters",
            Error::InvalidConfig(_) => "invalid-config",
            Error::EmptyBag => "empty-bag",
            Error::DimensionMismatch { .. } => "dimension-mismatch",
            Error::EmptyInput(_) => "empty-input",
            Error::UndefinedMetric(_) => "undefined-metric",
            Error::NonFiniteGradient(_) => "non-finite-gradient",
            Error::Parse { .. } => "parse",
            Error::Manifest(_) => "manifest",
            Error::Io { .. } => "io",
            Error::Csv(_) => "csv",
        }
    }
}
