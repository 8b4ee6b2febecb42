use std::io;
use std::path::PathBuf;

use thiserror::Error;

use crate::optimizers::Trajectory;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension must be at least 1")]
    EmptyDimension,

    #[error("invalid batch: size {batch} from {n} samples")]
    InvalidBatch { batch: usize, n: usize },

    #[error("probability {0} outside [0, 1]")]
    InvalidProbability(f64),

    #[error("label {label} at sample {index} is outside the {domain} domain")]
    InvalidLabel {
        index: usize,
        label: f64,
        domain: &'static str,
    },

    #[error("expected exactly two distinct labels, found {0}")]
    LabelCardinality(usize),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("feature index {index} out of range for dimension {d}")]
    FeatureOutOfRange { index: usize, d: usize },

    #[error("dataset has no nonzero features; smoothness bound would be zero")]
    DegenerateSmoothness,

    #[error("warm-up sample count must be at least 1")]
    InvalidWarmup,

    #[error("true Hessian diagonal is zero; relative error undefined")]
    DegenerateDiagnostic,

    #[error("line {line}: {message}")]
    MalformedLine { line: usize, message: String },

    #[error("line {line}, column {column}: cannot parse {token:?}")]
    Parse {
        line: usize,
        column: usize,
        token: String,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("grid has no cells")]
    InvalidGrid,

    #[error("run diverged after {passes:.3} effective passes")]
    Diverged {
        passes: f64,
        partial: Box<Trajectory>,
    },

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn with_path(self, path: impl Into<PathBuf>) -> Self {
        Error::File {
            path: path.into(),
            source: Box::new(self),
        }
    }
}
