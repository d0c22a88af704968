use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("nifti error on {path}: {message}")]
    Nifti { path: PathBuf, message: String },

    #[error("expected 3D image, found {0} dimensions")]
    NotThreeDimensional(usize),

    #[error("invalid voxel spacing {0:?}: every component must be finite and > 0")]
    InvalidSpacing([f64; 3]),

    #[error("non-finite intensity at voxel {0:?}")]
    NonFiniteIntensity([usize; 3]),

    #[error("degenerate intensity: volume has fewer than two distinct values")]
    DegenerateIntensity,

    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },

    #[error("spacing mismatch: {left:?} vs {right:?}")]
    SpacingMismatch { left: [f64; 3], right: [f64; 3] },

    #[error("mask values must be 0 or 1, found {0}")]
    NonBinaryMask(i64),

    #[error("point {point:?} outside grid {shape:?}")]
    OutOfBounds { point: [i64; 3], shape: [usize; 3] },

    #[error("invalid domain tag: {0}")]
    InvalidDomainTag(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("phantom organ fraction {fraction:.5} outside [0.001, 0.1] after {attempts} attempts")]
    PhantomFraction { fraction: f64, attempts: usize },

    #[error("split error: {0}")]
    Split(String),

    #[error("isolation check failed: {0}")]
    Isolation(String),

    #[error("architecture mismatch: {0}")]
    Architecture(String),

    #[error("block count {k} out of range 1..={total}")]
    BlockRange { k: usize, total: usize },

    #[error("non-finite loss at step {step} (seed {seed}, cases {cases:?})")]
    NonFiniteLoss { step: usize, seed: u64, cases: Vec<String> },

    #[error(
        "training diverged at step {step}: loss {loss} exceeded 10x initial {initial} for {window} consecutive steps"
    )]
    Diverged {
        step: usize,
        loss: f64,
        initial: f64,
        window: usize,
    },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("no results")]
    NoResults,

    #[error("serialization error: {0}")]
    Serde(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
