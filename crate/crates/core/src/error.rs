use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("vector norm below 1e-12, cannot normalize")]
    ZeroVector,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("temperature must be positive and finite, got {0}")]
    InvalidTemperature(f64),

    #[error("empty embedding list")]
    EmptyList,

    #[error("pair set must contain at least one modality pair")]
    EmptyPairSet,

    #[error("duplicate modality pair {0} in pair set")]
    DuplicatePair(String),

    #[error("batch of {got} samples is too small, need at least {need}")]
    BatchTooSmall { got: usize, need: usize },

    #[error("invalid dims: latent k={k} exceeds feature dimension d_in={d_in}")]
    InvalidDims { k: usize, d_in: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("step {step} outside schedule range [0, {total}]")]
    StepOutOfRange { step: usize, total: usize },

    #[error("non-finite gradient in {tensor} at step {step}")]
    NonFiniteGradient { step: usize, tensor: String },

    #[error("loss diverged to {value} at step {step}")]
    DivergenceDetected { step: usize, value: f64 },

    #[error("retrieval pool is empty")]
    EmptyPool,

    #[error("K={k} outside [1, {pool_size}]")]
    KOutOfRange { k: usize, pool_size: usize },

    #[error("duplicate candidate id {0}")]
    DuplicateId(u64),

    #[error("ground truth id {0} not present in pool")]
    UnknownGroundTruth(u64),

    #[error("missing modality: {0}")]
    MissingModality(String),

    #[error("power iteration did not converge within {iters} iterations")]
    NoConvergence { iters: usize },

    #[error("degenerate data: total variance {0:e} below 1e-12")]
    DegenerateData(f64),

    #[error("verification failed: {0}")]
    VerificationFailed(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    /// Process exit code: 2 for configuration or validation problems, 1 for
    /// everything that fails at runtime.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::InvalidDims { .. }
            | Error::InvalidTemperature(_)
            | Error::EmptyPairSet
            | Error::DuplicatePair(_)
            | Error::InvalidArgument(_)
            | Error::KOutOfRange { .. } => 2,
            _ => 1,
        }
    }
}
