use std::path::PathBuf;

use thiserror::Error;

/// Every failure the library reports.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite or out-of-range value: {0}")]
    Numeric(String),

    #[error("batch is empty")]
    EmptyBatch,

    #[error("size guard exceeded: {what} = {value} > {limit}")]
    Size {
        what: &'static str,
        value: usize,
        limit: usize,
    },

    /// A Gram matrix has an eigenvalue at or below the floor, which happens when
    /// two sampled gradients coincide or a gradient vanishes.
    #[error("singular Gram matrix{}: eigenvalue {eigenvalue:e} <= floor {floor:e}", trial_suffix(*.trial))]
    SingularGram {
        eigenvalue: f64,
        floor: f64,
        trial: Option<usize>,
    },

    #[error("singular Fisher matrix: eigenvalue {eigenvalue:e} <= floor {floor:e}")]
    SingularFisher { eigenvalue: f64, floor: f64 },

    #[error("softmax calibration failed: {0}")]
    Calibration(String),

    #[error("batch of {len} samples cannot be split into {parts} equal sub-batches")]
    IndivisibleBatch { len: usize, parts: usize },

    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error("malformed IDX data at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("premise not met: train loss exceeds the smoothed-label entropy floor by {excess:e} (limit {limit:e})")]
    Premise { excess: f64, limit: f64 },

    #[error("interlacing violated at r = {index}: {detail}")]
    InterlacingViolation { index: usize, detail: String },

    #[error("surrogate residual does not decay at first order: {0}")]
    Order(String),

    #[error("scenario failed: {0}")]
    Scenario(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn trial_suffix(trial: Option<usize>) -> String {
    match trial {
        Some(t) => format!(" in trial {t}"),
        None => String::new(),
    }
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
