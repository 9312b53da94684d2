use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("backward requires a scalar loss, got dims {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("degenerate anomaly density: sigma_e must be > 0")]
    DegenerateDensity,

    #[error("weight file: {0}")]
    Weights(#[from] WeightFormatError),

    #[error("layout violation at {path}: {detail}")]
    Layout { path: PathBuf, detail: String },

    #[error("missing mask for anomalous image {0}")]
    MissingMask(PathBuf),

    #[error("image {path}: {detail}")]
    Image { path: PathBuf, detail: String },

    #[error("missing weights: {0}")]
    MissingWeights(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Failure kinds for the FVW1 tensor-pack format.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum WeightFormatError {
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("truncated while reading {0}")]
    Truncated(String),
    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),
    #[error("unsupported dtype {dtype} for tensor {name:?}")]
    UnsupportedDtype { name: String, dtype: u8 },
    #[error("tensor name is not valid UTF-8")]
    BadName,
    #[error("tensor {0:?} too large for the format")]
    TooLarge(String),
}

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}
