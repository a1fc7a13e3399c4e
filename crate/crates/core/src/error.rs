use std::path::PathBuf;

use thiserror::Error;

use crate::data::pts::PtsError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid landmark set: {0}")]
    InvalidLandmarks(String),

    #[error("degenerate shape: landmarks have zero extent")]
    DegenerateShape,

    #[error("degenerate inter-ocular distance: outer eye corners coincide")]
    DegenerateIod,

    #[error("crop box lies entirely outside the {width}x{height} image")]
    OutOfFrame { width: usize, height: usize },

    #[error("landmark {index} lies off the {width}x{height} map")]
    OffMap { index: usize, width: usize, height: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    #[error(transparent)]
    Pts(#[from] PtsError),

    #[error("image decode error in {path}: {detail}")]
    Image { path: PathBuf, detail: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("manifest error at line {line}: {detail}")]
    Manifest { line: usize, detail: String },

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
