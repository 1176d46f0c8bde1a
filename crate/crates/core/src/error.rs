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

    #[error("malformed json in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value at flat index {index} in {what}")]
    NonFinite { what: String, index: usize },

    #[error("duplicate layer id `{0}`")]
    DuplicateLayer(String),

    #[error("invalid model graph: {0}")]
    InvalidGraph(String),

    #[error("block width {block} does not divide {n} filters (enable filter padding to allow this)")]
    NotDivisible { block: usize, n: usize },

    #[error("pruning rate {0} outside [0, 1]")]
    InvalidRate(f64),

    #[error("mask inconsistent with tensor: {0}")]
    MaskMismatch(String),

    #[error("invalid BSR layer: {0}")]
    InvalidBsr(String),

    #[error("rearrangement refused for layer `{layer}`: {reason}")]
    Structural { layer: String, reason: String },

    #[error("`{layer}` is not block-sparse: {reason}")]
    NotBlockSparse { layer: String, reason: String },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
