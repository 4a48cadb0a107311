use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("failed to load {path}: {reason}")]
    Load { path: PathBuf, reason: String },

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("pool build error: class `{0}` has no training images")]
    EmptyClass(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("non-finite value in {site} at layer {layer}")]
    Numeric { site: &'static str, layer: usize },

    #[error("non-finite loss at step {0}")]
    NonFiniteLoss(u64),

    #[error("checkpoint config hash mismatch: checkpoint {expected}, current {found}")]
    ConfigMismatch { expected: String, found: String },

    #[error("undefined AUROC: labels contain a single class")]
    UndefinedAuroc,

    #[error("output directory {0} is not empty (use --force to overwrite)")]
    NotEmpty(PathBuf),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
