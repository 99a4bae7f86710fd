//! Error types shared across the crate.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {left} vs {right}")]
    ShapeMismatch { left: String, right: String },

    #[error("channel mismatch: expected {expected}, got {got}")]
    ChannelMismatch { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArg(String),

    #[error("validity mask has no valid pixel")]
    EmptyMask,

    #[error("non-finite value produced by {context}")]
    NonFinite { context: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("unknown config key: {0}")]
    UnknownConfigKey(String),

    #[error("bad file format: {0}")]
    Format(String),

    #[error("output path {0} exists (pass --force to overwrite)")]
    OutputExists(PathBuf),

    #[error("output directory is locked by another run: {0}")]
    Locked(PathBuf),

    #[error("missing file: {0}")]
    MissingFile(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape_mismatch(left: impl std::fmt::Debug, right: impl std::fmt::Debug) -> Self {
        Error::ShapeMismatch {
            left: format!("{left:?}"),
            right: format!("{right:?}"),
        }
    }
}
