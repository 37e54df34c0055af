use std::path::PathBuf;

use thiserror::Error;

#[derive(Error, Debug)]
pub enum DgError {
    #[error("config: {0}")]
    Config(String),

    #[error("data: {0}")]
    Data(String),

    #[error("shape mismatch in {ctx}: expected {expected}, got {got}")]
    Shape { ctx: String, expected: String, got: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("training diverged at iteration {iter}: {detail}")]
    NonFinite { iter: u64, detail: String },

    #[error("output directory is locked by another run: {0}")]
    Locked(PathBuf),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("image {path}: {detail}")]
    Image { path: PathBuf, detail: String },
}

pub type Result<T> = std::result::Result<T, DgError>;

impl DgError {
    pub fn shape(ctx: impl Into<String>, expected: impl Into<String>, got: impl Into<String>) -> Self {
        DgError::Shape { ctx: ctx.into(), expected: expected.into(), got: got.into() }
    }
}
