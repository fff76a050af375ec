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

    #[error("malformed manifest line {line}: {message}")]
    Manifest { line: usize, message: String },

    #[error("blob file for image {id} is short: needed bytes up to {needed}, blob has {available}")]
    MissingBlob { id: u32, needed: u64, available: u64 },

    #[error("image {id}: shape mismatch, expected {expected} values, found {found}")]
    ShapeMismatch { id: u32, expected: usize, found: usize },

    #[error("duplicate image id {0}")]
    DuplicateId(u32),

    #[error("unknown image id {0}")]
    UnknownId(u32),

    #[error("image {id}: non-finite or out-of-range tensor value at index {index}")]
    BadTensorValue { id: u32, index: usize },

    #[error("relevance entry ({i},{j}): {message}")]
    Relevance { i: u32, j: u32, message: String },

    #[error("image {0} carries no latent vector")]
    MissingLatent(u32),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("network: {0}")]
    Network(String),

    #[error("non-finite value in layer {layer} of path {path}")]
    NonFinite { path: usize, layer: usize },

    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),

    #[error("sampler: {0}")]
    Sampler(String),

    #[error("training diverged at step {step}: loss = {loss} ({cause})")]
    Diverged { step: u64, loss: f64, cause: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
