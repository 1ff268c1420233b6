use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("tape error: {0}")]
    Tape(String),

    #[error("missing parameter `{0}`")]
    MissingParam(String),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("unknown layer `{name}`; valid layers: {valid}")]
    UnknownLayer { name: String, valid: String },

    #[error("weight file: {0}")]
    Format(String),

    #[error("class weights undefined: no countable pixels (every pixel is a weak edge)")]
    NoCountablePixels,

    #[error("empty dataset")]
    EmptyDataset,

    #[error("training diverged: non-finite loss for sample `{sample}` in epoch {epoch}")]
    Diverged { epoch: usize, sample: String },

    #[error("image {path}: {msg}")]
    Image { path: PathBuf, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
