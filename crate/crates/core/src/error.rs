use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image {}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("cannot load parameter `{name}`: {reason}")]
    Load { name: String, reason: String },

    #[error("unsupported checkpoint version `{found}` (this build reads version {expected})")]
    Version { found: String, expected: u32 },

    #[error("cannot parse {context}: {reason}")]
    Parse { context: String, reason: String },

    #[error("invalid data: {0}")]
    Validation(String),

    #[error("unmatched files: {}", .0.join(", "))]
    Unmatched(Vec<String>),

    #[error("non-finite loss {loss} at step {step} (lr {lr:e})")]
    NonFinite { step: usize, lr: f64, loss: f64 },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config { field: field.into(), reason: reason.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn image(path: impl Into<PathBuf>, source: image::ImageError) -> Self {
        Error::Image { path: path.into(), source }
    }
}
