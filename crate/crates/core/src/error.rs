use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),

    #[error("{}: {message}", path.display())]
    Parse { path: PathBuf, message: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("empty mask: {0}")]
    EmptyMask(&'static str),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid annotation: {0}")]
    InvalidAnnotation(String),

    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("could not place object {object} of scene {scene} after {attempts} attempts")]
    Placement {
        scene: u64,
        object: usize,
        attempts: usize,
    },

    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: u64 },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
