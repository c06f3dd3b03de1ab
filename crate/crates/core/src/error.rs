use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the registration library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error in {field}: {detail}")]
    Format { field: String, detail: String },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("underdetermined: {got} correspondences, at least 4 required")]
    Underdetermined { got: usize },

    #[error("degenerate point configuration: {0}")]
    Degenerate(String),

    #[error("no consensus: no model reached {min} inliers")]
    NoConsensus { min: usize },

    #[error("point maps to infinity (homogeneous depth {depth:e})")]
    PointAtInfinity { depth: f64 },

    #[error("empty match: {0}")]
    EmptyMatch(String),
}

impl Error {
    pub(crate) fn format(field: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format {
            field: field.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
