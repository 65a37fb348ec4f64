use std::path::PathBuf;

use thiserror::Error;

/// Broad failure class, used by front ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Validation,
    Io,
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image decode error on {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("ingestion error: missing annotation file {0}")]
    MissingAnnotation(PathBuf),

    #[error("ingestion error: {file}:{line}: {message}")]
    Annotation {
        file: PathBuf,
        line: usize,
        message: String,
    },

    #[error("capacity error: {0}")]
    Capacity(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unknown layer `{layer}` for {family}; valid layers: {}", valid.join(", "))]
    LayerName {
        family: String,
        layer: String,
        valid: Vec<String>,
    },

    #[error("numerical failure at epoch {epoch}: {message}")]
    Numerical { epoch: usize, message: String },

    #[error("undefined metric `{0}`: zero denominator")]
    UndefinedMetric(&'static str),

    #[error("infeasible operating point: target {target} unreachable, best achievable {best}")]
    Infeasible { target: f64, best: f64 },

    #[error("coverage error: model `{model}` has no prediction for image `{image}`")]
    Coverage { model: String, image: String },

    #[error("scorer failed on patch at ({x}, {y}): {message}")]
    Scorer { x: usize, y: usize, message: String },

    #[error("degenerate segmentation: mask `{0}` is empty")]
    Degenerate(&'static str),

    #[error("segmentation error: {0}")]
    Segmentation(String),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Io { .. } | Error::Image { .. } | Error::MissingAnnotation(_) => ErrorClass::Io,
            Error::Numerical { .. } => ErrorClass::Numerical,
            _ => ErrorClass::Validation,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
