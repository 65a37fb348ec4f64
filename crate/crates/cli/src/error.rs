use std::path::PathBuf;

use cxr_core::ErrorClass;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: cxr_core::Error,
    },

    #[error("missing inputs: {}", .0.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "))]
    MissingInputs(Vec<PathBuf>),

    #[error("plot rendering failed for {path}: {message}")]
    Plot { path: PathBuf, message: String },
}

impl CliError {
    pub fn stage(stage: &'static str) -> impl FnOnce(cxr_core::Error) -> CliError {
        move |source| CliError::Stage { stage, source }
    }

    /// 1 validation, 2 i/o, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Stage { source, .. } => match source.class() {
                ErrorClass::Validation => 1,
                ErrorClass::Io => 2,
                ErrorClass::Numerical => 3,
            },
            CliError::MissingInputs(_) | CliError::Plot { .. } => 2,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
