//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by any stage of the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Shape or size mismatch between tensors, images or masks.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Invalid configuration value or an unsatisfiable parameter combination.
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed input file; `offset` is the byte position of the problem.
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    /// Corrupt or inconsistent model file.
    #[error("model file error: {0}")]
    Model(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    /// Wraps an error with the pipeline stage it occurred in, so CLI
    /// failures always name the stage that broke.
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Attach a pipeline stage name to an error.
    pub fn in_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
