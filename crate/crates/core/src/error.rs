use std::path::PathBuf;

use thiserror::Error;

use crate::loss::LossBreakdown;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("watermark placement out of bounds: {0}")]
    Placement(String),

    #[error("watermark coverage {coverage:.4} exceeds limit {limit:.4}")]
    Coverage { coverage: f64, limit: f64 },

    #[error("generation failed: {0}")]
    Generation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("training diverged at step {step}: non-finite loss {breakdown:?}")]
    Divergence { step: u64, breakdown: LossBreakdown },

    #[error("could not read {} input file(s): {}", .0.len(), display_paths(.0))]
    UnreadableInputs(Vec<(PathBuf, String)>),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: image codec error: {message}")]
    Image { path: PathBuf, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn display_paths(items: &[(PathBuf, String)]) -> String {
    items
        .iter()
        .map(|(p, why)| format!("{} ({why})", p.display()))
        .collect::<Vec<_>>()
        .join(", ")
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
