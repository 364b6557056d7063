use std::io;

use thiserror::Error;

use crate::train::Diagnostics;

pub type Result<T, E = DmmError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum DmmError {
    #[error("dimension error in {context}: {detail}")]
    Dimension { context: &'static str, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("degenerate code: column {0} has zero norm")]
    DegenerateCode(usize),

    #[error("generation error: {0}")]
    Generation(String),

    #[error("format error at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error("unsupported {what} version {found} (expected {expected})")]
    UnsupportedVersion {
        what: &'static str,
        found: u16,
        expected: u16,
    },

    #[error("non-finite loss at epoch {}, step {}\n{}", .0.epoch, .0.step, .0)]
    NonFinite(Box<Diagnostics>),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

impl DmmError {
    pub(crate) fn dim(context: &'static str, detail: impl Into<String>) -> Self {
        DmmError::Dimension {
            context,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: io::Error) -> Self {
        DmmError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
