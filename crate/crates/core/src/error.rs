use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not fit together.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// A configuration value is out of its admissible range.
    #[error("configuration error in `{field}`: {reason}")]
    Config { field: String, reason: String },

    /// A row that must be normalized has (near) zero norm.
    #[error("degenerate embedding: row {row} has norm {norm:e}")]
    DegenerateEmbedding { row: usize, norm: f64 },

    #[error("empty batch in {op}: need at least {needed} rows, got {got}")]
    EmptyBatch {
        op: &'static str,
        needed: usize,
        got: usize,
    },

    /// An input broke a documented precondition (e.g. non-unit rows).
    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("training diverged at step {step}; last good checkpoint: {}", display_path(.last_checkpoint))]
    Divergence {
        step: u64,
        last_checkpoint: Option<PathBuf>,
    },

    #[error("feature queue is empty")]
    EmptyQueue,

    #[error("data error: {0}")]
    Data(String),

    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("corrupt dataset: {0}")]
    CorruptDataset(String),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn display_path(p: &Option<PathBuf>) -> String {
    match p {
        Some(p) => p.display().to_string(),
        None => "none".to_string(),
    }
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// True for errors caused by bad user input or configuration rather than
    /// a runtime failure. The CLI maps these to exit code 2.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Config { .. })
    }
}
