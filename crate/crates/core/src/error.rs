//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, SageError>;

#[derive(Debug, Error)]
pub enum SageError {
    #[error("label column '{0}' not found")]
    LabelColumnMissing(String),

    #[error("unparseable numeric cell at row {row}, column '{column}': '{value}'")]
    BadNumericCell {
        row: usize,
        column: String,
        value: String,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimMismatch {
        expected: usize,
        got: usize,
        context: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("class {class} has {count} samples, need at least 2 for a stratified split")]
    ClassTooSmall { class: usize, count: usize },

    #[error("training diverged (loss became non-finite) at epoch {epoch}")]
    Diverged { epoch: usize },

    #[error("working set of size {got} is smaller than cluster count {want}")]
    WorkingSetTooSmall { got: usize, want: usize },

    #[error("stage '{stage}' requires artifacts from stage '{needs}'; run it first")]
    MissingStage { stage: String, needs: String },

    #[error("stale artifact for stage '{stage}': {detail}")]
    StaleArtifact { stage: String, detail: String },

    #[error("malformed model file: {0}")]
    ModelFormat(String),
}
