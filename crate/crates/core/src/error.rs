use thiserror::Error;

use crate::tasks::TaskKind;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(
        "exemplar shortage for task {task}, category {category}: need {needed}, found {found}"
    )]
    Shortage {
        task: TaskKind,
        category: usize,
        needed: usize,
        found: usize,
    },

    #[error("cannot L2-normalize a zero embedding (category {category}, exemplar {exemplar})")]
    ZeroEmbedding { category: usize, exemplar: usize },

    #[error("reference loss for task {0} is zero; run a warmup step before GradNorm updates")]
    ZeroReferenceLoss(TaskKind),

    #[error("missing gradient for active task {0}")]
    MissingGradient(TaskKind),

    #[error("missing teacher for task {0}, which has unlabeled samples")]
    MissingTeacher(TaskKind),

    #[error("unknown sample id `{0}`")]
    UnknownSample(String),

    #[error("config hash mismatch: checkpoint {checkpoint}, config {config}")]
    HashMismatch { checkpoint: String, config: String },

    #[error("non-finite loss at step {step} (batch ids: {batch:?})")]
    NonFiniteLoss { step: usize, batch: Vec<String> },

    #[error("{0}")]
    Invalid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Candle(#[from] candle_core::Error),

    #[error(transparent)]
    Safetensors(#[from] safetensors::SafeTensorError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
