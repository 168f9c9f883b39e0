use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("no examples in {0}")]
    NoExamples(PathBuf),

    #[error("row {uid}: label {label:?} is not in the label set of task {task}")]
    UnknownLabel {
        uid: String,
        label: String,
        task: String,
    },

    #[error("malformed row {line} in {path}: {reason}")]
    MalformedRow {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("invalid example {uid}: {reason}")]
    InvalidExample { uid: String, reason: String },

    #[error("class {class:?} of task {task} has {available} examples, {needed} needed")]
    InsufficientSupport {
        task: String,
        class: String,
        available: usize,
        needed: usize,
    },

    #[error("dataset for task {0} is empty")]
    EmptyDataset(String),

    #[error("vocabulary too small: {needed} tokens needed, {available} available")]
    VocabularyTooSmall { needed: usize, available: usize },

    #[error("invalid template: {0}")]
    InvalidTemplate(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("token id {id} out of range for vocabulary of {vocab_size}")]
    TokenOutOfRange { id: usize, vocab_size: usize },

    #[error("sequence of length {len} exceeds maximum {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("invalid verbalizer: {0}")]
    Verbalizer(String),

    #[error("class cell ({task}, {label}) has no instances")]
    EmptyClassCell { task: String, label: String },

    #[error("label {label:?} of task {task} is missing from task {other}")]
    LabelMissing {
        task: String,
        label: String,
        other: String,
    },

    #[error("empty prediction list")]
    EmptyPredictions,

    #[error("group {0} has no member tasks")]
    EmptyGroup(String),

    #[error("label spaces differ between tasks {0} and {1} in similar mode")]
    LabelSpaceMismatch(String, String),

    #[error("unknown task {0}")]
    UnknownTask(String),

    #[error("unknown group {0}")]
    UnknownGroup(String),

    #[error("task {task} is not unseen: training uid {uid} appeared during meta-training")]
    NotUnseen { task: String, uid: String },

    #[error("no training data")]
    NoTrainingData,

    #[error("non-finite loss {loss} at epoch {epoch}; batch uids {uids:?}; parameter norm {param_norm}")]
    NonFiniteLoss {
        loss: f64,
        epoch: usize,
        uids: Vec<String>,
        param_norm: f64,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),
}
