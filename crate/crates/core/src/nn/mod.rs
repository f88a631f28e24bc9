//! Convolutional classifiers, training and checkpoints.

mod arch;
mod checkpoint;
mod model;
mod train;

pub use arch::{ArchDescriptor, ArchName, LayerSpec};
pub use checkpoint::{Checkpoint, TrainingMeta, FORMAT_VERSION};
pub use model::{argmax, evaluate, predict, predict_dataset, Accuracy, Model, Probs};
pub use train::{train, TrainConfig};

use crate::autodiff::AutodiffError;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("parameters do not match the architecture: {0}")]
    ParamMismatch(String),
    #[error("expected images of {expected} values, got {found}")]
    InputShape { expected: usize, found: usize },
    #[error("cannot train on an empty dataset")]
    EmptyDataset,
    #[error("example {index} has label {label} outside the model's classes")]
    LabelOutOfRange { index: usize, label: u8 },
    #[error("loss became non-finite in epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("checkpoint checksum mismatch")]
    ChecksumMismatch,
    #[error("corrupt checkpoint header: {0}")]
    CorruptHeader(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}
