use std::io;
use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::checkpoint::CheckpointError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("stage {stage} out of range 1..={max}")]
    StageOutOfRange { stage: usize, max: usize },
    #[error("{op}: expected shape {expected:?}, got {actual:?}")]
    Shape {
        op: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("empty tracklet")]
    EmptyTracklet,
    #[error("{op} needs at least {min} frames, got {frames}")]
    TooFewFrames {
        op: &'static str,
        frames: usize,
        min: usize,
    },
    #[error("unknown variant `{0}`")]
    UnknownVariant(String),
    #[error("empty test set")]
    EmptyTestSet,
    #[error("no query has a valid cross-camera match")]
    NoValidQueries,
    #[error("empty dataset")]
    EmptyDataset,
    #[error("loss needs at least 2 embeddings, got {0}")]
    BatchTooSmall(usize),
    #[error("triplet loss needs at least two identities in a batch")]
    SingleIdentityBatch,
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("{path}:{line}: {msg}")]
    Manifest { path: PathBuf, line: usize, msg: String },
    #[error("{path}: {msg}")]
    Image { path: PathBuf, msg: String },
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
