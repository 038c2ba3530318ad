use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty group")]
    EmptyGroup,

    #[error("group has {size} members, maximum is {max}")]
    GroupTooLarge { size: usize, max: usize },

    #[error("member {member_id}: {reason}")]
    InvalidMember { member_id: u32, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("affinity overflow: {0}")]
    AffinityOverflow(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("empty weight matrix")]
    EmptyMatrix,

    #[error("empty gallery")]
    EmptyGallery,

    #[error("query {query} has no relevant gallery entry")]
    EmptyTruth { query: usize },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid synthetic dataset spec: {0}")]
    InvalidSynthSpec(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("{path}:{line}: {message}")]
    Manifest {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("embedding file {path}: {message}")]
    Embedding { path: PathBuf, message: String },

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
