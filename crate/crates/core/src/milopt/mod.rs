//! Contrastive fine-tuning of embedding-space adapters.

mod adapter;
mod loss;
mod train;

pub use adapter::{
    apply_adapter, loss_and_grad, AdapterModel, AdapterSpec, Head, HeadMode, Lock, ModelGrad, Side,
};
pub use loss::{
    choose_members, choose_one, evaluate, loss_clip, loss_mil_max, loss_mil_nce, loss_mil_softmax,
    select_max_member, Batch, LossConfig, LossGrad, LossKind, SIGMA_MAX, SIGMA_MIN,
};
pub use train::{concatenated_id, train, training_units, EpochLog, TrainConfig, TrainUnit};

use thiserror::Error;

use crate::embedstore::StoreError;

#[derive(Debug, Error, PartialEq)]
pub enum OptError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("batch is empty")]
    EmptyBatch,
    #[error("bag {0} is empty")]
    EmptyBag(usize),
    #[error("bag {index} has {size} members, expected exactly one")]
    BagSize { index: usize, size: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("missing embedding for {0}")]
    MissingEmbedding(String),
    #[error("training split has no bagged images")]
    EmptySplit,
    #[error("bad adapter checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}
