//! Message framing, checkpoint files, and the actor, labeler, and learner
//! processes.

use thiserror::Error;

pub mod actor;
pub mod checkpoint;
pub mod codec;
pub mod labeler;
pub mod learner;
pub mod link;
pub mod wire;

pub const LEARNER_ID: u64 = 1;
pub const LABELER_ID: u64 = 2;

pub fn actor_id(index: u64) -> u64 {
    100 + index
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Train(#[from] crate::trainer::TrainError),
    #[error(transparent)]
    Checkpoint(#[from] checkpoint::CheckpointError),
    #[error(transparent)]
    Decode(#[from] codec::DecodeError),
    #[error("{0}")]
    Setup(String),
}
