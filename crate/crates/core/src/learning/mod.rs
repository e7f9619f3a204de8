//! Local objectives, data partitioning and the decentralized training loop.

pub mod data;
pub mod partition;
pub mod task;
pub mod train;

use thiserror::Error;

use crate::averaging::AveragingError;
use crate::topology::TopologyError;

pub use data::{gaussian_blobs, BlobSpec, Dataset};
pub use partition::{partition_shards, Partition};
pub use task::{LossTask, QuadraticInfo, TaskKind, TaskSpec};
pub use train::{train, Algorithm, IterationRecord, RoundView, TrainConfig, TrainingTrace};

#[derive(Debug, Error)]
pub enum LearningError {
    #[error("cannot cut {samples} samples into {slices} slices")]
    TooManyShards { slices: usize, samples: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid task: {0}")]
    InvalidSpec(String),
    #[error("model of node {node} became non-finite at iteration {iteration}")]
    Divergence { iteration: usize, node: usize },
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Averaging(#[from] AveragingError),
}
