//! Two-stage training, separation training, and checkpoints.

mod checkpoint;
mod config;
mod trainer;

pub use checkpoint::{AdamState, Checkpoint, CheckpointMeta, TensorKind, CHECKPOINT_MAGIC};
pub use config::{Stage, TrainConfig};
pub use trainer::{
    branch_outputs, log_csv, train_separation, train_stage1, train_stage2, Clips, StepRecord, TrainOutcome,
    BRANCH_PREFIXES, LOG_HEADER, MERGE_PREFIX,
};
