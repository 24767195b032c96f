//! Objectives, batched forward passes, training loops and checkpoints.

pub mod batch;
pub mod checkpoint;
pub mod fidelity;
pub mod loops;
pub mod losses;

pub use checkpoint::{Checkpoint, CheckpointHeader};
pub use loops::{batch_indices, finetune, pretrain, MetricsRow, StepRecord, TrainLog, TrainState};
pub use losses::{combine_losses, combine_values, contrastive, qa_loss, trm_loss, AnswerIndex};
