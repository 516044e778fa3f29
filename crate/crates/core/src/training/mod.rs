//! Masked multi-task objective, source-balanced batching, Adam and the training loop.

mod adam;
mod loss;
mod mask;
mod sampler;
mod trainer;

pub use adam::{adam_step, AdamConfig, AdamState, LrSchedule};
pub use loss::{masked_loss, traced_loss, Batch, LossBreakdown, TaskLoss};
pub use mask::{LabelRule, LossConfig, MaskPolicy};
pub use sampler::{pooled_batches, BalancedSampler};
pub use trainer::{train, train_from, write_log, EpochLog, SourceMode, TrainConfig, TrainOutcome};

use crate::dataio::DataError;
use crate::evaluation::EvalError;
use crate::model::{ModelError, ModelParams, Source, Task};
use crate::numerics::NumericsError;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("batch size must be at least 2, got {0}")]
    BatchSize(usize),
    #[error("the {0} pool is empty; use single-source training instead")]
    EmptyPool(Source),
    #[error("no (row, task) pair contributes to the loss; check the mask and label rules")]
    EmptyLoss,
    #[error("no logits for task {0}")]
    MissingTask(Task),
    #[error("non-finite gradient {value} in block {block} at index {index}")]
    NonFiniteGradient {
        block: String,
        index: usize,
        value: f64,
    },
    #[error("training diverged at epoch {epoch}, batch {batch}: {reason}")]
    Diverged {
        epoch: usize,
        batch: usize,
        reason: String,
        last_good: Box<ModelParams>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}
