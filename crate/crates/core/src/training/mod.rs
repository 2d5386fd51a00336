//! Adam, the epoch loop with its loss schedule, and checkpoint files.

mod adam;
mod checkpoint;
mod fit;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use fit::{default_batch, fit, EpochSummary, StepLog, Trainer, TrainConfig, LOG_HEADER};
