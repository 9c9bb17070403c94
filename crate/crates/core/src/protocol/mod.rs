//! Class-incremental task streams, learning-rate schedules, run
//! configuration and the stage-by-stage training loop.

mod config;
mod schedule;
mod stream;
mod train;

pub use config::{DatasetConfig, LossSection, ModelConfig, RunConfig, SplitConfig};
pub use schedule::{lr_at, DecayMode, ScheduleConfig, TrainSchedule};
pub use stream::{split_stream, AccessLog, Task, TaskStream};
pub use train::{balanced_batches, build_model, run_incremental, train_epoch, train_step, GRAM_TOLERANCE};

/// Augmentation hook for non-tabular inputs; tabular rows pass through.
pub fn augment(x: crate::diffcore::Tensor) -> crate::diffcore::Tensor {
    x
}
