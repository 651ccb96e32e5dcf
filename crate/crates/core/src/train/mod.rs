//! Bag sampling, the combined multi-task step, AdamW and the epoch loop.

mod log;
mod optim;
mod sampler;
mod step;
mod trainer;

pub use log::{LogEntry, TrainingLog, LOG_HEADER};
pub use optim::{adamw_step, AdamWConfig, Moments, OptimizerState};
pub use sampler::{augment_bag, sample_bag, val_rng, AugmentConfig, Bag, SampleMode};
pub use step::{multitask_step, StepReport, TaskStep};
pub use trainer::{Best, TrainConfig, TrainData, TrainOutcome, Trainer};
