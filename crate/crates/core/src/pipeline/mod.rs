//! Training, inference and evaluation drivers behind the CLI.

pub mod commands;
pub mod overlay;
pub mod predict;
pub mod train;

pub use predict::{predict_raw, TrainedModel};
pub use train::{evaluate_samples, run_split, stage_lr, stage_of, stage_tags, train, EpochLog, StepLog, TrainLock, TrainLog, TrainOutcome};
