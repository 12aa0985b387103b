//! Run orchestration: configuration files, checkpoints, training and the
//! command-line verbs built on them.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod task;
pub mod trainer;

pub use checkpoint::{run_digest, Checkpoint};
pub use config::{RunConfig, TaskSource};
pub use task::PreparedTask;
pub use trainer::{hot_start, list_checkpoints, train, MetricsLine, Run, TrainOutcome, ValidationLine};
