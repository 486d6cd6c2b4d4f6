//! Losses, optimizers, schedules, toy datasets and the training loop.

mod config;
mod data;
mod loss;
mod metrics;
mod optim;
mod schedule;
mod seeds;
mod trainer;

pub use config::{OptimizerKind, Schedule, TrainConfig};
pub use data::{DataConfig, DatasetKind, Split, ToyDataset};
pub use loss::{cross_entropy, total_loss, total_loss_on_tape, LossVars};
pub use metrics::{
    parse_metrics, read_metrics, EvalRecord, JsonlWriter, MetricsRecord, MetricsSink, NullSink, StepRecord,
};
pub use optim::{Optimizer, OptimizerSettings, OptimizerState};
pub use schedule::{lr_at, lr_schedule};
pub use seeds::mix;
pub use trainer::{evaluate, EvalReport, StepOutput, TrainState, Trainer};
