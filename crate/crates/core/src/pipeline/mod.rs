//! Optimizers, run configuration, the multi-step driver and the metric log.

pub mod config;
pub mod log;
pub mod optim;
mod run;

pub use config::{DataConfig, Mode, RunConfig, SelectionSettings, TrainSettings, CONFIG_VERSION};
pub use log::{content_hash, read_log, MetricLog, MetricRecord, Phase, ScoreInputs};
pub use optim::{lr_schedule, trust_ratio, OptimConfig, Optimizer, OptimizerKind};
pub use run::{evaluate, resume_pipeline, run_pipeline, schedule_for, EvalReport, RunPaths, RunSummary, StepSummary};
