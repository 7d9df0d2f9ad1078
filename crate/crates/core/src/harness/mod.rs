//! Training and evaluation engine.
//!
//! - [`optim`]: AdamW / SGD with separate model and gating learning rates.
//! - [`tasks`]: seeded synthetic tasks and the batch schedule.
//! - [`split`]: client and server step logic shared by local and TCP runs.
//! - [`train`]: the local loop, evaluation and the bit-trajectory check.
//! - [`oracles`]: the gradient check suite.
//! - [`metrics`]: per-step records and their CSV/JSONL files.

pub mod metrics;
pub mod optim;
pub mod oracles;
pub mod split;
pub mod tasks;
pub mod train;

pub use metrics::{export, ExportFormat, MetricRow, MetricsSink, RunMetrics, SiteMetric, CSV_HEADER};
pub use optim::{DecaySchedule, OptimConfig, Optimizer, OptimizerKind};
pub use split::{apply_sync, BitControl, ClientEndpoint, EvalAccum, EvalReport, ServerEndpoint, ServerReport};
pub use tasks::{make_task, Batch, Example, Metric, Schedule, Task, TaskName, TaskSpec};
pub use train::{
    bit_trajectory_guard, evaluate_local, local_step, train_local, train_local_until, GuardViolation, RunResult,
};
