//! Configuration, optimization loop, checkpoints, evaluation, ablation and
//! depth export.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod export;
pub mod schedule;
pub mod trainer;

pub use ablate::{ablate, AblationReport, AblationRow};
pub use config::{OptimConfig, RunConfig, ScheduleConfig};
pub use eval::{evaluate, evaluate_checkpoint};
pub use schedule::lr_at;
pub use trainer::{load_split, Prepared, StepLog, TrainSummary, Trainer};
