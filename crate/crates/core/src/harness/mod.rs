//! Experiment configuration, orchestration and result files.

pub mod config;
pub mod pipeline;
pub mod record;

pub use config::{parse_config, parse_config_or, ExperimentConfig, ExperimentKind, Method};
pub use pipeline::{expand_grid, sweep, SweepTable, TrainRun};
pub use record::{early_stop_select, RunRecord, RunSummary};
