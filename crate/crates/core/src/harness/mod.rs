//! Experiment orchestration: configuration, the round loop for every
//! scheme, metrics persistence, and run comparison.

mod config;
mod gradcheck;
mod report;
mod run;

pub use config::{DatasetSpec, ExperimentConfig, SelectionPool};
pub use gradcheck::gradcheck_suite;
pub use report::{report, RunSummary};
pub use run::{
    rounds_to_target, rounds_to_target_series, run_experiment, Experiment, RoundMetrics, RunResult,
};
