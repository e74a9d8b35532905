//! Experiment orchestration for the hybrid PCM training simulator: config
//! files, dataset sources, the studies, metrics export and the event log.

pub mod config;
pub mod dataset;
pub mod endurance;
pub mod error;
pub mod events;
pub mod metrics;
pub mod runs;

pub use config::{BackendKind, ExperimentConfig};
pub use dataset::{load_dataset, DatasetKind, DatasetSource, Normalization, Splits};
pub use endurance::{endurance_report, EnduranceReport};
pub use error::HarnessError;
pub use metrics::RunSummary;
pub use runs::{
    ablation_combinations, execute_run, run_ablation, run_drift_sweep, run_endurance, run_size_sweep, run_training, RunSpec,
};
