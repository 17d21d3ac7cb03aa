//! Experiment runners: single configured runs and the multi-seed suites.

pub mod calibrate;
pub mod config;
pub mod run;
pub mod suite;

pub use config::{DatasetConfig, ModelConfig, OptimConfig, TrainConfig};
pub use run::{load_dataset, load_params, run_experiment, run_on, run_on_observed, save_params, write_outputs, MetricsRecord, RunOutput, RunSummary};
