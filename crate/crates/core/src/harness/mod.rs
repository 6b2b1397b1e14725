//! Experiment harness: data loading, clipping, repeated train/test
//! benchmarks and report files.

pub mod bench;
pub mod config;
pub mod data;
pub mod report;

pub use bench::{run_bench, run_experiment, ExperimentResult, RunSpec};
pub use config::ExperimentConfig;
pub use data::{clip_and_center, ingest_csv, rmse, CsvSchema, Dataset, Synthetic};
