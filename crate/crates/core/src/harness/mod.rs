//! Experiment configuration, the `run`/`theory`/`gradcheck` commands and
//! report files.

mod commands;
mod config;
mod report;

pub use commands::{
    exit_code, gradcheck, run, run_experiment, theory, thread_pool, RunOutput, TheoryArgs, TheoryOutput,
    TrajectorySummary, THREADS_ENV,
};
pub use config::{apply_overrides, DatasetSpec, ExperimentConfig, ModelSpec, NoiseSpec, PartitionSpec};
pub use report::{emit_reports, final_accuracy, write_json, write_metrics, Summary, METRICS_HEADER};
