//! Experiment grids over training schemes, noise levels, training subsets
//! and repeats: execution with resumable per-run records, a shared
//! denoiser cache, and tabular and plotted reports.

pub mod config;
pub mod error;
pub mod grid;
pub mod report;
pub mod runner;
pub mod synth;

pub use error::{Error, Result};
pub use grid::{derive_seed, ExperimentGrid, RunKey, RunSettings, SchedulePreset};
pub use report::{aggregate_records, report, table_csv, AggregateRow, ReportFiles};
pub use runner::{
    load_records, run_cell, run_grid, test_metrics, train_denoiser, DenoiserCache, DenoiserKey, GridSummary,
    RunFailure, RunRecord,
};
pub use synth::write_synthetic_dataset;
