//! Experiment harness for the `duoformer` library: JSON experiment specs,
//! synthetic and manifest-backed datasets, ablation grids with repeated
//! seeded runs, and a results table written as CSV.

pub mod cli;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod export;
pub mod spec;

pub use error::{HarnessError, Result};
pub use experiment::{run_experiment, run_spec, ExperimentResults, ResultRow, RowKind, RunOptions};
pub use spec::{validate_config, DatasetSource, ExperimentSpec, GridSpec, Sweep};
