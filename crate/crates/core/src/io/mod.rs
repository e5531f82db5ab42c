//! Configuration files, checkpoints, metrics logs, results tables and run directories.

mod checkpoint;
mod config;
mod run;

pub use checkpoint::{
    checkpoint_load, checkpoint_load_for, checkpoint_save, Checkpoint, FORMAT_VERSION, MANIFEST, TENSORS,
};
pub use config::{
    cell_dir, load_experiment, load_sweep, load_toml, to_toml, EvalGrid, ExperimentConfig, SweepCell, SweepConfig,
};
pub use run::{
    evaluate, read_metrics, read_results, run_eval, run_experiment, run_sweep, write_results, MetricsWriter, ResultRow,
    RunDirectory, SweepOutcome, Validation, RESULTS_HEADER,
};
