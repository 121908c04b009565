//! Experiment front-end: configuration, datasets, the scenario runner,
//! artifact files and cross-run comparison.

mod compare;
mod config;
mod data;
mod run;
mod selftest;

pub use compare::{
    compare_runs, Comparison, ComparisonRow, DefenseRow, DefenseTable, ReferenceTables, VulnerabilityRow,
    VulnerabilityTable,
};
pub use config::{apply_env_overrides, DatasetConfig, ExperimentConfig, ENV_PREFIX};
pub use data::{corpus, vocabulary, Dataset, Task};
pub use run::{
    losses_from_csv, metrics_csv, run_experiment, tail_mean, tail_window, write_artifacts, RunOutcome, RunSummary,
    TaskSpec, ALERTS_FILE, ATTACKS_FILE, CONFIG_FILE, METRICS_FILE, SUMMARY_FILE, TRACE_FILE,
};
pub use selftest::{selftest, CheckResult};
