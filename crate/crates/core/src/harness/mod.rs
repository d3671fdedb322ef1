//! Experiment grid, report aggregation, brute-force oracle and the CLI.

pub mod cli;
pub mod config;
pub mod experiment;
pub mod oracle;
pub mod report;

pub use config::{BaselineParams, ExperimentConfig, TaskConfig, METHODS};
pub use experiment::{run_baseline, run_experiment, BaselineOutcome, ExperimentSummary, MetricsRecord};
pub use oracle::{brute_force_oracle, OracleResult};
pub use report::{read_results, summarize, GroupSummary};
