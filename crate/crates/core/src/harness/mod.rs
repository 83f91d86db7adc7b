//! Experiment driver: configuration, paired ablation and shot sweeps,
//! aggregation, artifacts, replay and the command-line front end.

pub mod cli;
pub mod config;
pub mod run;
pub mod stats;

pub use config::RunConfig;
pub use run::{
    prepare, replay, run_ablation_suite, run_rows, run_shot_sweep, AblationReport, EpisodeRecord, Prepared,
    RowOutput, RunRecord, ShotCell,
};
pub use stats::{aggregate, paired, Aggregate};
