//! Configuration, multi-seed runs, learning-rate search, component
//! ablations, and the tables and plots written next to the results.

mod config;
mod report;
mod run;

pub use config::{validate_config, ExperimentConfig, NormalizedConfig, DEFAULT_LAMBDA_GEN};
pub use report::{emit_plots, emit_tables, load_result};
pub use run::{
    ablate, ablate_with_backbone, grid_search_lr, prepare_backbone, prepare_data, run_experiment, run_seed,
    run_with_backbone, select_best, AblationRow, Aggregate, GridResult, GridRow, InvariantReport, MeanStd,
    PreparedData, RunResult, SeedResult,
};
