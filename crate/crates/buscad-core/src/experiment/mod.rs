//! Experiment configuration, orchestration, and reporting: dataset
//! generation, two-stage training over patient-disjoint folds, ablation
//! variants, annotation-fraction sweeps, and overlay visualization back
//! the command-line surface.

mod config;
mod runner;

pub use config::{
    canonical_text, config_hash, parse_config_text, ExperimentConfig, Profile, StageParams,
    Variant,
};
pub use runner::{
    cmd_ablate, cmd_eval, cmd_sweep_p, cmd_train, cmd_visualize, evaluate_stage1, RunError,
    RunOutcome,
};
