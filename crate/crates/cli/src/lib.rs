//! Experiment orchestration for bi-directional forgery-detection
//! adaptation: config files, single runs with three evaluation snapshots,
//! and ablation grids.

pub mod ablation;
pub mod config;
pub mod experiment;

pub use ablation::{run_ablation, AblationGrid, AblationTable, Variant};
pub use config::{parse_config, parse_config_str, ConfigError, DomainSource, ExperimentSpec, Preset, ScenarioSpec};
pub use experiment::{build_scenario, run_experiment, RunError, RunOutcome};
