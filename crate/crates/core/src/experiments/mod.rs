//! Desk-scale scenario harness: synthetic data, IDX ingestion, confusion sets,
//! scenario runs with aggregate statistics, and the regularizer A/B comparison.

pub mod data;
pub mod idx;
pub mod scenario;
pub mod stats;

pub use data::{generate_synthetic, make_confusion_set, Generator, SyntheticSpec, SyntheticTask};
pub use idx::load_idx;
pub use scenario::{
    regularizer_ab_test, run_scenario, LevelAggregate, RunRow, ScenarioConfig, ScenarioKind,
    ScenarioResult,
};
