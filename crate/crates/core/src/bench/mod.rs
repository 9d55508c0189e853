//! Benchmark suites: fusion gain by selectivity, and refinement strategies.

mod fusion;
mod refinement;

pub use fusion::{
    calibrate_default, fusion_pipelines, fusion_profiles, fusion_suite, gain_table, run_fusion_plan, FusionBenchConfig,
    FusionOrder, FusionProfile, FusionRow, FusionSuite, FILTER_LABEL, MAP_LABEL,
};
pub use refinement::{refinement_suite, RefinementBenchConfig, RefinementRow, RefinementSuite, Strategy};

use crate::algebra::AlgebraError;
use crate::planner::PlanStatsError;

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error(transparent)]
    Algebra(#[from] AlgebraError),
    #[error(transparent)]
    Stats(#[from] PlanStatsError),
    #[error(transparent)]
    Store(#[from] crate::store::StoreError),
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
    #[error("run '{0}' failed: {1}")]
    RunFailed(String, String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Backend(#[from] crate::backend::BackendError),
}
