//! Cost model, operator fusion, refinement planning and view selection.

mod calibrate;
mod cost;
mod estimate;
mod fusion;
mod refine;
mod stats;
mod view;

use serde::{Deserialize, Serialize};

pub use calibrate::{calibrate, check_gain_table, CalibrationError, CalibrationGrid, GainRow, GainTable, SELECTIVITIES};
pub use cost::{CostModel, CostModelError};
pub use estimate::estimate_cost;
pub use fusion::{apply_fusion, enumerate_plans, Plan, FILTER_MAP_FUSE, GEN_GEN_FUSE, MAP_FILTER_FUSE, REF_CHAIN_FUSE};
pub use refine::{plan_refinements, Budget, RefinementCost, RefinementPlan};
pub use stats::{OpStats, PlanStats, PlanStatsError, SiteStats};
pub use view::{select_view, ViewSelectError};

/// A rewrite the planner applied, with its estimated latency saving in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppliedRewrite {
    pub rule: String,
    pub site: String,
    pub gain_s: f64,
}
