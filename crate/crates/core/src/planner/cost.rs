use serde::{Deserialize, Serialize};

/// Linear latency model for one backend call:
/// `base + uncached * u + cached * k + completion * m`, in seconds.
///
/// Invariants: every coefficient is finite and nonnegative, and a cached prompt
/// token never costs more than an uncached one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostModel {
    pub base_latency_s: f64,
    pub uncached_prompt_token_cost_s: f64,
    pub cached_prompt_token_cost_s: f64,
    pub completion_token_cost_s: f64,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CostModelError {
    #[error("cost coefficient '{0}' must be finite and nonnegative")]
    BadCoefficient(&'static str),
    #[error("cached prompt tokens must not cost more than uncached ones")]
    CachedAboveUncached,
}

impl Default for CostModel {
    /// Output of `calibrate` on the bundled fusion table, frozen.
    fn default() -> Self {
        CostModel {
            base_latency_s: 0.11,
            uncached_prompt_token_cost_s: 0.0085,
            cached_prompt_token_cost_s: 0.000425,
            completion_token_cost_s: 0.02,
        }
    }
}

impl CostModel {
    pub fn call_cost(&self, uncached: f64, cached: f64, completion: f64) -> f64 {
        self.base_latency_s
            + uncached * self.uncached_prompt_token_cost_s
            + cached * self.cached_prompt_token_cost_s
            + completion * self.completion_token_cost_s
    }

    pub fn validate(&self) -> Result<(), CostModelError> {
        for (name, v) in [
            ("base_latency_s", self.base_latency_s),
            ("uncached_prompt_token_cost_s", self.uncached_prompt_token_cost_s),
            ("cached_prompt_token_cost_s", self.cached_prompt_token_cost_s),
            ("completion_token_cost_s", self.completion_token_cost_s),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(CostModelError::BadCoefficient(name));
            }
        }
        if self.cached_prompt_token_cost_s > self.uncached_prompt_token_cost_s {
            return Err(CostModelError::CachedAboveUncached);
        }
        Ok(())
    }
}
