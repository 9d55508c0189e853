use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::CostModel;
use crate::algebra::{RunReport, TraceRecord};
use crate::backend::mock::{section_marker, FUSED_CONTRACT};
use crate::tokenize::count_tokens;

/// Mean token counts of one backend call.
///
/// Token counts use the runtime tokenizer, an approximation of any real
/// model's tokenizer.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct OpStats {
    pub prompt_tokens: f64,
    /// Leading prompt tokens served from the prefix cache; at most `prompt_tokens`.
    pub cached_tokens: f64,
    pub completion_tokens: f64,
}

impl OpStats {
    pub fn new(prompt_tokens: f64, cached_tokens: f64, completion_tokens: f64) -> Self {
        OpStats { prompt_tokens, cached_tokens, completion_tokens }
    }

    /// Expected latency of one call.
    pub fn cost(&self, model: &CostModel) -> f64 {
        let cached = self.cached_tokens.min(self.prompt_tokens);
        model.call_cost(self.prompt_tokens - cached, cached, self.completion_tokens)
    }

    /// Stats of a fused map/filter call: both instructions share the cached
    /// prefix, the data is sent once, and the answer gains a label line.
    pub fn fused_pair(first: &OpStats, second: &OpStats) -> OpStats {
        let contract = count_tokens(FUSED_CONTRACT) as f64;
        OpStats {
            prompt_tokens: first.prompt_tokens + second.cached_tokens + contract,
            cached_tokens: first.cached_tokens + second.cached_tokens + contract,
            // "LABEL:" adds two tokens in front of the filter's one-word answer.
            completion_tokens: first.completion_tokens + second.completion_tokens + 2.0,
        }
    }

    /// Stats of one sectioned call answering every part.
    pub fn sections(parts: &[(&str, OpStats)]) -> OpStats {
        let mut out = OpStats::default();
        for (label, s) in parts {
            let marker = count_tokens(&section_marker(label)) as f64;
            out.prompt_tokens += s.prompt_tokens + marker;
            out.cached_tokens += s.cached_tokens;
            out.completion_tokens += s.completion_tokens + marker;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SiteStats {
    #[serde(flatten)]
    pub op: OpStats,
    /// Fraction of items a filter site keeps, in [0, 1].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selectivity: Option<f64>,
    /// View the site's prompt was rendered from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_view: Option<String>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PlanStatsError {
    #[error("no statistics for site '{0}'")]
    MissingStats(String),
    #[error("selectivity of '{0}' must lie in [0, 1]")]
    BadSelectivity(String),
    #[error("token means of '{0}' must be finite and nonnegative")]
    BadTokens(String),
}

/// Statistics the planner estimates costs from, keyed by GEN label.
///
/// Fused sites are keyed by their joined label (`a+b`); when absent their
/// stats derive from the component sites.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlanStats {
    pub sites: BTreeMap<String, SiteStats>,
    /// Items in a stream the pipeline does not itself produce.
    pub n_items: f64,
    /// Probability a CHECK condition holds.
    pub check_fire_prob: f64,
    pub default_selectivity: f64,
    pub default_op: OpStats,
    /// When false, a site without statistics is an error.
    pub use_defaults: bool,
}

impl Default for PlanStats {
    fn default() -> Self {
        PlanStats {
            sites: BTreeMap::new(),
            n_items: 1.0,
            check_fire_prob: 0.5,
            default_selectivity: 0.5,
            default_op: OpStats::new(100.0, 0.0, 20.0),
            use_defaults: true,
        }
    }
}

impl PlanStats {
    pub fn validate(&self) -> Result<(), PlanStatsError> {
        for (label, s) in &self.sites {
            if s.selectivity.is_some_and(|x| !(0.0..=1.0).contains(&x)) {
                return Err(PlanStatsError::BadSelectivity(label.clone()));
            }
            let o = s.op;
            if [o.prompt_tokens, o.cached_tokens, o.completion_tokens].iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(PlanStatsError::BadTokens(label.clone()));
            }
        }
        Ok(())
    }

    pub fn with_site(mut self, label: impl Into<String>, op: OpStats) -> Self {
        self.sites.entry(label.into()).or_default().op = op;
        self
    }

    pub fn with_selectivity(mut self, label: impl Into<String>, s: f64) -> Self {
        self.sites.entry(label.into()).or_default().selectivity = Some(s);
        self
    }

    pub fn op(&self, label: &str) -> Result<OpStats, PlanStatsError> {
        match self.sites.get(label) {
            Some(s) => Ok(s.op),
            None if self.use_defaults => Ok(self.default_op),
            None => Err(PlanStatsError::MissingStats(label.into())),
        }
    }

    /// Measured, else the default.
    pub fn selectivity(&self, label: &str) -> f64 {
        self.sites.get(label).and_then(|s| s.selectivity).unwrap_or(self.default_selectivity)
    }

    pub fn base_view(&self, label: &str) -> Option<&str> {
        self.sites.get(label).and_then(|s| s.base_view.as_deref())
    }

    /// Stats of the fused map/filter site `first+second`.
    pub fn fused_pair(&self, first: &str, second: &str) -> Result<OpStats, PlanStatsError> {
        match self.sites.get(&format!("{first}+{second}")) {
            Some(s) => Ok(s.op),
            None => Ok(OpStats::fused_pair(&self.op(first)?, &self.op(second)?)),
        }
    }

    pub fn sections(&self, labels: &[&str]) -> Result<OpStats, PlanStatsError> {
        if let Some(s) = self.sites.get(&labels.join("+")) {
            return Ok(s.op);
        }
        let parts = labels.iter().map(|l| Ok((*l, self.op(l)?))).collect::<Result<Vec<_>, _>>()?;
        Ok(OpStats::sections(&parts))
    }

    /// Per-call means and selectivities measured by earlier runs.
    ///
    /// Later reports add to the same means; a report's own stream size is
    /// not recorded, so `n_items` keeps its value.
    pub fn observe(&mut self, reports: &[RunReport]) {
        let mut sums: BTreeMap<String, (f64, OpStats)> = BTreeMap::new();
        for r in reports {
            for t in &r.trace {
                if let TraceRecord::Gen { label, calls, prompt_tokens, cached_prefix_tokens, completion_tokens, .. } = t {
                    let e = sums.entry(label.clone()).or_default();
                    e.0 += *calls as f64;
                    e.1.prompt_tokens += *prompt_tokens as f64;
                    e.1.cached_tokens += *cached_prefix_tokens as f64;
                    e.1.completion_tokens += *completion_tokens as f64;
                }
            }
            for (k, v) in &r.state.metadata {
                if let Some(label) = k.strip_prefix("selectivity:") {
                    self.sites.entry(label.to_string()).or_default().selectivity = Some(*v);
                }
            }
        }
        for (label, (calls, s)) in sums {
            if calls > 0.0 {
                self.sites.entry(label).or_default().op = OpStats::new(
                    s.prompt_tokens / calls,
                    s.cached_tokens / calls,
                    s.completion_tokens / calls,
                );
            }
        }
    }
}
