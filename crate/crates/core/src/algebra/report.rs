use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::backend::CacheStats;
use crate::planner::AppliedRewrite;
use crate::state::ExecState;
use crate::store::{RefAction, RefineMode, VersionHash};

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Run against a clone of the store and discard every P write.
    pub shadow: bool,
    /// Also stream events as JSON lines to this file.
    pub log_path: Option<PathBuf>,
    /// Re-check state and store invariants after every operator.
    pub check_invariants: bool,
    /// REF CREATE of a key already in P keeps the stored entry and focuses it,
    /// so a pipeline can rerun against a persisted store.
    pub keep_existing: bool,
}

impl RunOptions {
    pub fn checked() -> Self {
        RunOptions { check_invariants: true, ..Default::default() }
    }
}

/// Keys an operator touched.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StateDelta {
    pub prompts: Vec<String>,
    pub context: Vec<String>,
    pub metrics: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub index: usize,
    /// Nesting depth; top-level operators have depth 0.
    pub depth: usize,
    pub op: String,
    pub summary: String,
    /// Wall clock; the only nondeterministic field of a report.
    pub duration_ms: f64,
    pub delta: StateDelta,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Observations the meta module folds over.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TraceRecord {
    Gen {
        label: String,
        prompt_key: String,
        prompt_version: VersionHash,
        /// Backend calls made by the site; token and latency fields sum over them.
        calls: u64,
        confidence: f64,
        prompt_tokens: u64,
        cached_prefix_tokens: u64,
        completion_tokens: u64,
        latency_s: f64,
    },
    Ref {
        key: String,
        refiner_id: String,
        mode: RefineMode,
        action: RefAction,
        trigger: Option<String>,
        pre_version: Option<VersionHash>,
        post_version: VersionHash,
        token_delta: i64,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub pipeline: String,
    pub shadow: bool,
    pub state: ExecState,
    pub events: Vec<Event>,
    pub trace: Vec<TraceRecord>,
    #[serde(default)]
    pub rewrites: Vec<AppliedRewrite>,
    pub cache: CacheStats,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl RunReport {
    pub fn succeeded(&self) -> bool {
        self.error.is_none()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
#[error("report contains no GEN events")]
pub struct NoGenEvents;

/// Cached prompt tokens over prompt tokens, summed over the report's GEN events.
pub fn cache_hit_rate(report: &RunReport) -> Result<f64, NoGenEvents> {
    let (mut cached, mut total, mut any) = (0u64, 0u64, false);
    for t in &report.trace {
        if let TraceRecord::Gen { prompt_tokens, cached_prefix_tokens, .. } = t {
            any = true;
            cached += cached_prefix_tokens;
            total += prompt_tokens;
        }
    }
    if !any {
        return Err(NoGenEvents);
    }
    Ok(if total == 0 { 0.0 } else { cached as f64 / total as f64 })
}
