//! Runtime context `C`, metadata `M`, and the `(P, C, M)` execution state.

mod condition;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

pub use condition::{Atom, CmpOp, Condition, ConditionError, Literal};
pub(crate) use condition::quote;

use crate::store::PromptStore;

pub type Context = BTreeMap<String, Value>;
pub type Metadata = BTreeMap<String, f64>;

/// Context lookups, optionally with the current stream item bound as `C.item`.
#[derive(Debug, Clone, Copy)]
pub struct Scope<'a> {
    ctx: &'a Context,
    item: Option<&'a Value>,
}

impl<'a> Scope<'a> {
    pub fn new(ctx: &'a Context) -> Self {
        Scope { ctx, item: None }
    }

    pub fn with_item(self, item: &'a Value) -> Self {
        Scope { item: Some(item), ..self }
    }

    pub fn lookup(&self, path: &[String]) -> Option<&'a Value> {
        let (head, rest) = path.split_first()?;
        let mut v = match (head.as_str(), self.item) {
            ("item", Some(item)) => item,
            _ => self.ctx.get(head)?,
        };
        for seg in rest {
            v = match v {
                Value::Object(m) => m.get(seg)?,
                Value::Array(a) => a.get(seg.parse::<usize>().ok()?)?,
                _ => return None,
            };
        }
        Some(v)
    }
}

/// Strings render verbatim; every other value as compact JSON.
pub fn value_to_text(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum StateError {
    #[error("context key must be nonempty")]
    EmptyContextKey,
    #[error("metric '{0}' is not finite")]
    NonFiniteMetric(String),
    #[error("metric '{key}' = {value} is outside its domain")]
    MetricOutOfRange { key: String, value: f64 },
}

/// The triple every operator consumes and produces.
///
/// `focus` names the prompt that an operator without an explicit prompt key
/// (e.g. a bare `GEN["answer_0"]`) reads: the key most recently created or
/// refined in this run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExecState {
    pub store: PromptStore,
    pub context: Context,
    pub metadata: Metadata,
    #[serde(default)]
    pub focus: Option<String>,
}

impl ExecState {
    pub fn new(store: PromptStore) -> Self {
        ExecState { store, ..Default::default() }
    }

    pub fn with_context(mut self, context: Context) -> Self {
        self.context = context;
        self
    }

    /// Canonical serialization used for byte-exact state comparison.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("state serializes")
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }

    pub fn set_metric(&mut self, key: impl Into<String>, value: f64) {
        self.metadata.insert(key.into(), value);
    }

    pub fn add_metric(&mut self, key: impl Into<String>, delta: f64) {
        *self.metadata.entry(key.into()).or_insert(0.0) += delta;
    }

    /// Re-checks the type invariants of C and M.
    pub fn validate(&self) -> Result<(), StateError> {
        if self.context.keys().any(|k| k.is_empty()) {
            return Err(StateError::EmptyContextKey);
        }
        for (k, v) in &self.metadata {
            if !v.is_finite() {
                return Err(StateError::NonFiniteMetric(k.clone()));
            }
            let base = k.split(':').next().unwrap_or(k);
            let bad = match base {
                "confidence" | "selectivity" => !(0.0..=1.0).contains(v),
                "prompt_tokens" | "cached_prefix_tokens" | "completion_tokens" | "retries" => {
                    *v < 0.0 || v.fract() != 0.0
                }
                "latency" => *v < 0.0,
                _ => false,
            };
            if bad {
                return Err(StateError::MetricOutOfRange { key: k.clone(), value: *v });
            }
        }
        Ok(())
    }
}

/// Reads a JSONL file: one JSON value per nonblank line.
pub fn read_jsonl(path: impl AsRef<Path>) -> std::io::Result<Vec<Value>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(std::io::Error::other))
        .collect()
}
