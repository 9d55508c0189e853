use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub type ParamMap = BTreeMap<String, String>;

/// Truncated SHA-256 (16 hex chars) over the canonical serialization of `(text, params)`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VersionHash(pub String);

impl VersionHash {
    pub fn of(text: &str, params: &ParamMap) -> Self {
        // serde_json maps are key-sorted, so the document is canonical.
        let doc = serde_json::json!({ "params": params, "text": text });
        let digest = Sha256::digest(doc.to_string().as_bytes());
        VersionHash(hex::encode(&digest[..8]))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for VersionHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RefAction {
    Create,
    Append,
    Update,
    Merge,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RefineMode {
    Manual,
    Assisted,
    Auto,
}

impl fmt::Display for RefAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RefAction::Create => "CREATE",
            RefAction::Append => "APPEND",
            RefAction::Update => "UPDATE",
            RefAction::Merge => "MERGE",
        })
    }
}

impl fmt::Display for RefineMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RefineMode::Manual => "MANUAL",
            RefineMode::Assisted => "ASSISTED",
            RefineMode::Auto => "AUTO",
        })
    }
}

/// One step of a prompt's provenance.
///
/// `payload` always holds the resolved refiner output: the appended fragment for
/// APPEND, the full new text otherwise. Replay never needs a backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefLogRecord {
    pub action: RefAction,
    pub mode: RefineMode,
    pub refiner_id: String,
    pub trigger: Option<String>,
    pub pre_version: Option<VersionHash>,
    pub post_version: VersionHash,
    pub metrics_snapshot: BTreeMap<String, f64>,
    pub payload: String,
    /// New parameter map, when the step replaces it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<ParamMap>,
    /// Both parent versions of a MERGE.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub parents: Vec<VersionHash>,
    /// Ordered component steps of a fused refiner chain.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sub_records: Vec<RefLogRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptEntry {
    pub key: String,
    pub text: String,
    #[serde(default)]
    pub params: ParamMap,
    #[serde(default)]
    pub tags: BTreeSet<String>,
    pub version: VersionHash,
    pub ref_log: Vec<RefLogRecord>,
}

impl PromptEntry {
    pub fn compute_version(&self) -> VersionHash {
        VersionHash::of(&self.text, &self.params)
    }
}

/// APPEND joins with exactly one newline; trailing whitespace on both sides is dropped.
pub fn append_text(base: &str, fragment: &str) -> String {
    let base = base.trim_end();
    let fragment = fragment.trim_end();
    match (base.is_empty(), fragment.is_empty()) {
        (_, true) => base.to_string(),
        (true, false) => fragment.to_string(),
        (false, false) => format!("{base}\n{fragment}"),
    }
}

/// Applies one record's effect to `(text, params)` without checking versions.
pub(crate) fn apply_record(text: &mut String, params: &mut ParamMap, rec: &RefLogRecord) {
    match rec.action {
        RefAction::Create => {
            *text = rec.payload.clone();
            *params = rec.params.clone().unwrap_or_default();
        }
        RefAction::Append => {
            *text = append_text(text, &rec.payload);
            if let Some(p) = &rec.params {
                *params = p.clone();
            }
        }
        RefAction::Update | RefAction::Merge => {
            *text = rec.payload.clone();
            if let Some(p) = &rec.params {
                *params = p.clone();
            }
        }
    }
}
