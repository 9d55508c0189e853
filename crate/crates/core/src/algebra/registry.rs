//! Named sources, agents and refiners a pipeline may reference.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::state::value_to_text;
use crate::store::{diff_entries, PromptEntry, RefAction, RefineMode};
use crate::tokenize::tokenize;

/// Id of the refiner RETRY uses when none is named.
pub const DEFAULT_RETRY_REFINER: &str = "__auto_refine";
/// Agent behind the DIFF operator.
pub const DIFF_AGENT: &str = "__diff";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    /// Collapses runs of whitespace within lines and drops blank lines.
    Normalize,
    Lowercase,
    Trim,
}

impl Transform {
    pub fn name(self) -> &'static str {
        match self {
            Transform::Normalize => "normalize",
            Transform::Lowercase => "lowercase",
            Transform::Trim => "trim",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        [Transform::Normalize, Transform::Lowercase, Transform::Trim].into_iter().find(|t| t.name() == s)
    }

    pub fn apply(self, text: &str) -> String {
        match self {
            Transform::Normalize => text
                .lines()
                .map(|l| l.split_whitespace().collect::<Vec<_>>().join(" "))
                .filter(|l| !l.is_empty())
                .collect::<Vec<_>>()
                .join("\n"),
            Transform::Lowercase => text.to_lowercase(),
            Transform::Trim => text.trim().to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefinerBody {
    /// Literal text.
    Text(String),
    /// Literal text whose default action is APPEND.
    Append(String),
    /// Text whose `{{param}}` placeholders bind to the call arguments.
    Template(String),
    /// Pure function of the current prompt text.
    Transform(Transform),
}

impl RefinerBody {
    pub fn kind(&self) -> &'static str {
        match self {
            RefinerBody::Text(_) => "text",
            RefinerBody::Append(_) => "append",
            RefinerBody::Template(_) => "template",
            RefinerBody::Transform(_) => "transform",
        }
    }
}

/// A named refinement function `f`.
///
/// MANUAL refiners are pure. ASSISTED and AUTO refiners send a meta-prompt to
/// the backend: `body` is the instruction, followed by the current prompt and
/// either the hint or the current values of `signals`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinerSpec {
    pub id: String,
    pub mode: RefineMode,
    pub params: Vec<String>,
    pub hint: Option<String>,
    pub signals: Vec<String>,
    /// Prompt key used when the REF names none.
    pub key: Option<String>,
    pub body: RefinerBody,
}

impl RefinerSpec {
    pub fn manual(id: impl Into<String>, body: RefinerBody) -> Self {
        RefinerSpec {
            id: id.into(),
            mode: RefineMode::Manual,
            params: Vec::new(),
            hint: None,
            signals: Vec::new(),
            key: None,
            body,
        }
    }

    pub fn assisted(id: impl Into<String>, instruction: impl Into<String>, hint: impl Into<String>) -> Self {
        RefinerSpec {
            mode: RefineMode::Assisted,
            hint: Some(hint.into()),
            ..RefinerSpec::manual(id, RefinerBody::Text(instruction.into()))
        }
    }

    pub fn auto(id: impl Into<String>, instruction: impl Into<String>, signals: Vec<String>) -> Self {
        RefinerSpec { mode: RefineMode::Auto, signals, ..RefinerSpec::manual(id, RefinerBody::Text(instruction.into())) }
    }

    pub fn with_key(mut self, key: impl Into<String>) -> Self {
        self.key = Some(key.into());
        self
    }

    pub fn with_params(mut self, params: &[&str]) -> Self {
        self.params = params.iter().map(|p| p.to_string()).collect();
        self
    }

    /// Action used where the operator does not name one (MAP, RETRY).
    pub fn default_action(&self) -> RefAction {
        match self.body {
            RefinerBody::Append(_) => RefAction::Append,
            _ => RefAction::Update,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    Inline(Value),
    /// `.jsonl` loads as a list of records, `.json` as one value, anything else as text.
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceDef {
    pub name: String,
    pub kind: SourceKind,
    /// Context key written by RET; defaults to the source name.
    pub into: Option<String>,
}

impl SourceDef {
    pub fn inline(name: impl Into<String>, value: Value) -> Self {
        SourceDef { name: name.into(), kind: SourceKind::Inline(value), into: None }
    }

    pub fn target(&self) -> &str {
        self.into.as_deref().unwrap_or(&self.name)
    }

    /// Loads the source. With a query, list items are kept only when they share
    /// a word of four or more letters with it.
    pub fn retrieve(&self, query: Option<&str>) -> Result<Value, String> {
        let value = match &self.kind {
            SourceKind::Inline(v) => v.clone(),
            SourceKind::File(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
                match p.extension().and_then(|e| e.to_str()) {
                    Some("jsonl") => Value::Array(
                        text.lines()
                            .filter(|l| !l.trim().is_empty())
                            .map(serde_json::from_str)
                            .collect::<Result<_, _>>()
                            .map_err(|e| format!("{}: {e}", p.display()))?,
                    ),
                    Some("json") => serde_json::from_str(&text).map_err(|e| format!("{}: {e}", p.display()))?,
                    _ => Value::String(text),
                }
            }
        };
        Ok(match (query, value) {
            (Some(q), Value::Array(items)) => {
                let words: BTreeSet<String> = tokenize(q).into_iter().filter(|t| t.len() >= 4).collect();
                Value::Array(
                    items
                        .into_iter()
                        .filter(|it| tokenize(&value_to_text(it)).iter().any(|t| words.contains(t)))
                        .collect(),
                )
            }
            (_, v) => v,
        })
    }
}

/// Result of one agent call.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentOutput {
    pub value: Value,
    /// Self-reported; built-in agents report 0.
    pub latency_s: f64,
}

/// A local procedure from payload to result. Agents never see the execution state.
pub trait Agent: Send + Sync {
    fn call(&self, payload: &Value) -> Result<AgentOutput, String>;
}

impl<F> Agent for F
where
    F: Fn(&Value) -> Result<Value, String> + Send + Sync,
{
    fn call(&self, payload: &Value) -> Result<AgentOutput, String> {
        Ok(AgentOutput { value: self(payload)?, latency_s: 0.0 })
    }
}

fn identity_agent(v: &Value) -> Result<Value, String> {
    Ok(v.clone())
}

/// Share of the answer's words (four letters or more) that occur in the evidence.
/// Payload: `[answer, evidence]`.
fn evidence_overlap_agent(v: &Value) -> Result<Value, String> {
    let Value::Array(pair) = v else {
        return Err("evidence_overlap expects [answer, evidence]".into());
    };
    let [answer, evidence] = pair.as_slice() else {
        return Err("evidence_overlap expects [answer, evidence]".into());
    };
    let content = |v: &Value| -> BTreeSet<String> {
        tokenize(&value_to_text(v)).into_iter().filter(|t| t.len() >= 4).collect()
    };
    let a = content(answer);
    if a.is_empty() {
        return Ok(json!(0.0));
    }
    let e = content(evidence);
    Ok(json!(a.intersection(&e).count() as f64 / a.len() as f64))
}

fn word_count_agent(v: &Value) -> Result<Value, String> {
    Ok(json!(value_to_text(v).split_whitespace().count()))
}

/// Payload: `[left_entry, right_entry]` as serialized prompt entries.
fn diff_agent(v: &Value) -> Result<Value, String> {
    let pair: [PromptEntry; 2] = serde_json::from_value(v.clone()).map_err(|e| format!("diff payload: {e}"))?;
    serde_json::to_value(diff_entries(&pair[0], &pair[1])).map_err(|e| e.to_string())
}

pub const BUILTIN_AGENTS: &[&str] = &["identity", "evidence_overlap", "word_count"];

pub fn builtin_agent(name: &str) -> Option<Arc<dyn Agent>> {
    Some(match name {
        "identity" => Arc::new(identity_agent),
        "evidence_overlap" => Arc::new(evidence_overlap_agent),
        "word_count" => Arc::new(word_count_agent),
        DIFF_AGENT => Arc::new(diff_agent),
        _ => return None,
    })
}

#[derive(Clone, Default)]
pub struct Registry {
    pub sources: BTreeMap<String, SourceDef>,
    pub agents: BTreeMap<String, Arc<dyn Agent>>,
    pub refiners: BTreeMap<String, RefinerSpec>,
}

impl fmt::Debug for Registry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Registry")
            .field("sources", &self.sources.keys().collect::<Vec<_>>())
            .field("agents", &self.agents.keys().collect::<Vec<_>>())
            .field("refiners", &self.refiners.keys().collect::<Vec<_>>())
            .finish()
    }
}

impl Registry {
    /// Registry holding the built-in agents and the default retry refiner.
    pub fn new() -> Self {
        let mut r = Registry::default();
        for name in BUILTIN_AGENTS.iter().chain(&[DIFF_AGENT]) {
            r.agents.insert(name.to_string(), builtin_agent(name).expect("builtin"));
        }
        r.add_refiner(RefinerSpec::auto(
            DEFAULT_RETRY_REFINER,
            "Improve the prompt so the answer is specific and cites evidence.",
            vec!["confidence".into()],
        ));
        r
    }

    pub fn add_source(&mut self, s: SourceDef) -> &mut Self {
        self.sources.insert(s.name.clone(), s);
        self
    }

    pub fn add_agent(&mut self, name: impl Into<String>, agent: Arc<dyn Agent>) -> &mut Self {
        self.agents.insert(name.into(), agent);
        self
    }

    pub fn add_refiner(&mut self, r: RefinerSpec) -> &mut Self {
        self.refiners.insert(r.id.clone(), r);
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn evidence_overlap_scores_shared_words() {
        let v = evidence_overlap_agent(&json!(["enoxaparin given for prophylaxis", "notes: enoxaparin 40mg daily"])).unwrap();
        // Content words {enoxaparin, given, prophylaxis}; only the first is in the evidence.
        assert_eq!(v, json!(1.0 / 3.0));
        assert!(evidence_overlap_agent(&json!("x")).is_err());
    }

    #[test]
    fn query_filters_list_sources() {
        let s = SourceDef::inline("n", json!(["heparin drip", "enoxaparin dose", "walk"]));
        assert_eq!(s.retrieve(Some("Find enoxaparin orders")).unwrap(), json!(["enoxaparin dose"]));
        assert_eq!(s.retrieve(None).unwrap().as_array().unwrap().len(), 3);
    }

    #[test]
    fn transforms() {
        assert_eq!(Transform::Normalize.apply("  a   b \n\n c "), "a b\nc");
        assert_eq!(Transform::from_name("trim"), Some(Transform::Trim));
    }
}
