//! Replays recorded responses from a JSONL fixture.

use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Backend, BackendError, BackendRequest, BackendResponse, CacheInfo, Usage};
use crate::planner::CostModel;

/// One recorded backend call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedRecord {
    pub label: String,
    /// Hex sha256 of the exact prompt text.
    pub prompt_sha: String,
    pub text: String,
    pub confidence: f64,
    pub usage: Usage,
    /// When absent, latency comes from the cost model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_s: Option<f64>,
}

pub fn prompt_sha(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

impl ScriptedRecord {
    pub fn capture(req: &BackendRequest, resp: &BackendResponse) -> Self {
        ScriptedRecord {
            label: req.label.clone(),
            prompt_sha: prompt_sha(&req.prompt),
            text: resp.text.clone(),
            confidence: resp.confidence,
            usage: resp.usage,
            latency_s: Some(resp.latency_s),
        }
    }
}

/// Serves fixture records strictly in order; each must match the request label and prompt hash.
#[derive(Debug)]
pub struct ScriptedBackend {
    queue: Mutex<(usize, VecDeque<ScriptedRecord>)>,
    cost: CostModel,
}

impl ScriptedBackend {
    pub fn new(records: Vec<ScriptedRecord>, cost: CostModel) -> Self {
        ScriptedBackend { queue: Mutex::new((0, records.into())), cost }
    }

    pub fn from_path(path: impl AsRef<Path>, cost: CostModel) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path)?;
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let r: ScriptedRecord = serde_json::from_str(line)
                .map_err(|e| BackendError::Config(format!("fixture line {}: {e}", i + 1)))?;
            records.push(r);
        }
        Ok(ScriptedBackend::new(records, cost))
    }

    pub fn remaining(&self) -> usize {
        self.queue.lock().unwrap_or_else(|e| e.into_inner()).1.len()
    }
}

impl Backend for ScriptedBackend {
    fn name(&self) -> &str {
        "scripted"
    }

    fn complete(&self, req: &BackendRequest, _cache: CacheInfo) -> Result<BackendResponse, BackendError> {
        let mut guard = self.queue.lock().unwrap_or_else(|e| e.into_inner());
        let (served, queue) = &mut *guard;
        let Some(rec) = queue.front() else {
            return Err(BackendError::FixtureExhausted { label: req.label.clone() });
        };
        let mismatch = |detail: String| BackendError::FixtureMismatch { index: *served, label: req.label.clone(), detail };
        if rec.label != req.label {
            return Err(mismatch(format!("expected label '{}'", rec.label)));
        }
        let sha = prompt_sha(&req.prompt);
        if rec.prompt_sha != sha {
            return Err(mismatch(format!("prompt hash {sha} differs from recorded {}", rec.prompt_sha)));
        }
        let rec = queue.pop_front().expect("front exists");
        *served += 1;
        let u = rec.usage;
        let latency_s = rec.latency_s.unwrap_or_else(|| {
            self.cost.call_cost(
                (u.prompt_tokens - u.cached_prefix_tokens.min(u.prompt_tokens)) as f64,
                u.cached_prefix_tokens as f64,
                u.completion_tokens as f64,
            )
        });
        Ok(BackendResponse { text: rec.text, confidence: rec.confidence, usage: u, latency_s })
    }
}

/// Wraps a backend and records every successful call as a fixture record.
pub struct RecordingBackend {
    inner: Box<dyn Backend>,
    records: Arc<Mutex<Vec<ScriptedRecord>>>,
}

impl RecordingBackend {
    pub fn new(inner: Box<dyn Backend>) -> (Self, Arc<Mutex<Vec<ScriptedRecord>>>) {
        let records = Arc::new(Mutex::new(Vec::new()));
        (RecordingBackend { inner, records: records.clone() }, records)
    }
}

impl Backend for RecordingBackend {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn complete(&self, req: &BackendRequest, cache: CacheInfo) -> Result<BackendResponse, BackendError> {
        let resp = self.inner.complete(req, cache)?;
        self.records.lock().unwrap_or_else(|e| e.into_inner()).push(ScriptedRecord::capture(req, &resp));
        Ok(resp)
    }
}

pub fn write_fixture(path: impl AsRef<Path>, records: &[ScriptedRecord]) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        writeln!(f, "{}", serde_json::to_string(r).map_err(std::io::Error::other)?)?;
    }
    f.flush()
}
