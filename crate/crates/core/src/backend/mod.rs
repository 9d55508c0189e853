//! LLM backends behind one call interface, with a shared prefix cache.

mod cache;
pub mod corpus;
mod http;
pub mod mock;
mod scripted;

use std::path::PathBuf;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

pub use cache::{CacheSnapshot, Lookup, PrefixCache, SnapshotEntry};
pub use http::{HttpBackend, HttpConfig};
pub use mock::{MockRuleSet, Sentiment};
pub use scripted::{prompt_sha, write_fixture, RecordingBackend, ScriptedBackend, ScriptedRecord};

use crate::planner::CostModel;
use crate::tokenize::tokenize;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BackendRequest {
    /// GEN label or internal purpose (e.g. `refine:<refiner>`).
    pub label: String,
    pub prompt: String,
    pub max_tokens: Option<u32>,
    /// Auxiliary cache keys for the rendered prompt (view name, version, parameter hash).
    pub cache_keys: Vec<String>,
}

impl BackendRequest {
    pub fn new(label: impl Into<String>, prompt: impl Into<String>) -> Self {
        BackendRequest { label: label.into(), prompt: prompt.into(), ..Default::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub cached_prefix_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackendResponse {
    pub text: String,
    pub confidence: f64,
    pub usage: Usage,
    /// Deterministic for mock and scripted backends; wall clock for HTTP.
    pub latency_s: f64,
}

/// What the local prefix cache knew about a request when it was issued.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CacheInfo {
    pub prompt_tokens: usize,
    pub cached_tokens: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum BackendError {
    #[error("transport failed after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("provider response was malformed: {0}")]
    Protocol(String),
    #[error("fixture record {index} does not match request '{label}': {detail}")]
    FixtureMismatch { index: usize, label: String, detail: String },
    #[error("fixture exhausted at request '{label}'")]
    FixtureExhausted { label: String },
    #[error("backend configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub trait Backend: Send + Sync {
    fn name(&self) -> &str;
    fn complete(&self, req: &BackendRequest, cache: CacheInfo) -> Result<BackendResponse, BackendError>;
}

/// Rule-based backend whose latency follows the cost model.
#[derive(Debug, Clone, Default)]
pub struct MockBackend {
    pub rules: MockRuleSet,
    pub cost: CostModel,
}

impl MockBackend {
    pub fn new(rules: MockRuleSet, cost: CostModel) -> Self {
        MockBackend { rules, cost }
    }
}

impl Backend for MockBackend {
    fn name(&self) -> &str {
        "mock"
    }

    fn complete(&self, req: &BackendRequest, cache: CacheInfo) -> Result<BackendResponse, BackendError> {
        let text = self.rules.respond(&req.prompt);
        let mut completion = tokenize(&text).len();
        if let Some(max) = req.max_tokens {
            completion = completion.min(max as usize);
        }
        let uncached = cache.prompt_tokens - cache.cached_tokens;
        let latency_s = self.cost.call_cost(uncached as f64, cache.cached_tokens as f64, completion as f64);
        Ok(BackendResponse {
            confidence: self.rules.confidence(&req.prompt),
            text,
            usage: Usage {
                prompt_tokens: cache.prompt_tokens as u64,
                cached_prefix_tokens: cache.cached_tokens as u64,
                completion_tokens: completion as u64,
            },
            latency_s,
        })
    }
}

/// Running cache accounting for one handle.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CacheStats {
    pub requests: u64,
    pub hit_requests: u64,
    pub prompt_tokens: u64,
    pub cached_tokens: u64,
}

impl CacheStats {
    /// Cached prompt tokens over all prompt tokens.
    pub fn token_hit_rate(&self) -> f64 {
        ratio(self.cached_tokens, self.prompt_tokens)
    }

    /// Requests with a nonzero cached prefix over all requests.
    pub fn request_hit_rate(&self) -> f64 {
        ratio(self.hit_requests, self.requests)
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// A backend plus the prefix cache that fronts it.
///
/// Lookup, call and insert happen under one lock, so concurrent requests see
/// a cache state consistent with some serial order.
pub struct BackendHandle {
    backend: Box<dyn Backend>,
    cache: Mutex<(PrefixCache, CacheStats)>,
}

impl std::fmt::Debug for BackendHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BackendHandle").field("backend", &self.backend.name()).finish()
    }
}

impl BackendHandle {
    pub fn new(backend: impl Backend + 'static, cache: PrefixCache) -> Self {
        BackendHandle { backend: Box::new(backend), cache: Mutex::new((cache, CacheStats::default())) }
    }

    pub fn boxed(backend: Box<dyn Backend>, cache: PrefixCache) -> Self {
        BackendHandle { backend, cache: Mutex::new((cache, CacheStats::default())) }
    }

    /// Mock backend with default rules and cost model and an unbounded cache.
    pub fn mock() -> Self {
        BackendHandle::new(MockBackend::default(), PrefixCache::default())
    }

    pub fn name(&self) -> &str {
        self.backend.name()
    }

    pub fn complete(&self, req: &BackendRequest) -> Result<BackendResponse, BackendError> {
        let tokens = tokenize(&req.prompt);
        let mut guard = self.cache.lock().unwrap_or_else(|e| e.into_inner());
        let (cache, stats) = &mut *guard;
        let hit = cache.lookup(&tokens);
        debug_assert!(hit.hit <= tokens.len());
        let info = CacheInfo { prompt_tokens: tokens.len(), cached_tokens: hit.hit };
        let resp = self.backend.complete(req, info)?;
        cache.insert(&tokens, &req.cache_keys);
        stats.requests += 1;
        stats.prompt_tokens += resp.usage.prompt_tokens;
        stats.cached_tokens += resp.usage.cached_prefix_tokens;
        if resp.usage.cached_prefix_tokens > 0 {
            stats.hit_requests += 1;
        }
        Ok(resp)
    }

    pub fn stats(&self) -> CacheStats {
        self.cache.lock().unwrap_or_else(|e| e.into_inner()).1
    }

    pub fn reset_stats(&self) {
        self.cache.lock().unwrap_or_else(|e| e.into_inner()).1 = CacheStats::default();
    }

    pub fn snapshot(&self) -> CacheSnapshot {
        self.cache.lock().unwrap_or_else(|e| e.into_inner()).0.snapshot()
    }

    /// Empties the cache, keeping its capacity and block size.
    pub fn clear_cache(&self) {
        self.cache.lock().unwrap_or_else(|e| e.into_inner()).0.clear();
    }
}

/// Which backend a run uses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendConfig {
    Mock,
    Scripted { fixture: PathBuf },
    Http(HttpConfig),
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig::Mock
    }
}

impl BackendConfig {
    pub fn build(&self, cost: CostModel) -> Result<Box<dyn Backend>, BackendError> {
        Ok(match self {
            BackendConfig::Mock => Box::new(MockBackend::new(MockRuleSet::default(), cost)),
            BackendConfig::Scripted { fixture } => Box::new(ScriptedBackend::from_path(fixture, cost)?),
            BackendConfig::Http(cfg) => Box::new(HttpBackend::new(cfg.clone())?),
        })
    }
}
