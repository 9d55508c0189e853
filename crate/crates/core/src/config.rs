//! Run configuration, read from TOML (`.toml`) or JSON (any other extension).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backend::corpus::CorpusSpec;
use crate::backend::{BackendConfig, BackendError, BackendHandle, PrefixCache};
use crate::bench::{FusionBenchConfig, RefinementBenchConfig};
use crate::planner::{CalibrationGrid, CostModel, CostModelError, PlanStats};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CacheConfig {
    /// Maximum number of distinct cached token positions.
    pub capacity_tokens: usize,
    /// Hits are rounded down to a multiple of this many tokens.
    pub block_size: usize,
}

impl Default for CacheConfig {
    fn default() -> Self {
        CacheConfig { capacity_tokens: 1 << 20, block_size: 1 }
    }
}

impl CacheConfig {
    pub fn build(&self) -> PrefixCache {
        PrefixCache::new(self.capacity_tokens).with_block_size(self.block_size)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub backend: BackendConfig,
    pub cost: CostModel,
    pub cache: CacheConfig,
    pub corpus: CorpusSpec,
    pub calibration: CalibrationGrid,
    pub fusion: FusionBenchConfig,
    pub refinement: RefinementBenchConfig,
    /// Statistics for `--optimize` when no measured ones are at hand.
    pub plan: PlanStats,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Read { path: String, message: String },
    #[error(transparent)]
    Cost(#[from] CostModelError),
    #[error("cache block size must be at least 1")]
    BlockSize,
    #[error(transparent)]
    Backend(#[from] BackendError),
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let c: Config =
            toml::from_str(text).map_err(|e| ConfigError::Read { path: "<toml>".into(), message: e.to_string() })?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let read_err = |message: String| ConfigError::Read { path: path.display().to_string(), message };
        let text = std::fs::read_to_string(path).map_err(|e| read_err(e.to_string()))?;
        let c: Config = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| read_err(e.to_string()))?
        } else {
            serde_json::from_str(&text).map_err(|e| read_err(e.to_string()))?
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.cost.validate()?;
        if self.cache.block_size == 0 {
            return Err(ConfigError::BlockSize);
        }
        Ok(())
    }

    /// The configured backend behind a fresh cache.
    pub fn backend_handle(&self) -> Result<BackendHandle, ConfigError> {
        self.backend_handle_with(self.cache.build())
    }

    /// The configured backend behind a given cache, e.g. one restored from disk.
    pub fn backend_handle_with(&self, cache: PrefixCache) -> Result<BackendHandle, ConfigError> {
        Ok(BackendHandle::boxed(self.backend.build(self.cost)?, cache))
    }
}
