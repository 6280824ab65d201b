//! Service and CLI configuration.
//!
//! ```toml
//! backend = "scripted:fixtures/cafe"   # live | fallback | scripted:<dir>
//! data_dir = "data"
//! parallelism = 4
//! max_retries = 2
//! max_rounds = 5
//! k = 12
//! bind = "127.0.0.1:8080"
//! templates = "templates"              # optional template corpus
//! index = "templates/index.bin"        # optional prebuilt index
//!
//! [live]                               # only read for backend = "live"
//! base_url = "https://api.openai.com/v1"
//! chat_model = "gpt-4o"
//! image_model = "gpt-image-1"
//! embed_model = "clip-vit-b-32"
//! image_size = "1024x1024"
//! timeout_secs = 120
//! ```
//!
//! The API key is never read from this file: set `MODEL_API_KEY`, and
//! optionally `MODEL_BASE_URL` to override `live.base_url`.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use posterpanel::discussion::DEFAULT_MAX_ROUNDS;
use posterpanel::gateway::{AssetStore, FallbackBackend, GatewayConfig, LiveBackend, LiveConfig, ScriptedBackend};
use posterpanel::theme::DEFAULT_K;
use posterpanel::Gateway;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {message}")]
    Read { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendSpec {
    Live,
    Fallback,
    Scripted(PathBuf),
}

impl FromStr for BackendSpec {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "live" => Ok(BackendSpec::Live),
            "fallback" => Ok(BackendSpec::Fallback),
            _ => match s.strip_prefix("scripted:") {
                Some(dir) if !dir.is_empty() => Ok(BackendSpec::Scripted(PathBuf::from(dir))),
                _ => Err(ConfigError::Invalid(format!(
                    "backend must be `live`, `fallback` or `scripted:<dir>`, got `{s}`"
                ))),
            },
        }
    }
}

impl fmt::Display for BackendSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BackendSpec::Live => f.write_str("live"),
            BackendSpec::Fallback => f.write_str("fallback"),
            BackendSpec::Scripted(dir) => write!(f, "scripted:{}", dir.display()),
        }
    }
}

impl Serialize for BackendSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for BackendSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub backend: BackendSpec,
    pub data_dir: PathBuf,
    pub parallelism: usize,
    pub max_retries: u32,
    pub max_rounds: u32,
    pub k: usize,
    pub bind: String,
    pub templates: Option<PathBuf>,
    pub index: Option<PathBuf>,
    pub live: LiveConfig,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        let gw = GatewayConfig::default();
        ServiceConfig {
            backend: BackendSpec::Fallback,
            data_dir: PathBuf::from("data"),
            parallelism: gw.parallelism,
            max_retries: gw.max_retries,
            max_rounds: DEFAULT_MAX_ROUNDS,
            k: DEFAULT_K,
            bind: "127.0.0.1:8080".into(),
            templates: None,
            index: None,
            live: LiveConfig::default(),
        }
    }
}

impl ServiceConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: ServiceConfig = toml::from_str(text).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Relative paths in the file resolve against the file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let mut cfg = Self::parse(&text)?;
        if let Some(base) = path.parent() {
            let rebase = |p: &mut PathBuf| {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            };
            rebase(&mut cfg.data_dir);
            if let Some(p) = cfg.templates.as_mut() {
                rebase(p);
            }
            if let Some(p) = cfg.index.as_mut() {
                rebase(p);
            }
            if let BackendSpec::Scripted(p) = &mut cfg.backend {
                rebase(p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.parallelism == 0 {
            return Err(ConfigError::Invalid("parallelism must be at least 1".into()));
        }
        if self.max_rounds == 0 {
            return Err(ConfigError::Invalid("max_rounds must be at least 1".into()));
        }
        if self.k == 0 {
            return Err(ConfigError::Invalid("k must be at least 1".into()));
        }
        Ok(())
    }

    pub fn gateway_config(&self) -> GatewayConfig {
        GatewayConfig {
            max_retries: self.max_retries,
            parallelism: self.parallelism,
            heuristics: self.backend == BackendSpec::Fallback,
            ..GatewayConfig::default()
        }
    }
}

/// Builds the gateway for `spec` over `assets`.
pub fn build_gateway(spec: &BackendSpec, cfg: &ServiceConfig, assets: AssetStore) -> Result<Gateway, ConfigError> {
    let gw_cfg = GatewayConfig {
        heuristics: *spec == BackendSpec::Fallback,
        ..cfg.gateway_config()
    };
    let gw = match spec {
        BackendSpec::Fallback => Gateway::new(Arc::new(FallbackBackend::new()), assets, gw_cfg),
        BackendSpec::Scripted(dir) => {
            if !dir.is_dir() {
                return Err(ConfigError::Invalid(format!("fixture directory {} does not exist", dir.display())));
            }
            Gateway::new(Arc::new(ScriptedBackend::from_dir(dir)), assets, gw_cfg)
        }
        BackendSpec::Live => {
            let live = cfg.live.clone().with_env();
            if live.api_key.as_deref().is_none_or(str::is_empty) {
                return Err(ConfigError::Invalid("the live backend needs MODEL_API_KEY in the environment".into()));
            }
            let backend = LiveBackend::new(live).map_err(|e| ConfigError::Invalid(e.to_string()))?;
            Gateway::new(Arc::new(backend), assets, gw_cfg)
        }
    };
    Ok(gw)
}
