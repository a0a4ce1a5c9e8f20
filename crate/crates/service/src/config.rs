//! Service configuration, read from TOML.
//!
//! ```toml
//! bind = "127.0.0.1:8080"
//! session_dir = "session"
//! static_dir = "ui/dist"
//! default_model = "toy"
//! max_len = 8
//! pool_size = 4
//! snapshot_every = 100
//! show_initial_answer = true
//! auth_token = "change-me"
//! policy = { kind = "top_percent", value = 5.0 }
//!
//! [models.toy]
//! kind = "toy"
//! path = "toy.json"
//!
//! [models.micro]
//! kind = "micro"
//! seed = 42
//!
//! [corpus]
//! path = "corpus.jsonl"
//!
//! [retrieval]
//! k = 4
//! strategy = "union"
//! clip_threshold = 0.6
//!
//! [guidance]
//! alpha = 0.01
//! beta = 3.0
//! gamma = 1.3
//!
//! [llm]
//! offline = true
//! canned_dir = "canned"
//! ```
//!
//! Relative paths resolve against the config file's directory. LLM
//! credentials come from `EXPERT_CFG_LLM_ENDPOINT`, `EXPERT_CFG_LLM_API_KEY`
//! and `EXPERT_CFG_LLM_MODEL` when `[llm]` names no endpoint.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use expert_cfg::annotation::llm::LlmClientConfig;
use expert_cfg::model::ModelSpec;
use expert_cfg::retrieval::{Strategy, DEFAULT_K};
use expert_cfg::{GatePolicy, GuidanceConfig};
use serde::{Deserialize, Serialize};

use crate::error::{Result, ServiceError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    #[serde(default = "default_bind")]
    pub bind: String,
    /// Event log and snapshot directory. Without one the session lives in memory.
    #[serde(default)]
    pub session_dir: Option<PathBuf>,
    /// Built review UI, served at `/`.
    #[serde(default)]
    pub static_dir: Option<PathBuf>,
    pub models: BTreeMap<String, ModelSpec>,
    /// Model used when a request names none; the first model by id otherwise.
    #[serde(default)]
    pub default_model: Option<String>,
    #[serde(default)]
    pub corpus: Option<CorpusConfig>,
    #[serde(default)]
    pub retrieval: RetrievalConfig,
    #[serde(default)]
    pub policy: GatePolicy,
    #[serde(default)]
    pub guidance: GuidanceConfig<f64>,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    /// Concurrent decode workers.
    #[serde(default = "default_pool")]
    pub pool_size: usize,
    #[serde(default = "default_snapshot_every")]
    pub snapshot_every: u64,
    /// Whether item views include the model's initial answer.
    #[serde(default = "yes")]
    pub show_initial_answer: bool,
    /// Shared bearer token required on `/v1` routes when set.
    #[serde(default)]
    pub auth_token: Option<String>,
    #[serde(default)]
    pub llm: Option<LlmClientConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    /// Saved store directory or JSONL corpus.
    pub path: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrievalConfig {
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_strategy")]
    pub strategy: Strategy,
    #[serde(default)]
    pub clip_threshold: Option<f64>,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            strategy: Strategy::Union,
            clip_threshold: None,
        }
    }
}

fn default_bind() -> String {
    "127.0.0.1:8080".into()
}

fn default_max_len() -> usize {
    8
}

fn default_pool() -> usize {
    4
}

fn default_snapshot_every() -> u64 {
    100
}

fn default_k() -> usize {
    DEFAULT_K
}

fn default_strategy() -> Strategy {
    Strategy::Union
}

fn yes() -> bool {
    true
}

impl ServiceConfig {
    /// Config with one model and every other field at its default.
    pub fn single_model(id: &str, spec: ModelSpec) -> Self {
        Self {
            bind: default_bind(),
            session_dir: None,
            static_dir: None,
            models: BTreeMap::from([(id.to_string(), spec)]),
            default_model: None,
            corpus: None,
            retrieval: RetrievalConfig::default(),
            policy: GatePolicy::default(),
            guidance: GuidanceConfig::default(),
            max_len: default_max_len(),
            pool_size: default_pool(),
            snapshot_every: default_snapshot_every(),
            show_initial_answer: true,
            auth_token: None,
            llm: None,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| ServiceError::validation(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file and resolves its relative paths against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| expert_cfg::Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        self.session_dir.as_mut().map(fix);
        self.static_dir.as_mut().map(fix);
        if let Some(c) = &mut self.corpus {
            fix(&mut c.path);
        }
        if let Some(l) = &mut self.llm {
            l.canned_dir.as_mut().map(fix);
        }
        for spec in self.models.values_mut() {
            match spec {
                ModelSpec::Toy { path } => fix(path),
                ModelSpec::MicroWeights { weights, vocab } => {
                    fix(weights);
                    fix(vocab);
                }
                ModelSpec::Micro { .. } => {}
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.models.is_empty() {
            return Err(ServiceError::validation("config names no models"));
        }
        if let Some(d) = &self.default_model {
            if !self.models.contains_key(d) {
                return Err(ServiceError::validation(format!("default_model {d:?} is not configured")));
            }
        }
        if self.retrieval.k == 0 || self.max_len == 0 || self.pool_size == 0 {
            return Err(ServiceError::validation("k, max_len and pool_size must be at least 1"));
        }
        self.policy.validate()?;
        self.guidance.validate()?;
        Ok(())
    }

    pub fn default_model_id(&self) -> &str {
        self.default_model
            .as_deref()
            .or_else(|| self.models.keys().next().map(String::as_str))
            .expect("validated: at least one model")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn documented_example_parses() {
        let doc = include_str!("config.rs");
        let example: String = doc
            .lines()
            .skip_while(|l| !l.starts_with("//! ```toml"))
            .skip(1)
            .take_while(|l| !l.starts_with("//! ```"))
            .map(|l| l.trim_start_matches("//!").trim_start())
            .collect::<Vec<_>>()
            .join("\n");
        let mut cfg = ServiceConfig::from_toml(&example).unwrap();
        assert_eq!(cfg.models.len(), 2);
        assert_eq!(cfg.policy, GatePolicy::TopPercent(5.0));
        assert_eq!(cfg.retrieval.strategy, Strategy::Union);
        assert_eq!(cfg.guidance.gamma, 1.3);
        cfg.resolve_paths(Path::new("/etc/expert"));
        assert_eq!(cfg.corpus.unwrap().path, PathBuf::from("/etc/expert/corpus.jsonl"));
    }

    #[test]
    fn minimal_config_takes_defaults() {
        let cfg = ServiceConfig::from_toml("[models.m]\nkind = \"micro\"\nseed = 1\n").unwrap();
        assert_eq!(cfg.retrieval.k, 4);
        assert_eq!(cfg.default_model_id(), "m");
        assert!(cfg.show_initial_answer);
        assert!(ServiceConfig::from_toml("models = {}").is_err());
        assert!(ServiceConfig::from_toml("[models.m]\nkind = \"micro\"\nseed = 1\n[retrieval]\nk = 0\n").is_err());
        assert!(ServiceConfig::from_toml("bogus = 1\n[models.m]\nkind = \"micro\"\nseed = 1\n").is_err());
    }
}
