//! External language-model client used during annotation and ingestion.
//!
//! Every request is a rendered template. Its SHA-256 (hex) keys both the
//! in-memory cache and the offline canned-response directory, where
//! `<hash>.json` holds `{"response": "<reply text>"}`.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Mutex, RwLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::overlaps_question;
use crate::text::INTERROGATIVES;

pub const CAPTION_TEMPLATE: &str = include_str!("../../templates/caption_from_qa.txt");
pub const KEYWORD_TEMPLATE: &str = include_str!("../../templates/extract_keywords.txt");
pub const HIGHLIGHT_TEMPLATE: &str = include_str!("../../templates/match_highlights.txt");

pub const ENV_ENDPOINT: &str = "EXPERT_CFG_LLM_ENDPOINT";
pub const ENV_API_KEY: &str = "EXPERT_CFG_LLM_API_KEY";
pub const ENV_MODEL: &str = "EXPERT_CFG_LLM_MODEL";

#[derive(Debug, Error)]
pub enum LlmError {
    /// Network or endpoint failure; the request may succeed if repeated.
    #[error("llm transport: {0}")]
    Transport(String),
    /// The service answered but the reply could not be interpreted.
    #[error("llm reply unparseable: {0}")]
    Parse(String),
    #[error("no canned response {0} in offline directory")]
    MissingCanned(String),
    #[error("llm configuration: {0}")]
    Config(String),
}

impl LlmError {
    pub fn is_retriable(&self) -> bool {
        matches!(self, LlmError::Transport(_))
    }
}

pub trait LlmBackend: Send + Sync {
    fn complete(&self, prompt: &str, hash: &str) -> Result<String, LlmError>;

    fn is_offline(&self) -> bool {
        false
    }
}

pub fn request_hash(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

#[derive(Debug, Serialize, Deserialize)]
struct Canned {
    response: String,
}

/// Replies from `<dir>/<hash>.json`.
#[derive(Debug, Clone)]
pub struct OfflineBackend {
    dir: PathBuf,
}

impl OfflineBackend {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self, LlmError> {
        let dir = dir.into();
        if !dir.is_dir() {
            return Err(LlmError::Config(format!(
                "canned-response directory {} missing",
                dir.display()
            )));
        }
        Ok(Self { dir })
    }

    /// Writes a canned reply for `prompt`, returning its path.
    pub fn record(dir: &Path, prompt: &str, response: &str) -> std::io::Result<PathBuf> {
        let path = dir.join(format!("{}.json", request_hash(prompt)));
        let body = serde_json::to_vec_pretty(&Canned {
            response: response.to_string(),
        })?;
        std::fs::write(&path, body)?;
        Ok(path)
    }
}

impl LlmBackend for OfflineBackend {
    fn complete(&self, _prompt: &str, hash: &str) -> Result<String, LlmError> {
        let path = self.dir.join(format!("{hash}.json"));
        let bytes = match std::fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(LlmError::MissingCanned(hash.to_string()))
            }
            Err(e) => return Err(LlmError::Config(format!("{}: {e}", path.display()))),
        };
        let canned: Canned = serde_json::from_slice(&bytes)
            .map_err(|e| LlmError::Parse(format!("{}: {e}", path.display())))?;
        Ok(canned.response)
    }

    fn is_offline(&self) -> bool {
        true
    }
}

/// Chat-completions style HTTP endpoint.
#[derive(Debug, Clone)]
pub struct HttpBackend {
    endpoint: String,
    api_key: Option<String>,
    model: String,
    timeout: Duration,
}

impl HttpBackend {
    pub fn new(endpoint: impl Into<String>, api_key: Option<String>, model: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            api_key,
            model: model.into(),
            timeout: Duration::from_secs(60),
        }
    }

    /// Endpoint, key and model from the environment.
    pub fn from_env() -> Result<Self, LlmError> {
        let endpoint = std::env::var(ENV_ENDPOINT)
            .map_err(|_| LlmError::Config(format!("{ENV_ENDPOINT} not set")))?;
        let model = std::env::var(ENV_MODEL).unwrap_or_else(|_| "gpt-4o".into());
        Ok(Self::new(endpoint, std::env::var(ENV_API_KEY).ok(), model))
    }
}

impl LlmBackend for HttpBackend {
    fn complete(&self, prompt: &str, _hash: &str) -> Result<String, LlmError> {
        let body = serde_json::json!({
            "model": self.model,
            "temperature": 0,
            "messages": [{"role": "user", "content": prompt}],
        });
        let mut req = ureq::post(&self.endpoint).timeout(self.timeout);
        if let Some(key) = &self.api_key {
            req = req.set("Authorization", &format!("Bearer {key}"));
        }
        let reply: serde_json::Value = match req.send_json(body) {
            Ok(resp) => resp.into_json().map_err(|e| LlmError::Parse(e.to_string()))?,
            Err(ureq::Error::Status(code, _)) if code >= 500 || code == 429 => {
                return Err(LlmError::Transport(format!("status {code}")))
            }
            Err(ureq::Error::Status(code, _)) => return Err(LlmError::Config(format!("status {code}"))),
            Err(e) => return Err(LlmError::Transport(e.to_string())),
        };
        reply["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| LlmError::Parse("reply has no choices[0].message.content".into()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmClientConfig {
    /// HTTP endpoint; falls back to the environment when unset.
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub offline: bool,
    #[serde(default)]
    pub canned_dir: Option<PathBuf>,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
}

fn default_retries() -> u32 {
    2
}

fn default_backoff_ms() -> u64 {
    250
}

impl Default for LlmClientConfig {
    fn default() -> Self {
        Self {
            endpoint: None,
            offline: true,
            canned_dir: None,
            max_retries: default_retries(),
            backoff_ms: default_backoff_ms(),
        }
    }
}

/// Cached, retrying front for a backend. Requests are serialized; cached
/// replies are served without touching the backend.
pub struct LlmClient {
    backend: Box<dyn LlmBackend>,
    cache: RwLock<HashMap<String, String>>,
    calls: AtomicUsize,
    gate: Mutex<()>,
    max_retries: u32,
    backoff: Duration,
}

impl std::fmt::Debug for LlmClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LlmClient")
            .field("calls", &self.calls())
            .field("offline", &self.is_offline())
            .finish()
    }
}

impl LlmClient {
    pub fn new(backend: Box<dyn LlmBackend>) -> Self {
        Self {
            backend,
            cache: RwLock::new(HashMap::new()),
            calls: AtomicUsize::new(0),
            gate: Mutex::new(()),
            max_retries: default_retries(),
            backoff: Duration::from_millis(default_backoff_ms()),
        }
    }

    pub fn with_retries(mut self, max_retries: u32, backoff: Duration) -> Self {
        self.max_retries = max_retries;
        self.backoff = backoff;
        self
    }

    pub fn from_config(cfg: &LlmClientConfig) -> Result<Self, LlmError> {
        let backend: Box<dyn LlmBackend> = if cfg.offline {
            let dir = cfg
                .canned_dir
                .clone()
                .ok_or_else(|| LlmError::Config("offline mode needs canned_dir".into()))?;
            Box::new(OfflineBackend::new(dir)?)
        } else {
            match &cfg.endpoint {
                Some(e) => Box::new(HttpBackend::new(
                    e.clone(),
                    std::env::var(ENV_API_KEY).ok(),
                    std::env::var(ENV_MODEL).unwrap_or_else(|_| "gpt-4o".into()),
                )),
                None => Box::new(HttpBackend::from_env()?),
            }
        };
        Ok(Self::new(backend).with_retries(cfg.max_retries, Duration::from_millis(cfg.backoff_ms)))
    }

    /// Backend invocations so far, retries included.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn is_offline(&self) -> bool {
        self.backend.is_offline()
    }

    pub fn complete(&self, prompt: &str) -> Result<String, LlmError> {
        let hash = request_hash(prompt);
        if let Some(hit) = self.cache.read().expect("cache lock").get(&hash) {
            return Ok(hit.clone());
        }
        let _serial = self.gate.lock().expect("request lock");
        if let Some(hit) = self.cache.read().expect("cache lock").get(&hash) {
            return Ok(hit.clone());
        }
        let mut attempt = 0;
        let reply = loop {
            self.calls.fetch_add(1, Ordering::SeqCst);
            match self.backend.complete(prompt, &hash) {
                Ok(r) => break r,
                Err(e) if e.is_retriable() && attempt < self.max_retries => {
                    attempt += 1;
                    log::warn!("llm request failed ({e}); retry {attempt}/{}", self.max_retries);
                    std::thread::sleep(self.backoff * attempt);
                }
                Err(e) => return Err(e),
            }
        };
        self.cache
            .write()
            .expect("cache lock")
            .insert(hash, reply.clone());
        Ok(reply)
    }
}

pub fn render(template: &str, vars: &[(&str, &str)]) -> String {
    vars.iter().fold(template.to_string(), |acc, (k, v)| {
        acc.replace(&format!("{{{k}}}"), v)
    })
}

/// Parses the first JSON array of strings in `reply`.
pub fn parse_string_list(reply: &str) -> Result<Vec<String>, LlmError> {
    let (start, end) = match (reply.find('['), reply.rfind(']')) {
        (Some(s), Some(e)) if s < e => (s, e),
        _ => return Err(LlmError::Parse(format!("no JSON array in {reply:?}"))),
    };
    serde_json::from_str(&reply[start..=end]).map_err(|e| LlmError::Parse(e.to_string()))
}

pub fn llm_extract_keywords(client: &LlmClient, caption: &str) -> Result<Vec<String>, LlmError> {
    let prompt = render(KEYWORD_TEMPLATE, &[("caption", caption)]);
    parse_string_list(&client.complete(&prompt)?)
}

/// Subset of `keywords` relevant to `query`. Replies naming terms outside the
/// input are filtered with a warning. Offline without a canned reply, the
/// question-overlap rule decides.
pub fn llm_match_highlights(client: &LlmClient, keywords: &[String], query: &str) -> Result<Vec<String>, LlmError> {
    if keywords.is_empty() {
        return Ok(Vec::new());
    }
    let listed = serde_json::to_string(keywords).expect("strings serialize");
    let prompt = render(HIGHLIGHT_TEMPLATE, &[("query", query), ("keywords", &listed)]);
    let reply = match client.complete(&prompt) {
        Ok(r) => r,
        Err(LlmError::MissingCanned(_)) if client.is_offline() => {
            return Ok(keywords
                .iter()
                .filter(|k| overlaps_question(k, query))
                .cloned()
                .collect())
        }
        Err(e) => return Err(e),
    };
    let chosen = parse_string_list(&reply)?;
    let mut out = Vec::new();
    for k in chosen {
        if keywords.contains(&k) {
            if !out.contains(&k) {
                out.push(k);
            }
        } else {
            log::warn!("dropping highlight {k:?}: not among the input keywords");
        }
    }
    Ok(out)
}

/// Rule-based caption: the question without interrogatives, then the answer.
pub fn caption_from_qa_rule(question: &str, answer: &str) -> String {
    let mut words: Vec<&str> = question
        .split(|c: char| c.is_whitespace() || c == '?')
        .filter(|w| !w.is_empty())
        .collect();
    while words
        .first()
        .is_some_and(|w| INTERROGATIVES.contains(&w.to_lowercase().as_str()))
    {
        words.remove(0);
    }
    let mut caption = words.join(" ");
    if !caption.is_empty() {
        caption.push_str(": ");
    }
    caption.push_str(answer.trim());
    caption
}

/// Caption through the client, falling back to the rule offline when no
/// canned reply exists.
pub fn caption_from_qa(client: Option<&LlmClient>, question: &str, answer: &str) -> Result<String, LlmError> {
    let Some(client) = client else {
        return Ok(caption_from_qa_rule(question, answer));
    };
    let prompt = render(CAPTION_TEMPLATE, &[("question", question), ("answer", answer)]);
    match client.complete(&prompt) {
        Ok(r) if !r.trim().is_empty() => Ok(r.trim().to_string()),
        Ok(_) => Err(LlmError::Parse("empty caption".into())),
        Err(LlmError::MissingCanned(_)) if client.is_offline() => Ok(caption_from_qa_rule(question, answer)),
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Flaky {
        failures: AtomicUsize,
        reply: String,
    }

    impl LlmBackend for Flaky {
        fn complete(&self, _prompt: &str, _hash: &str) -> Result<String, LlmError> {
            if self.failures.load(Ordering::SeqCst) > 0 {
                self.failures.fetch_sub(1, Ordering::SeqCst);
                return Err(LlmError::Transport("connection reset".into()));
            }
            Ok(self.reply.clone())
        }
    }

    fn flaky(failures: usize, reply: &str) -> LlmClient {
        LlmClient::new(Box::new(Flaky {
            failures: AtomicUsize::new(failures),
            reply: reply.into(),
        }))
        .with_retries(2, Duration::ZERO)
    }

    fn offline_with(pairs: &[(&str, &str)]) -> (tempfile::TempDir, LlmClient) {
        let dir = tempfile::tempdir().unwrap();
        for (prompt, reply) in pairs {
            OfflineBackend::record(dir.path(), prompt, reply).unwrap();
        }
        let client = LlmClient::new(Box::new(OfflineBackend::new(dir.path()).unwrap()));
        (dir, client)
    }

    #[test]
    fn offline_canned_keywords_and_cache() {
        let caption = "Erect chest film: free air under the diaphragm.";
        let prompt = render(KEYWORD_TEMPLATE, &[("caption", caption)]);
        let (_dir, client) = offline_with(&[(&prompt, r#"["pneumoperitoneum","free air"]"#)]);
        let kw = llm_extract_keywords(&client, caption).unwrap();
        assert_eq!(kw, ["pneumoperitoneum", "free air"]);
        assert_eq!(client.calls(), 1);
        assert_eq!(llm_extract_keywords(&client, caption).unwrap(), kw);
        assert_eq!(client.calls(), 1);
    }

    #[test]
    fn offline_missing_canned_is_an_error_for_keywords() {
        let (_dir, client) = offline_with(&[]);
        let err = llm_extract_keywords(&client, "anything").unwrap_err();
        assert!(matches!(err, LlmError::MissingCanned(_)));
        assert!(!err.is_retriable());
    }

    #[test]
    fn offline_highlight_fallback_uses_overlap_rule() {
        let (_dir, client) = offline_with(&[]);
        let kw = vec!["left lung".to_string(), "right kidney".to_string()];
        let got = llm_match_highlights(&client, &kw, "what is wrong with the lung?").unwrap();
        assert_eq!(got, ["left lung"]);
        assert!(llm_match_highlights(&client, &[], "q").unwrap().is_empty());
        assert_eq!(client.calls(), 1);
    }

    #[test]
    fn foreign_keywords_are_dropped() {
        let client = flaky(0, r#"["left lung", "spleen"]"#);
        let kw = vec!["left lung".to_string(), "right kidney".to_string()];
        assert_eq!(llm_match_highlights(&client, &kw, "lung?").unwrap(), ["left lung"]);
    }

    #[test]
    fn transport_errors_retry_then_surface() {
        let client = flaky(2, r#"["a"]"#);
        assert_eq!(llm_extract_keywords(&client, "c").unwrap(), ["a"]);
        assert_eq!(client.calls(), 3);
        let client = flaky(3, r#"["a"]"#);
        let err = llm_extract_keywords(&client, "c").unwrap_err();
        assert!(err.is_retriable());
        assert_eq!(client.calls(), 3);
    }

    #[test]
    fn parse_failure_is_distinct_from_transport() {
        let client = flaky(0, "sure, here you go");
        let err = llm_extract_keywords(&client, "c").unwrap_err();
        assert!(matches!(err, LlmError::Parse(_)));
        assert!(!err.is_retriable());
    }

    #[test]
    fn caption_rule() {
        assert_eq!(
            caption_from_qa_rule("What is under the diaphragm?", "free air"),
            "under the diaphragm: free air"
        );
        let (_dir, client) = offline_with(&[]);
        assert_eq!(
            caption_from_qa(Some(&client), "Is there an effusion?", "yes").unwrap(),
            "there an effusion: yes"
        );
    }

    #[test]
    fn templates_have_placeholders() {
        assert!(CAPTION_TEMPLATE.contains("{question}") && CAPTION_TEMPLATE.contains("{answer}"));
        assert!(KEYWORD_TEMPLATE.contains("{caption}"));
        assert!(HIGHLIGHT_TEMPLATE.contains("{query}") && HIGHLIGHT_TEMPLATE.contains("{keywords}"));
    }

    #[test]
    fn offline_config_requires_directory() {
        let cfg = LlmClientConfig {
            canned_dir: Some("/nonexistent/canned".into()),
            ..Default::default()
        };
        assert!(matches!(LlmClient::from_config(&cfg), Err(LlmError::Config(_))));
        let cfg = LlmClientConfig::default();
        assert!(LlmClient::from_config(&cfg).is_err());
    }
}
