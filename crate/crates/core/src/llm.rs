//! Provider-agnostic chat-completion client.
//!
//! One request shape (single user turn, role/content messages) posted to
//! `{base_url}/chat/completions`. Transient failures (timeouts, connection
//! errors, 429, 5xx) are retried with capped exponential backoff, in-flight
//! requests are bounded by a semaphore, and responses are cached on disk
//! under a digest of the request.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;
use tokio::sync::Semaphore;

pub const ENV_BASE_URL: &str = "RCTCAST_LLM_BASE_URL";
pub const ENV_API_KEY: &str = "RCTCAST_LLM_API_KEY";
pub const ENV_MODEL: &str = "RCTCAST_LLM_MODEL";

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("endpoint not configured: set {ENV_BASE_URL}")]
    NotConfigured,
    #[error("upstream rejected request ({status}): {message}")]
    Permanent { status: u16, message: String },
    #[error("gave up after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: String },
    #[error("malformed provider payload: {0}")]
    Payload(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("cache error at {path}: {message}")]
    Cache { path: PathBuf, message: String },
}

impl LlmError {
    /// Number of network attempts made, when known.
    pub fn attempts(&self) -> Option<u32> {
        match self {
            LlmError::RetriesExhausted { attempts, .. } => Some(*attempts),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model_id: String,
    pub prompt: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    /// Pipeline stage label; not part of the cache key.
    pub request_tag: String,
}

impl ChatRequest {
    pub fn new(model_id: impl Into<String>, prompt: impl Into<String>, request_tag: impl Into<String>) -> Self {
        Self {
            model_id: model_id.into(),
            prompt: prompt.into(),
            temperature: 0.0,
            max_output_tokens: 2048,
            request_tag: request_tag.into(),
        }
    }

    pub fn with_temperature(mut self, t: f64) -> Self {
        self.temperature = t;
        self
    }

    pub fn with_max_output_tokens(mut self, n: u32) -> Self {
        self.max_output_tokens = n;
        self
    }

    fn check(&self) -> Result<(), LlmError> {
        if self.prompt.trim().is_empty() {
            return Err(LlmError::Precondition("prompt is empty".into()));
        }
        if !(self.temperature >= 0.0) {
            return Err(LlmError::Precondition(format!("temperature {} < 0", self.temperature)));
        }
        if self.max_output_tokens == 0 {
            return Err(LlmError::Precondition("max_output_tokens must be positive".into()));
        }
        Ok(())
    }
}

/// Hex SHA-256 over (model, prompt, temperature, max tokens).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CacheKey(pub String);

impl CacheKey {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

pub fn cache_key(req: &ChatRequest) -> CacheKey {
    // JSON array encoding is length-unambiguous across fields.
    let material = serde_json::to_vec(&(
        &req.model_id,
        &req.prompt,
        req.temperature.to_bits(),
        req.max_output_tokens,
    ))
    .expect("tuple of plain values serializes");
    CacheKey(hex::encode(Sha256::digest(&material)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: CacheKey,
    pub model_id: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub request_tag: String,
    pub prompt: String,
    pub response: String,
}

/// One JSON file per digest; entries are never evicted.
#[derive(Debug)]
pub struct DiskCache {
    dir: PathBuf,
    locks: Mutex<HashMap<CacheKey, Arc<tokio::sync::Mutex<()>>>>,
}

impl DiskCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: dir.into(),
            locks: Mutex::new(HashMap::new()),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, key: &CacheKey) -> PathBuf {
        self.dir.join(format!("{}.json", key.0))
    }

    fn cache_err(path: &Path, e: impl ToString) -> LlmError {
        LlmError::Cache {
            path: path.to_path_buf(),
            message: e.to_string(),
        }
    }

    pub fn load(&self, key: &CacheKey) -> Result<Option<CacheEntry>, LlmError> {
        let path = self.path_for(key);
        match std::fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map(Some)
                .map_err(|e| Self::cache_err(&path, e)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Self::cache_err(&path, e)),
        }
    }

    pub async fn store(&self, entry: &CacheEntry) -> Result<(), LlmError> {
        let lock = {
            let mut locks = self.locks.lock().expect("cache lock table poisoned");
            locks.entry(entry.key.clone()).or_default().clone()
        };
        let _guard = lock.lock().await;
        let path = self.path_for(&entry.key);
        std::fs::create_dir_all(&self.dir).map_err(|e| Self::cache_err(&self.dir, e))?;
        let bytes = serde_json::to_vec_pretty(entry).map_err(|e| Self::cache_err(&path, e))?;
        let tmp = path.with_extension(format!("tmp-{}", std::process::id()));
        std::fs::write(&tmp, bytes).map_err(|e| Self::cache_err(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| Self::cache_err(&path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub initial_backoff_ms: u64,
    pub max_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 5,
            initial_backoff_ms: 500,
            max_backoff_ms: 30_000,
        }
    }
}

impl RetryPolicy {
    pub fn backoff(&self, retry_index: u32) -> Duration {
        let factor = 1u64.checked_shl(retry_index.min(32)).unwrap_or(u64::MAX);
        let ms = self.initial_backoff_ms.saturating_mul(factor).min(self.max_backoff_ms);
        Duration::from_millis(ms)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmConfig {
    pub base_url: Option<String>,
    #[serde(skip_serializing)]
    pub api_key: Option<String>,
    pub default_model: Option<String>,
    pub max_in_flight: usize,
    pub timeout_secs: u64,
    pub retry: RetryPolicy,
    pub cache_dir: Option<PathBuf>,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            base_url: None,
            api_key: None,
            default_model: None,
            max_in_flight: 4,
            timeout_secs: 120,
            retry: RetryPolicy::default(),
            cache_dir: None,
        }
    }
}

impl LlmConfig {
    /// Fills unset endpoint fields from the environment.
    pub fn with_env(mut self) -> Self {
        if self.base_url.is_none() {
            self.base_url = std::env::var(ENV_BASE_URL).ok().filter(|s| !s.is_empty());
        }
        if self.api_key.is_none() {
            self.api_key = std::env::var(ENV_API_KEY).ok().filter(|s| !s.is_empty());
        }
        if self.default_model.is_none() {
            self.default_model = std::env::var(ENV_MODEL).ok().filter(|s| !s.is_empty());
        }
        self
    }
}

#[derive(Debug, Default)]
pub struct Counters {
    network_calls: AtomicU64,
    retries: AtomicU64,
    cache_hits: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClientStats {
    pub network_calls: u64,
    pub retries: u64,
    pub cache_hits: u64,
}

impl Counters {
    pub fn snapshot(&self) -> ClientStats {
        ClientStats {
            network_calls: self.network_calls.load(Ordering::SeqCst),
            retries: self.retries.load(Ordering::SeqCst),
            cache_hits: self.cache_hits.load(Ordering::SeqCst),
        }
    }
}

/// Retrying, rate-limited JSON POST shared by every upstream client.
#[derive(Debug, Clone)]
pub struct HttpTransport {
    http: reqwest::Client,
    retry: RetryPolicy,
    limiter: Arc<Semaphore>,
    counters: Arc<Counters>,
}

#[derive(Debug, Clone)]
pub struct PostOutcome {
    pub body: Value,
    pub attempts: u32,
}

enum Attempt {
    Done(Value),
    Transient(String, Option<Duration>),
}

impl HttpTransport {
    pub fn new(max_in_flight: usize, timeout: Duration, retry: RetryPolicy) -> Result<Self, LlmError> {
        let http = reqwest::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        Ok(Self {
            http,
            retry,
            limiter: Arc::new(Semaphore::new(max_in_flight.max(1))),
            counters: Arc::new(Counters::default()),
        })
    }

    pub fn stats(&self) -> ClientStats {
        self.counters.snapshot()
    }

    pub fn counters(&self) -> &Arc<Counters> {
        &self.counters
    }

    pub async fn post_json(&self, url: &str, body: &Value, bearer: Option<&str>) -> Result<PostOutcome, LlmError> {
        let max_attempts = self.retry.max_retries + 1;
        let mut last = String::new();
        for attempt in 0..max_attempts {
            if attempt > 0 {
                self.counters.retries.fetch_add(1, Ordering::SeqCst);
            }
            match self.attempt(url, body, bearer).await? {
                Attempt::Done(body) => {
                    return Ok(PostOutcome {
                        body,
                        attempts: attempt + 1,
                    })
                }
                Attempt::Transient(msg, retry_after) => {
                    tracing::warn!(url, attempt, "transient upstream failure: {msg}");
                    last = msg;
                    if attempt + 1 < max_attempts {
                        let wait = retry_after
                            .map(|d| d.min(Duration::from_millis(self.retry.max_backoff_ms)))
                            .unwrap_or_else(|| self.retry.backoff(attempt));
                        tokio::time::sleep(wait).await;
                    }
                }
            }
        }
        Err(LlmError::RetriesExhausted {
            attempts: max_attempts,
            last,
        })
    }

    async fn attempt(&self, url: &str, body: &Value, bearer: Option<&str>) -> Result<Attempt, LlmError> {
        let _permit = self
            .limiter
            .acquire()
            .await
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        self.counters.network_calls.fetch_add(1, Ordering::SeqCst);
        let mut req = self.http.post(url).json(body);
        if let Some(token) = bearer {
            req = req.bearer_auth(token);
        }
        let resp = match req.send().await {
            Ok(r) => r,
            Err(e) if e.is_timeout() || e.is_connect() => {
                return Ok(Attempt::Transient(e.to_string(), None))
            }
            Err(e) => return Err(LlmError::Transport(e.to_string())),
        };
        let status = resp.status();
        let retry_after = resp
            .headers()
            .get(reqwest::header::RETRY_AFTER)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.trim().parse::<u64>().ok())
            .map(Duration::from_secs);
        let text = match resp.text().await {
            Ok(t) => t,
            Err(e) if e.is_timeout() => return Ok(Attempt::Transient(e.to_string(), None)),
            Err(e) => return Err(LlmError::Transport(e.to_string())),
        };
        if status.as_u16() == 429 || status.is_server_error() {
            return Ok(Attempt::Transient(
                format!("status {}: {}", status.as_u16(), upstream_message(&text)),
                retry_after,
            ));
        }
        if !status.is_success() {
            return Err(LlmError::Permanent {
                status: status.as_u16(),
                message: upstream_message(&text),
            });
        }
        serde_json::from_str(&text)
            .map(Attempt::Done)
            .map_err(|e| LlmError::Payload(format!("{e}: {}", truncate(&text, 200))))
    }
}

fn upstream_message(text: &str) -> String {
    serde_json::from_str::<Value>(text)
        .ok()
        .and_then(|v| {
            v.pointer("/error/message")
                .or_else(|| v.get("message"))
                .and_then(Value::as_str)
                .map(str::to_string)
        })
        .unwrap_or_else(|| truncate(text, 200))
}

fn truncate(s: &str, n: usize) -> String {
    s.chars().take(n).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CachePolicy {
    /// Serve from cache when present.
    Use,
    /// Skip the cache read but overwrite the entry with the fresh response.
    Refresh,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    pub from_cache: bool,
    pub attempts: u32,
}

/// Anything that turns a prompt into text.
#[async_trait]
pub trait Completer: Send + Sync {
    async fn complete_with(&self, req: &ChatRequest, policy: CachePolicy) -> Result<Completion, LlmError>;

    async fn complete(&self, req: &ChatRequest) -> Result<String, LlmError> {
        Ok(self.complete_with(req, CachePolicy::Use).await?.text)
    }
}

pub struct LlmClient {
    config: LlmConfig,
    transport: HttpTransport,
    cache: Option<DiskCache>,
}

impl LlmClient {
    pub fn new(config: LlmConfig) -> Result<Self, LlmError> {
        let transport = HttpTransport::new(
            config.max_in_flight,
            Duration::from_secs(config.timeout_secs),
            config.retry,
        )?;
        let cache = config.cache_dir.clone().map(DiskCache::new);
        Ok(Self {
            config,
            transport,
            cache,
        })
    }

    pub fn config(&self) -> &LlmConfig {
        &self.config
    }

    pub fn transport(&self) -> &HttpTransport {
        &self.transport
    }

    pub fn stats(&self) -> ClientStats {
        self.transport.stats()
    }

    pub fn cache(&self) -> Option<&DiskCache> {
        self.cache.as_ref()
    }

    /// Model id to use when a stage does not name one.
    pub fn default_model(&self) -> Option<&str> {
        self.config.default_model.as_deref()
    }

    fn endpoint(&self) -> Result<String, LlmError> {
        let base = self.config.base_url.as_deref().ok_or(LlmError::NotConfigured)?;
        Ok(format!("{}/chat/completions", base.trim_end_matches('/')))
    }
}

pub fn chat_body(req: &ChatRequest) -> Value {
    json!({
        "model": req.model_id,
        "messages": [{"role": "user", "content": req.prompt}],
        "temperature": req.temperature,
        "max_tokens": req.max_output_tokens,
        "stream": false,
    })
}

pub fn response_text(body: &Value) -> Result<String, LlmError> {
    body.pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| LlmError::Payload("missing choices[0].message.content".into()))
}

#[async_trait]
impl Completer for LlmClient {
    async fn complete_with(&self, req: &ChatRequest, policy: CachePolicy) -> Result<Completion, LlmError> {
        req.check()?;
        let key = cache_key(req);
        if policy == CachePolicy::Use {
            if let Some(cache) = &self.cache {
                if let Some(entry) = cache.load(&key)? {
                    self.transport.counters.cache_hits.fetch_add(1, Ordering::SeqCst);
                    return Ok(Completion {
                        text: entry.response,
                        from_cache: true,
                        attempts: 0,
                    });
                }
            }
        }
        let url = self.endpoint()?;
        let out = self
            .transport
            .post_json(&url, &chat_body(req), self.config.api_key.as_deref())
            .await?;
        let text = response_text(&out.body)?;
        if let Some(cache) = &self.cache {
            cache
                .store(&CacheEntry {
                    key,
                    model_id: req.model_id.clone(),
                    temperature: req.temperature,
                    max_output_tokens: req.max_output_tokens,
                    request_tag: req.request_tag.clone(),
                    prompt: req.prompt.clone(),
                    response: text.clone(),
                })
                .await?;
        }
        Ok(Completion {
            text,
            from_cache: false,
            attempts: out.attempts,
        })
    }
}
