//! Uniform access to chat-completion models.
//!
//! A [`Gateway`] wraps a [`ChatBackend`] (live OpenAI-compatible HTTP or the
//! scripted [`MockBackend`]) with request validation, bounded retries,
//! an optional persistent response cache and a cap on in-flight requests.

mod cache;
mod http;
mod mock;

use std::fmt;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use cache::ResponseCache;
pub use http::HttpBackend;
pub use mock::{MockBackend, MockFailure, MockMatcher, MockReply, MockScript};

/// Default sampling temperature for task-model calls.
pub const TASK_TEMPERATURE: f64 = 0.0;
/// Default sampling temperature for backward-engine calls.
pub const BACKWARD_TEMPERATURE: f64 = 0.7;
pub const TASK_MAX_TOKENS: u32 = 1024;
pub const BACKWARD_MAX_TOKENS: u32 = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
        }
    }

    pub fn system(content: impl Into<String>) -> Self {
        Self::new(Role::System, content)
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self::new(Role::User, content)
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self::new(Role::Assistant, content)
    }
}

/// Checks the message-list invariants shared by every request: non-empty,
/// no empty contents, at most one system message and only in first position.
pub fn validate_messages(messages: &[ChatMessage]) -> Result<(), String> {
    if messages.is_empty() {
        return Err("message list is empty".into());
    }
    for (i, m) in messages.iter().enumerate() {
        if m.content.is_empty() {
            return Err(format!("message {i} ({}) has empty content", m.role));
        }
        if m.role == Role::System && i != 0 {
            return Err(format!(
                "system message at position {i}; only position 0 is allowed"
            ));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model_id: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl ChatRequest {
    pub fn new(model_id: impl Into<String>, messages: Vec<ChatMessage>) -> Self {
        Self {
            model_id: model_id.into(),
            messages,
            temperature: TASK_TEMPERATURE,
            max_tokens: TASK_MAX_TOKENS,
            seed: None,
        }
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    pub fn with_max_tokens(mut self, max_tokens: u32) -> Self {
        self.max_tokens = max_tokens;
        self
    }

    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.model_id.is_empty() {
            return Err(GatewayError::InvalidRequest("model_id is empty".into()));
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(GatewayError::InvalidRequest(format!(
                "temperature must be a finite value >= 0, got {}",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(GatewayError::InvalidRequest(
                "max_tokens must be positive".into(),
            ));
        }
        validate_messages(&self.messages).map_err(GatewayError::InvalidRequest)
    }

    /// Content of the leading system message, if any.
    pub fn system_text(&self) -> Option<&str> {
        self.messages
            .first()
            .filter(|m| m.role == Role::System)
            .map(|m| m.content.as_str())
    }

    /// Content of the final user message, if any.
    pub fn last_user_text(&self) -> Option<&str> {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
    }
}

/// Deterministic hex digest of everything that influences a completion.
///
/// The digest is taken over a fixed-order canonical JSON encoding, so it does
/// not depend on how a caller happened to serialize the request.
pub fn cache_key(request: &ChatRequest) -> String {
    #[derive(Serialize)]
    struct Canonical<'a> {
        model_id: &'a str,
        messages: Vec<[&'a str; 2]>,
        temperature: f64,
        max_tokens: u32,
        seed: Option<u64>,
    }
    let canonical = Canonical {
        model_id: &request.model_id,
        messages: request
            .messages
            .iter()
            .map(|m| {
                let role = match m.role {
                    Role::System => "system",
                    Role::User => "user",
                    Role::Assistant => "assistant",
                };
                [role, m.content.as_str()]
            })
            .collect(),
        temperature: request.temperature,
        max_tokens: request.max_tokens,
        seed: request.seed,
    };
    let bytes = serde_json::to_vec(&canonical).expect("canonical request encodes");
    hex::encode(Sha256::digest(&bytes))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub content: String,
    pub model_id: String,
    #[serde(default)]
    pub usage: Usage,
    #[serde(default)]
    pub from_cache: bool,
    /// Set when the model explicitly refused; `content` is then empty.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refusal: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Http,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    #[serde(default)]
    pub base_url: Option<String>,
    /// Name of the environment variable holding the bearer token.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_retry_limit")]
    pub retry_limit: u32,
    #[serde(default = "default_timeout_secs")]
    pub request_timeout_secs: u64,
    /// Base delay of the exponential backoff between retries.
    #[serde(default = "default_backoff_ms")]
    pub backoff_base_ms: u64,
    /// Maximum simultaneous live requests through this gateway.
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    #[serde(default)]
    pub cache_path: Option<PathBuf>,
}

fn default_retry_limit() -> u32 {
    3
}
fn default_timeout_secs() -> u64 {
    120
}
fn default_backoff_ms() -> u64 {
    500
}
fn default_max_in_flight() -> usize {
    8
}

impl BackendConfig {
    pub fn mock() -> Self {
        Self {
            kind: BackendKind::Mock,
            base_url: None,
            api_key_env: None,
            retry_limit: default_retry_limit(),
            request_timeout_secs: default_timeout_secs(),
            backoff_base_ms: 0,
            max_in_flight: default_max_in_flight(),
            cache_path: None,
        }
    }

    pub fn http(base_url: impl Into<String>, api_key_env: impl Into<String>) -> Self {
        Self {
            kind: BackendKind::Http,
            base_url: Some(base_url.into()),
            api_key_env: Some(api_key_env.into()),
            ..Self::mock()
        }
        .with_backoff_ms(default_backoff_ms())
    }

    pub fn with_backoff_ms(mut self, ms: u64) -> Self {
        self.backoff_base_ms = ms;
        self
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.kind == BackendKind::Http {
            if self.base_url.as_deref().is_none_or(str::is_empty) {
                return Err(GatewayError::Config(
                    "http backend requires base_url".into(),
                ));
            }
            if self.api_key_env.as_deref().is_none_or(str::is_empty) {
                return Err(GatewayError::Config(
                    "http backend requires api_key_env".into(),
                ));
            }
        }
        if self.max_in_flight == 0 {
            return Err(GatewayError::Config(
                "max_in_flight must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn request_timeout(&self) -> Duration {
        Duration::from_secs(self.request_timeout_secs)
    }
}

/// How a single backend attempt failed. Only `Transient` is retried.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendFailure {
    #[error("transient failure: {0}")]
    Transient(String),
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("request rejected with status {status}: {body}")]
    Rejected { status: u16, body: String },
    #[error("malformed response: {0}")]
    Protocol(String),
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("authentication error: {0}")]
    Auth(String),
    #[error("transport error after {attempts} attempt(s): {last}")]
    Transport { attempts: u32, last: String },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("request rejected with status {status}: {body}")]
    Rejected { status: u16, body: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("cache i/o error: {0}")]
    Cache(#[from] std::io::Error),
}

impl GatewayError {
    /// Errors that will recur for every request and should abort a run.
    pub fn is_fatal(&self) -> bool {
        matches!(
            self,
            GatewayError::Auth(_) | GatewayError::Config(_) | GatewayError::Cache(_)
        )
    }
}

/// One attempt at a completion. Implementations must be callable from many
/// threads at once.
pub trait ChatBackend: Send + Sync {
    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, BackendFailure>;
}

impl<T: ChatBackend + ?Sized> ChatBackend for Arc<T> {
    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, BackendFailure> {
        (**self).send(request)
    }
}

/// Counting semaphore bounding live backend requests.
struct InFlightLimit {
    max: usize,
    used: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a InFlightLimit);

impl InFlightLimit {
    fn new(max: usize) -> Self {
        Self {
            max,
            used: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut used = self.used.lock().expect("in-flight lock");
        while *used >= self.max {
            used = self.freed.wait(used).expect("in-flight lock");
        }
        *used += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.used.lock().expect("in-flight lock") -= 1;
        self.0.freed.notify_one();
    }
}

/// Counters describing what a gateway has done so far.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatewayStats {
    /// `complete` calls that passed validation.
    pub requests: u64,
    pub cache_hits: u64,
    /// Individual backend attempts, retries included.
    pub backend_attempts: u64,
}

#[derive(Default)]
struct StatCounters {
    requests: AtomicU64,
    cache_hits: AtomicU64,
    backend_attempts: AtomicU64,
}

pub struct Gateway {
    backend: Arc<dyn ChatBackend>,
    cache: Option<Arc<ResponseCache>>,
    retry_limit: u32,
    backoff_base: Duration,
    limit: InFlightLimit,
    stats: StatCounters,
}

impl fmt::Debug for Gateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Gateway")
            .field("retry_limit", &self.retry_limit)
            .field("backoff_base", &self.backoff_base)
            .field("cached", &self.cache.is_some())
            .field("stats", &self.stats())
            .finish()
    }
}

impl Gateway {
    /// Builds a gateway around an explicit backend, taking retry, backoff,
    /// concurrency and cache settings from `config`.
    pub fn new(
        backend: Arc<dyn ChatBackend>,
        config: &BackendConfig,
    ) -> Result<Self, GatewayError> {
        config.validate()?;
        let cache = match &config.cache_path {
            Some(path) => Some(Arc::new(ResponseCache::open(path)?)),
            None => None,
        };
        Ok(Self {
            backend,
            cache,
            retry_limit: config.retry_limit,
            backoff_base: Duration::from_millis(config.backoff_base_ms),
            limit: InFlightLimit::new(config.max_in_flight),
            stats: StatCounters::default(),
        })
    }

    /// Builds an HTTP gateway. Mock gateways need a script and are built with
    /// [`Gateway::new`].
    pub fn http(config: &BackendConfig) -> Result<Self, GatewayError> {
        config.validate()?;
        if config.kind != BackendKind::Http {
            return Err(GatewayError::Config(
                "Gateway::http called with a non-http backend config".into(),
            ));
        }
        let backend = HttpBackend::from_config(config)?;
        Self::new(Arc::new(backend), config)
    }

    /// Replaces the cache (shared caches let several gateways reuse one file).
    pub fn with_cache(mut self, cache: Option<Arc<ResponseCache>>) -> Self {
        self.cache = cache;
        self
    }

    pub fn cache(&self) -> Option<&Arc<ResponseCache>> {
        self.cache.as_ref()
    }

    pub fn stats(&self) -> GatewayStats {
        GatewayStats {
            requests: self.stats.requests.load(Ordering::Relaxed),
            cache_hits: self.stats.cache_hits.load(Ordering::Relaxed),
            backend_attempts: self.stats.backend_attempts.load(Ordering::Relaxed),
        }
    }

    /// Returns the completion for `request`, consulting the cache first and
    /// retrying transient backend failures with exponential backoff.
    pub fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        request.validate()?;
        self.stats.requests.fetch_add(1, Ordering::Relaxed);
        let digest = cache_key(request);

        if let Some(cache) = &self.cache {
            if let Some(mut hit) = cache.get(&digest) {
                self.stats.cache_hits.fetch_add(1, Ordering::Relaxed);
                hit.from_cache = true;
                return Ok(hit);
            }
        }

        let response = {
            let _permit = self.limit.acquire();
            self.send_with_retries(request)?
        };

        if let Some(cache) = &self.cache {
            cache.put(&digest, &response)?;
        }
        Ok(response)
    }

    fn send_with_retries(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let mut attempt: u32 = 0;
        loop {
            self.stats.backend_attempts.fetch_add(1, Ordering::Relaxed);
            match self.backend.send(request) {
                Ok(mut response) => {
                    response.from_cache = false;
                    return Ok(response);
                }
                Err(BackendFailure::Transient(msg)) => {
                    if attempt >= self.retry_limit {
                        return Err(GatewayError::Transport {
                            attempts: attempt + 1,
                            last: msg,
                        });
                    }
                    let delay = self.backoff_base.saturating_mul(1u32 << attempt.min(16));
                    tracing::debug!(attempt, ?delay, "transient failure, retrying: {msg}");
                    if !delay.is_zero() {
                        std::thread::sleep(delay);
                    }
                    attempt += 1;
                }
                Err(BackendFailure::Auth(msg)) => return Err(GatewayError::Auth(msg)),
                Err(BackendFailure::Protocol(msg)) => return Err(GatewayError::Protocol(msg)),
                Err(BackendFailure::Rejected { status, body }) => {
                    return Err(GatewayError::Rejected { status, body })
                }
            }
        }
    }
}
