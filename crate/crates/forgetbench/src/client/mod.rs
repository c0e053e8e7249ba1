//! HTTP client for chat-completion and embedding endpoints, with retries,
//! bounded in-flight concurrency, and a content-addressed response cache,
//! plus a scriptable mock server for offline runs.
//!
//! Requests and responses use the common chat wire format: POST
//! `{base_url}/v1/chat/completions` with a user message whose content is a
//! list of text / image-url parts (images travel as base64 data URLs), and
//! POST `{base_url}/v1/embeddings` for text embeddings. Authorization is a
//! bearer token read from the environment variable named in the endpoint
//! config.

mod cache;
pub mod mock;
mod wire;

pub use cache::{cache_key, CachedPayload, DiskCache};
pub use mock::{mock_serve, MockScript, MockServer};

use crate::prompts::{JudgeParams, JudgePrompt};
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("transport error after {attempts} attempt(s): {source}")]
    Transport {
        attempts: u32,
        #[source]
        source: reqwest::Error,
    },
    #[error("HTTP {status} after {attempts} attempt(s): {body}")]
    Http {
        status: u16,
        attempts: u32,
        body: String,
    },
    #[error("malformed response body: {0}")]
    MalformedResponse(String),
    #[error("empty input text for embedding request")]
    EmptyEmbeddingInput,
    #[error("cache I/O: {0}")]
    Cache(#[from] std::io::Error),
    #[error("judge query failed for label {label:?}: {source}")]
    JudgeFailed {
        /// The undelivered prompt, so the caller can re-judge later.
        label: String,
        prediction: String,
        prompt_text: String,
        #[source]
        source: Box<ClientError>,
    },
    #[error("failed to build HTTP client: {0}")]
    Build(#[source] reqwest::Error),
}

/// Where and how to talk to a model endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model_name: String,
    /// Name of the environment variable holding the bearer token; no
    /// Authorization header is sent when unset or when the variable is
    /// absent. Secrets never appear in config values.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auth_token_env: Option<String>,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: f64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    /// Base delay of the exponential backoff between retries.
    #[serde(default = "default_backoff_ms")]
    pub retry_backoff_ms: u64,
}

fn default_timeout_secs() -> f64 {
    30.0
}
fn default_max_retries() -> u32 {
    3
}
fn default_parallelism() -> usize {
    4
}
fn default_backoff_ms() -> u64 {
    250
}

impl EndpointConfig {
    pub fn new(base_url: impl Into<String>, model_name: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model_name: model_name.into(),
            auth_token_env: None,
            timeout_secs: default_timeout_secs(),
            max_retries: default_max_retries(),
            parallelism: default_parallelism(),
            retry_backoff_ms: default_backoff_ms(),
        }
    }
}

/// Image payload attached to a classification query.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageData {
    pub bytes: Vec<u8>,
    /// Media type for the data URL, e.g. "image/png".
    pub media_type: String,
}

/// One chat query. Judge queries never carry an image.
#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub prompt: String,
    pub image: Option<ImageData>,
    pub params: JudgeParams,
    /// Optional system message; recorded in run metadata by the caller.
    pub system: Option<String>,
}

impl ChatRequest {
    pub fn text(prompt: impl Into<String>, params: JudgeParams) -> Self {
        Self {
            prompt: prompt.into(),
            image: None,
            params,
            system: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub total_tokens: u64,
}

/// A model reply. `text` is the first choice's message content, untrimmed.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelResponse {
    pub text: String,
    pub latency_ms: u64,
    pub usage: Option<TokenUsage>,
    pub from_cache: bool,
    /// Retries performed before success (0 on first-try success or cache
    /// hit).
    pub retries: u32,
}

/// Counting gate bounding concurrent network requests.
struct Gate {
    max: usize,
    count: Mutex<usize>,
    available: Condvar,
}

impl Gate {
    fn new(max: usize) -> Self {
        Self {
            max: max.max(1),
            count: Mutex::new(0),
            available: Condvar::new(),
        }
    }

    fn acquire(self: &Arc<Self>) -> GatePermit {
        let mut count = self.count.lock().expect("gate lock");
        while *count >= self.max {
            count = self.available.wait(count).expect("gate wait");
        }
        *count += 1;
        GatePermit {
            gate: Arc::clone(self),
        }
    }
}

struct GatePermit {
    gate: Arc<Gate>,
}

impl Drop for GatePermit {
    fn drop(&mut self) {
        let mut count = self.gate.count.lock().expect("gate lock");
        *count -= 1;
        self.gate.available.notify_one();
    }
}

struct ClientInner {
    config: EndpointConfig,
    http: reqwest::blocking::Client,
    cache: Option<DiskCache>,
    gate: Arc<Gate>,
}

/// Thread-safe endpoint client. Clones share the connection pool, the
/// response cache, and the concurrency gate.
#[derive(Clone)]
pub struct Client {
    inner: Arc<ClientInner>,
}

impl Client {
    pub fn new(config: EndpointConfig) -> Result<Self, ClientError> {
        Self::build(config, None)
    }

    /// Client with a disk cache rooted at `dir` (created if missing).
    /// Cache entries are keyed by (model, prompt, image, params), so
    /// interrupted runs resume without re-querying.
    pub fn with_cache(config: EndpointConfig, dir: &Path) -> Result<Self, ClientError> {
        let cache = DiskCache::open(dir)?;
        Self::build(config, Some(cache))
    }

    fn build(config: EndpointConfig, cache: Option<DiskCache>) -> Result<Self, ClientError> {
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(config.timeout_secs.max(0.001)))
            .build()
            .map_err(ClientError::Build)?;
        let gate = Arc::new(Gate::new(config.parallelism));
        Ok(Self {
            inner: Arc::new(ClientInner {
                config,
                http,
                cache,
                gate,
            }),
        })
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.inner.config
    }

    /// Send a chat completion, consulting the cache first. On a miss the
    /// response is persisted before returning.
    pub fn complete(&self, request: &ChatRequest) -> Result<ModelResponse, ClientError> {
        let key = cache_key(
            &self.inner.config.model_name,
            "chat",
            request.prompt.as_bytes(),
            request.image.as_ref().map(|i| i.bytes.as_slice()),
            &request.params,
        );
        if let Some(cache) = &self.inner.cache {
            if let Some(CachedPayload::Chat { text, usage }) = cache.get(&key)? {
                return Ok(ModelResponse {
                    text,
                    latency_ms: 0,
                    usage,
                    from_cache: true,
                    retries: 0,
                });
            }
        }
        let body = wire::chat_body(&self.inner.config.model_name, request);
        let url = format!(
            "{}/v1/chat/completions",
            self.inner.config.base_url.trim_end_matches('/')
        );
        let started = Instant::now();
        let (value, retries) = self.post_json(&url, &body)?;
        let (text, usage) = wire::parse_chat_response(&value)?;
        if let Some(cache) = &self.inner.cache {
            cache.put(
                &key,
                &CachedPayload::Chat {
                    text: text.clone(),
                    usage,
                },
            )?;
        }
        Ok(ModelResponse {
            text,
            latency_ms: started.elapsed().as_millis() as u64,
            usage,
            from_cache: false,
            retries,
        })
    }

    /// Send a judge query. Failures are wrapped with the undelivered prompt
    /// so the record can be re-judged later.
    pub fn judge_complete(
        &self,
        prompt: &JudgePrompt,
        params: &JudgeParams,
    ) -> Result<ModelResponse, ClientError> {
        let request = ChatRequest {
            prompt: prompt.text.clone(),
            image: None,
            params: params.clone(),
            system: None,
        };
        self.complete(&request).map_err(|source| match source {
            err @ ClientError::JudgeFailed { .. } => err,
            other => ClientError::JudgeFailed {
                label: prompt.label.clone(),
                prediction: prompt.prediction.clone(),
                prompt_text: prompt.text.clone(),
                source: Box::new(other),
            },
        })
    }

    /// Fetch a text embedding, cached like completions. The vector is
    /// returned exactly as the endpoint sent it (no normalization).
    pub fn fetch_embedding(&self, text: &str) -> Result<Vec<f64>, ClientError> {
        if text.is_empty() {
            return Err(ClientError::EmptyEmbeddingInput);
        }
        let key = cache_key(
            &self.inner.config.model_name,
            "embedding",
            text.as_bytes(),
            None,
            &JudgeParams::default(),
        );
        if let Some(cache) = &self.inner.cache {
            if let Some(CachedPayload::Embedding { vector }) = cache.get(&key)? {
                return Ok(vector);
            }
        }
        let body = wire::embedding_body(&self.inner.config.model_name, text);
        let url = format!(
            "{}/v1/embeddings",
            self.inner.config.base_url.trim_end_matches('/')
        );
        let (value, _) = self.post_json(&url, &body)?;
        let vector = wire::parse_embedding_response(&value)?;
        if let Some(cache) = &self.inner.cache {
            cache.put(
                &key,
                &CachedPayload::Embedding {
                    vector: vector.clone(),
                },
            )?;
        }
        Ok(vector)
    }

    /// POST with bounded concurrency and retries. Retryable: transport
    /// errors, 429, and 5xx. Other 4xx fail immediately.
    fn post_json(
        &self,
        url: &str,
        body: &serde_json::Value,
    ) -> Result<(serde_json::Value, u32), ClientError> {
        let _permit = self.inner.gate.acquire();
        let token = self
            .inner
            .config
            .auth_token_env
            .as_ref()
            .and_then(|name| std::env::var(name).ok());
        let max_attempts = self.inner.config.max_retries + 1;
        let mut attempt = 0;
        loop {
            attempt += 1;
            let mut builder = self.inner.http.post(url).json(body);
            if let Some(token) = &token {
                builder = builder.bearer_auth(token);
            }
            let retryable_failure = match builder.send() {
                Ok(response) => {
                    let status = response.status();
                    if status.is_success() {
                        let value: serde_json::Value = response.json().map_err(|e| {
                            ClientError::MalformedResponse(format!("invalid JSON: {e}"))
                        })?;
                        return Ok((value, attempt - 1));
                    }
                    let retryable = status.as_u16() == 429 || status.is_server_error();
                    if !retryable || attempt >= max_attempts {
                        return Err(ClientError::Http {
                            status: status.as_u16(),
                            attempts: attempt,
                            body: response.text().unwrap_or_default(),
                        });
                    }
                    None
                }
                Err(source) => {
                    if attempt >= max_attempts {
                        return Err(ClientError::Transport {
                            attempts: attempt,
                            source,
                        });
                    }
                    Some(source)
                }
            };
            drop(retryable_failure);
            self.backoff(attempt);
        }
    }

    /// Exponential backoff with +-50% jitter.
    fn backoff(&self, attempt: u32) {
        use rand::Rng;
        let base = self.inner.config.retry_backoff_ms.max(1);
        let exp = base.saturating_mul(1u64 << (attempt - 1).min(10));
        let jitter = rand::thread_rng().gen_range(0.5..1.5);
        std::thread::sleep(Duration::from_millis(
            ((exp as f64) * jitter).min(60_000.0) as u64
        ));
    }
}
