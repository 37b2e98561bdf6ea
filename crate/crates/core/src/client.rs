//! Chat-completions client for vision-capable judge endpoints.
//!
//! Requests use the common `POST {base_url}/chat/completions` wire format
//! with images inlined as `image_url` data URLs. Transient failures (429,
//! 5xx, timeouts, connection errors) are retried with exponential backoff and
//! jitter; 401/403 fail immediately. A semaphore bounds in-flight requests.

use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use parking_lot::Mutex;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;
use tokio::sync::Semaphore;

use crate::images::{self, ImageError};
use crate::record::ImageRef;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Prices {
    /// Cost per 1000 prompt tokens.
    pub input_per_1k: f64,
    /// Cost per 1000 completion tokens.
    pub output_per_1k: f64,
}

#[derive(Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model_name: String,
    #[serde(skip_serializing)]
    pub api_key: String,
    pub max_retries: u32,
    pub request_timeout_secs: f64,
    pub max_concurrency: usize,
    pub temperature: f64,
    pub backoff_base_secs: f64,
    pub backoff_cap_secs: f64,
    pub prices: Option<Prices>,
    pub transcript_dir: Option<PathBuf>,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        Self {
            base_url: String::new(),
            model_name: String::new(),
            api_key: String::new(),
            max_retries: 5,
            request_timeout_secs: 120.0,
            max_concurrency: 4,
            temperature: 0.0,
            backoff_base_secs: 1.0,
            backoff_cap_secs: 60.0,
            prices: None,
            transcript_dir: None,
        }
    }
}

impl std::fmt::Debug for EndpointConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EndpointConfig")
            .field("base_url", &self.base_url)
            .field("model_name", &self.model_name)
            .field("api_key", &if self.api_key.is_empty() { "" } else { "<redacted>" })
            .field("max_retries", &self.max_retries)
            .field("request_timeout_secs", &self.request_timeout_secs)
            .field("max_concurrency", &self.max_concurrency)
            .field("temperature", &self.temperature)
            .finish_non_exhaustive()
    }
}

impl EndpointConfig {
    pub fn validate(&self) -> Result<(), ClientError> {
        let bad = |m: &str| Err(ClientError::Config(m.to_string()));
        if !(self.base_url.starts_with("http://") || self.base_url.starts_with("https://")) {
            return bad("base_url must be an http(s) URL");
        }
        if self.model_name.trim().is_empty() {
            return bad("model_name is empty");
        }
        if self.max_concurrency < 1 {
            return bad("max_concurrency must be at least 1");
        }
        if !(self.request_timeout_secs > 0.0) {
            return bad("request_timeout_secs must be positive");
        }
        if !(self.backoff_base_secs >= 0.0 && self.backoff_cap_secs >= self.backoff_base_secs) {
            return bad("backoff settings must satisfy 0 <= base <= cap");
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return bad("temperature must be a non-negative number");
        }
        Ok(())
    }

    /// Delay before retry number `attempt` (0-based): half the exponential
    /// step plus uniform jitter over the other half.
    pub fn backoff(&self, attempt: u32) -> Duration {
        let step = (self.backoff_base_secs * 2f64.powi(attempt.min(30) as i32)).min(self.backoff_cap_secs);
        let jitter = rand::rng().random_range(0.0..=1.0);
        Duration::from_secs_f64(step * (0.5 + 0.5 * jitter))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub text: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub images: Vec<ImageRef>,
}

impl ChatMessage {
    pub fn user(text: impl Into<String>) -> Self {
        Self { role: Role::User, text: text.into(), images: Vec::new() }
    }

    pub fn user_with_images(text: impl Into<String>, images: Vec<ImageRef>) -> Self {
        Self { role: Role::User, text: text.into(), images }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttemptLog {
    pub attempt: u32,
    pub outcome: String,
}

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("invalid endpoint configuration: {0}")]
    Config(String),
    #[error("bad attachment: {0}")]
    Input(#[from] ImageError),
    #[error("authentication rejected (HTTP {status}): {body}")]
    Auth { status: u16, body: String },
    #[error("request rejected (HTTP {status}): {body}")]
    Rejected { status: u16, body: String },
    #[error("unexpected response: {0}")]
    Protocol(String),
    #[error("gave up after {} attempts: {}", attempts.len(), attempts.last().map(|a| a.outcome.as_str()).unwrap_or(""))]
    Transport { attempts: Vec<AttemptLog> },
}

impl ClientError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, ClientError::Transport { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsageRecord {
    pub request_id: u64,
    pub attempts: u32,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub cost: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UsageSnapshot {
    pub request_count: u64,
    pub attempt_count: u64,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub estimated_cost: f64,
    pub records: Vec<UsageRecord>,
}

/// Accumulated usage across all requests made through one client.
#[derive(Debug, Default)]
pub struct UsageLedger {
    inner: Mutex<UsageSnapshot>,
}

impl UsageLedger {
    pub fn record(&self, r: UsageRecord) {
        let mut s = self.inner.lock();
        s.request_count += 1;
        s.attempt_count += u64::from(r.attempts);
        s.input_tokens += r.input_tokens;
        s.output_tokens += r.output_tokens;
        s.estimated_cost += r.cost;
        s.records.push(r);
    }

    /// Counts attempts of a request that ultimately failed.
    pub fn record_failed_attempts(&self, attempts: u32) {
        self.inner.lock().attempt_count += u64::from(attempts);
    }

    pub fn snapshot(&self) -> UsageSnapshot {
        self.inner.lock().clone()
    }
}

/// Anything that answers chat requests: the HTTP client, the in-process
/// oracle judge, or a test stub.
#[async_trait]
pub trait ChatBackend: Send + Sync {
    async fn chat(&self, messages: &[ChatMessage]) -> Result<String, ClientError>;
}

#[async_trait]
impl<T: ChatBackend + ?Sized> ChatBackend for Arc<T> {
    async fn chat(&self, messages: &[ChatMessage]) -> Result<String, ClientError> {
        (**self).chat(messages).await
    }
}

pub struct HttpClient {
    config: EndpointConfig,
    http: reqwest::Client,
    permits: Semaphore,
    ledger: Arc<UsageLedger>,
    next_id: AtomicU64,
}

enum Attempt {
    Done { text: String, input_tokens: u64, output_tokens: u64 },
    Retry { outcome: String, wait: Option<Duration> },
    Fatal(ClientError),
}

impl HttpClient {
    pub fn new(config: EndpointConfig) -> Result<Self, ClientError> {
        config.validate()?;
        let http = reqwest::Client::builder()
            .timeout(Duration::from_secs_f64(config.request_timeout_secs))
            .build()
            .map_err(|e| ClientError::Config(e.to_string()))?;
        Ok(Self {
            permits: Semaphore::new(config.max_concurrency),
            config,
            http,
            ledger: Arc::new(UsageLedger::default()),
            next_id: AtomicU64::new(1),
        })
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.config
    }

    pub fn ledger(&self) -> Arc<UsageLedger> {
        self.ledger.clone()
    }

    fn url(&self) -> String {
        format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'))
    }

    /// Request body in the chat-completions wire format.
    pub fn request_body(&self, messages: &[ChatMessage]) -> Result<Value, ClientError> {
        let mut out = Vec::with_capacity(messages.len());
        for m in messages {
            let content = if m.images.is_empty() {
                json!(m.text)
            } else {
                let mut parts = vec![json!({"type": "text", "text": m.text})];
                for img in &m.images {
                    let url = images::encode_image(img)?;
                    parts.push(json!({"type": "image_url", "image_url": {"url": url}}));
                }
                Value::Array(parts)
            };
            out.push(json!({"role": m.role, "content": content}));
        }
        Ok(json!({
            "model": self.config.model_name,
            "temperature": self.config.temperature,
            "messages": out,
        }))
    }

    async fn attempt(&self, body: &Value) -> Attempt {
        let _permit = self.permits.acquire().await.expect("semaphore is never closed");
        let mut req = self.http.post(self.url()).json(body);
        if !self.config.api_key.is_empty() {
            req = req.bearer_auth(&self.config.api_key);
        }
        let resp = match req.send().await {
            Ok(r) => r,
            Err(e) if e.is_timeout() => return Attempt::Retry { outcome: "timeout".into(), wait: None },
            Err(e) => return Attempt::Retry { outcome: format!("connection error: {e}"), wait: None },
        };
        let status = resp.status().as_u16();
        let retry_after = resp
            .headers()
            .get("retry-after")
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.trim().parse::<f64>().ok())
            .map(|s| Duration::from_secs_f64(s.clamp(0.0, self.config.backoff_cap_secs)));
        let text = match resp.text().await {
            Ok(t) => t,
            Err(e) if e.is_timeout() => return Attempt::Retry { outcome: "timeout".into(), wait: None },
            Err(e) => return Attempt::Retry { outcome: format!("body read error: {e}"), wait: None },
        };
        match status {
            200..=299 => match parse_completion(&text) {
                Ok((content, i, o)) => Attempt::Done { text: content, input_tokens: i, output_tokens: o },
                Err(e) => Attempt::Fatal(e),
            },
            401 | 403 => Attempt::Fatal(ClientError::Auth { status, body: text }),
            408 | 429 | 500..=599 => Attempt::Retry { outcome: format!("HTTP {status}"), wait: retry_after },
            _ => Attempt::Fatal(ClientError::Rejected { status, body: text }),
        }
    }

    fn mirror(&self, id: u64, body: &Value, result: &Result<String, ClientError>) {
        let Some(dir) = &self.config.transcript_dir else {
            return;
        };
        let mut request = body.clone();
        strip_data_urls(&mut request);
        let entry = json!({
            "request_id": id,
            "request": request,
            "response": result.as_ref().ok(),
            "error": result.as_ref().err().map(|e| e.to_string()),
        });
        let path = dir.join(format!("{id:06}.json"));
        let write = std::fs::create_dir_all(dir)
            .and_then(|_| std::fs::write(&path, serde_json::to_vec_pretty(&entry).unwrap_or_default()));
        if let Err(e) = write {
            tracing::warn!("could not mirror transcript to {}: {e}", path.display());
        }
    }
}

fn strip_data_urls(v: &mut Value) {
    match v {
        Value::String(s) if s.starts_with("data:") => {
            let mime = s.split(';').next().unwrap_or("data:").to_string();
            *s = format!("{mime};base64,<{} bytes>", s.len());
        }
        Value::Array(a) => a.iter_mut().for_each(strip_data_urls),
        Value::Object(o) => o.values_mut().for_each(strip_data_urls),
        _ => {}
    }
}

fn parse_completion(body: &str) -> Result<(String, u64, u64), ClientError> {
    let v: Value = serde_json::from_str(body).map_err(|e| ClientError::Protocol(format!("response is not JSON: {e}")))?;
    let content = v
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| ClientError::Protocol("response has no choices[0].message.content".into()))?;
    let tokens = |k: &str| v.pointer(&format!("/usage/{k}")).and_then(Value::as_u64).unwrap_or(0);
    Ok((content.to_string(), tokens("prompt_tokens"), tokens("completion_tokens")))
}

#[async_trait]
impl ChatBackend for HttpClient {
    async fn chat(&self, messages: &[ChatMessage]) -> Result<String, ClientError> {
        let body = self.request_body(messages)?;
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        let mut log = Vec::new();
        let mut attempt = 0u32;
        let result = loop {
            attempt += 1;
            match self.attempt(&body).await {
                Attempt::Done { text, input_tokens, output_tokens } => {
                    let cost = self
                        .config
                        .prices
                        .map(|p| {
                            input_tokens as f64 / 1000.0 * p.input_per_1k
                                + output_tokens as f64 / 1000.0 * p.output_per_1k
                        })
                        .unwrap_or(0.0);
                    self.ledger.record(UsageRecord {
                        request_id: id,
                        attempts: attempt,
                        input_tokens,
                        output_tokens,
                        cost,
                    });
                    break Ok(text);
                }
                Attempt::Fatal(e) => {
                    self.ledger.record_failed_attempts(attempt);
                    break Err(e);
                }
                Attempt::Retry { outcome, wait } => {
                    tracing::debug!(request_id = id, attempt, %outcome, "retryable failure");
                    log.push(AttemptLog { attempt, outcome });
                    if attempt > self.config.max_retries {
                        self.ledger.record_failed_attempts(attempt);
                        break Err(ClientError::Transport { attempts: std::mem::take(&mut log) });
                    }
                    let delay = wait.unwrap_or_else(|| self.config.backoff(attempt - 1));
                    tokio::time::sleep(delay).await;
                }
            }
        };
        self.mirror(id, &body, &result);
        result
    }
}
