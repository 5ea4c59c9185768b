//! Uniform access to foundation models for completion and embedding.
//!
//! A [`Gateway`] owns one [`FmConfig`] and one [`Backend`]. It validates
//! inputs, applies the in-flight and rate limits, retries transient
//! failures, and keeps per-gateway call counters. Backends only translate a
//! single attempt into a [`Completion`] or [`Embedding`].

mod http;
mod limiter;
pub mod mock;

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use http::HttpBackend;
use limiter::Limiter;
pub use mock::{MockBackend, MockFallback, MockMatch, MockRule, MockSpec};

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(tag = "error", content = "detail", rename_all = "snake_case")]
pub enum GatewayError {
    #[error("request timed out")]
    Timeout,
    #[error("rate limited")]
    RateLimited,
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("transport failure: {0}")]
    TransportFailure(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("invalid FM configuration: {0}")]
    Config(String),
}

impl GatewayError {
    fn is_transient(&self) -> bool {
        matches!(self, GatewayError::Timeout | GatewayError::RateLimited | GatewayError::TransportFailure(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FmRole {
    Release,
    Evaluator,
    Embedding,
}

impl fmt::Display for FmRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FmRole::Release => "release",
            FmRole::Evaluator => "evaluator",
            FmRole::Embedding => "embedding",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Http,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    /// Sleep before attempt `i + 1`; the last entry repeats.
    pub backoff_ms: Vec<u64>,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { max_attempts: 3, backoff_ms: vec![500, 1000, 2000] }
    }
}

impl RetryPolicy {
    fn delay(&self, attempt: u32) -> Duration {
        let ms = self.backoff_ms.get(attempt as usize).or(self.backoff_ms.last()).copied().unwrap_or(0);
        Duration::from_millis(ms)
    }
}

fn default_top_p() -> f64 {
    1.0
}
fn default_max_tokens() -> u32 {
    512
}
fn default_timeout_ms() -> u64 {
    60_000
}
fn default_in_flight() -> usize {
    8
}
fn default_dim() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FmConfig {
    pub role: FmRole,
    pub backend: BackendKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    pub model_id: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_top_p")]
    pub top_p: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default)]
    pub retry: RetryPolicy,
    /// Name of the environment variable holding the API key.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub requests_per_second: Option<f64>,
    /// Embedding dimension produced by the mock backend.
    #[serde(default = "default_dim")]
    pub embedding_dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mock: Option<MockSpec>,
}

impl FmConfig {
    pub fn mock(role: FmRole, model_id: &str) -> Self {
        FmConfig {
            role,
            backend: BackendKind::Mock,
            endpoint: None,
            model_id: model_id.into(),
            temperature: 0.0,
            top_p: 1.0,
            seed: Some(0),
            max_tokens: default_max_tokens(),
            timeout_ms: default_timeout_ms(),
            retry: RetryPolicy { max_attempts: 3, backoff_ms: vec![0] },
            api_key_env: None,
            max_in_flight: default_in_flight(),
            requests_per_second: None,
            embedding_dim: default_dim(),
            mock: Some(MockSpec::default()),
        }
    }

    pub fn http(role: FmRole, endpoint: &str, model_id: &str) -> Self {
        FmConfig {
            backend: BackendKind::Http,
            endpoint: Some(endpoint.into()),
            mock: None,
            retry: RetryPolicy::default(),
            ..FmConfig::mock(role, model_id)
        }
    }

    pub fn with_mock(mut self, spec: MockSpec) -> Self {
        self.mock = Some(spec);
        self
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        let bad = |m: &str| Err(GatewayError::Config(m.to_string()));
        if self.model_id.is_empty() {
            return bad("model_id is empty");
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be >= 0");
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return bad("top_p must be in (0, 1]");
        }
        if self.max_tokens == 0 {
            return bad("max_tokens must be positive");
        }
        if self.retry.max_attempts == 0 {
            return bad("retry.max_attempts must be positive");
        }
        if self.max_in_flight == 0 {
            return bad("max_in_flight must be positive");
        }
        if matches!(self.requests_per_second, Some(r) if r.is_nan() || r <= 0.0) {
            return bad("requests_per_second must be positive");
        }
        match self.backend {
            BackendKind::Http => {
                if self.endpoint.as_deref().is_none_or(str::is_empty) {
                    return bad("http backend requires an endpoint");
                }
            }
            BackendKind::Mock => {
                if self.embedding_dim == 0 {
                    return bad("embedding_dim must be positive");
                }
            }
        }
        Ok(())
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_millis(self.timeout_ms)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    #[serde(default)]
    pub wall_latency: Duration,
    pub backend_fingerprint: String,
}

impl Completion {
    pub fn total_tokens(&self) -> u64 {
        self.prompt_tokens + self.completion_tokens
    }

    /// Copy with latency zeroed; the deterministic part of a completion.
    pub fn without_latency(&self) -> Completion {
        Completion { wall_latency: Duration::ZERO, ..self.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub vector: Vec<f64>,
}

impl Embedding {
    pub fn new(vector: Vec<f64>) -> Result<Self, GatewayError> {
        if vector.is_empty() || vector.iter().any(|v| !v.is_finite()) {
            return Err(GatewayError::MalformedResponse("embedding must be non-empty and finite".into()));
        }
        Ok(Embedding { vector })
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

/// Whitespace-delimited token count, used when a backend omits usage.
pub fn count_tokens_fallback(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

/// One attempt against a concrete model provider.
pub trait Backend: Send + Sync {
    fn complete(&self, config: &FmConfig, prompt: &str) -> Result<Completion, GatewayError>;
    fn embed(&self, config: &FmConfig, text: &str) -> Result<Embedding, GatewayError>;
    fn fingerprint(&self) -> String;
}

/// Anything that can answer a completion request: a gateway, or a wrapper
/// that records or replays calls.
pub trait Fm: Send + Sync {
    fn complete(&self, prompt: &str) -> Result<Completion, GatewayError>;
}

impl Fm for Gateway {
    fn complete(&self, prompt: &str) -> Result<Completion, GatewayError> {
        Gateway::complete(self, prompt)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallCounts {
    pub completions: u64,
    pub embeddings: u64,
    pub attempts: u64,
    pub failures: u64,
}

#[derive(Default)]
struct Counters {
    completions: AtomicU64,
    embeddings: AtomicU64,
    attempts: AtomicU64,
    failures: AtomicU64,
}

pub struct Gateway {
    config: FmConfig,
    backend: Arc<dyn Backend>,
    counters: Counters,
    limiter: Limiter,
}

impl fmt::Debug for Gateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Gateway").field("role", &self.config.role).field("backend", &self.backend.fingerprint()).finish()
    }
}

impl Gateway {
    /// Builds the backend named by the configuration.
    pub fn new(config: FmConfig) -> Result<Self, GatewayError> {
        config.validate()?;
        let backend: Arc<dyn Backend> = match config.backend {
            BackendKind::Mock => Arc::new(MockBackend::new(config.mock.clone().unwrap_or_default())),
            BackendKind::Http => Arc::new(HttpBackend::from_config(&config)?),
        };
        Ok(Self::with_backend(config, backend))
    }

    pub fn with_backend(config: FmConfig, backend: Arc<dyn Backend>) -> Self {
        let limiter = Limiter::new(config.max_in_flight, config.requests_per_second);
        Gateway { config, backend, counters: Counters::default(), limiter }
    }

    pub fn config(&self) -> &FmConfig {
        &self.config
    }

    pub fn role(&self) -> FmRole {
        self.config.role
    }

    pub fn fingerprint(&self) -> String {
        self.backend.fingerprint()
    }

    pub fn counts(&self) -> CallCounts {
        CallCounts {
            completions: self.counters.completions.load(Ordering::SeqCst),
            embeddings: self.counters.embeddings.load(Ordering::SeqCst),
            attempts: self.counters.attempts.load(Ordering::SeqCst),
            failures: self.counters.failures.load(Ordering::SeqCst),
        }
    }

    pub fn complete(&self, prompt: &str) -> Result<Completion, GatewayError> {
        if prompt.trim().is_empty() {
            return Err(GatewayError::InvalidRequest("prompt is empty".into()));
        }
        self.counters.completions.fetch_add(1, Ordering::SeqCst);
        let start = Instant::now();
        let mut out = self.with_retry(|| self.backend.complete(&self.config, prompt));
        if let Ok(c) = &mut out {
            c.wall_latency = start.elapsed();
        }
        out
    }

    pub fn embed(&self, text: &str) -> Result<Embedding, GatewayError> {
        if text.is_empty() {
            return Err(GatewayError::InvalidRequest("embedding input is empty".into()));
        }
        self.counters.embeddings.fetch_add(1, Ordering::SeqCst);
        self.with_retry(|| self.backend.embed(&self.config, text))
    }

    fn with_retry<T>(&self, mut attempt: impl FnMut() -> Result<T, GatewayError>) -> Result<T, GatewayError> {
        let policy = &self.config.retry;
        let mut n = 0;
        loop {
            let result = {
                let _permit = self.limiter.acquire();
                self.counters.attempts.fetch_add(1, Ordering::SeqCst);
                attempt()
            };
            match result {
                Err(e) if e.is_transient() && n + 1 < policy.max_attempts => {
                    std::thread::sleep(policy.delay(n));
                    n += 1;
                }
                Err(e) => {
                    self.counters.failures.fetch_add(1, Ordering::SeqCst);
                    return Err(e);
                }
                ok => return ok,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fallback_token_counts() {
        assert_eq!(count_tokens_fallback("hello world"), 2);
        assert_eq!(count_tokens_fallback(""), 0);
        assert_eq!(count_tokens_fallback("a  b\nc"), 3);
    }

    #[test]
    fn config_validation() {
        assert!(FmConfig::mock(FmRole::Release, "m").validate().is_ok());
        let mut http = FmConfig::http(FmRole::Release, "", "m");
        assert!(matches!(http.validate(), Err(GatewayError::Config(_))));
        http.endpoint = Some("http://127.0.0.1:1/v1".into());
        assert!(http.validate().is_ok());
        let mut bad = FmConfig::mock(FmRole::Release, "m");
        bad.top_p = 0.0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn empty_prompt_rejected_without_counting() {
        let gw = Gateway::new(FmConfig::mock(FmRole::Release, "m")).unwrap();
        assert!(matches!(gw.complete("  "), Err(GatewayError::InvalidRequest(_))));
        assert_eq!(gw.counts().completions, 0);
    }

    #[test]
    fn retry_recovers_from_scripted_faults() {
        let spec =
            MockSpec { rules: vec![MockRule::fault(MockMatch::contains("flaky"), GatewayError::Timeout, Some(2))], ..MockSpec::default() };
        let gw = Gateway::new(FmConfig::mock(FmRole::Release, "m").with_mock(spec)).unwrap();
        let c = gw.complete("a flaky prompt").unwrap();
        assert!(!c.text.is_empty());
        let counts = gw.counts();
        assert_eq!(counts.completions, 1);
        assert_eq!(counts.attempts, 3);
        assert_eq!(counts.failures, 0);
    }

    #[test]
    fn retries_exhausted_surface_the_error() {
        let spec =
            MockSpec { rules: vec![MockRule::fault(MockMatch::contains("busy"), GatewayError::RateLimited, None)], ..MockSpec::default() };
        let gw = Gateway::new(FmConfig::mock(FmRole::Release, "m").with_mock(spec)).unwrap();
        assert_eq!(gw.complete("busy"), Err(GatewayError::RateLimited));
        assert_eq!(gw.counts().attempts, 3);
        assert_eq!(gw.counts().failures, 1);
    }

    #[test]
    fn malformed_is_not_retried() {
        let spec = MockSpec {
            rules: vec![MockRule::fault(MockMatch::contains("x"), GatewayError::MalformedResponse("bad json".into()), None)],
            ..MockSpec::default()
        };
        let gw = Gateway::new(FmConfig::mock(FmRole::Release, "m").with_mock(spec)).unwrap();
        assert!(matches!(gw.complete("x"), Err(GatewayError::MalformedResponse(_))));
        assert_eq!(gw.counts().attempts, 1);
    }
}
