use serde::Deserialize;
use serde_json::json;
use ureq::Agent;

use super::{count_tokens_fallback, Backend, Completion, Embedding, FmConfig, GatewayError};

/// Chat-completions-compatible client.
///
/// `endpoint` is the API base (e.g. `http://localhost:8080/v1`); requests go
/// to `{endpoint}/chat/completions` and `{endpoint}/embeddings`.
pub struct HttpBackend {
    agent: Agent,
    base: String,
    api_key: Option<String>,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<Usage>,
    #[serde(default)]
    model: Option<String>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
}

#[derive(Deserialize)]
struct Message {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct Usage {
    prompt_tokens: Option<u64>,
    completion_tokens: Option<u64>,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f64>,
}

impl HttpBackend {
    pub fn from_config(config: &FmConfig) -> Result<Self, GatewayError> {
        let endpoint = config.endpoint.as_deref().ok_or_else(|| GatewayError::Config("http backend requires an endpoint".into()))?;
        let base = endpoint.trim_end_matches('/').trim_end_matches("/chat/completions").to_string();
        let api_key = match &config.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| GatewayError::Config(format!("environment variable {var} is not set")))?),
            None => None,
        };
        let agent: Agent = Agent::config_builder().timeout_global(Some(config.timeout())).http_status_as_error(false).build().into();
        Ok(HttpBackend { agent, base, api_key })
    }

    fn post(&self, path: &str, body: serde_json::Value) -> Result<String, GatewayError> {
        let url = format!("{}/{path}", self.base);
        let mut req = self.agent.post(&url).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(&body).map_err(map_transport)?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(map_transport)?;
        match status {
            200..=299 => Ok(text),
            408 => Err(GatewayError::Timeout),
            429 => Err(GatewayError::RateLimited),
            500..=599 => Err(GatewayError::TransportFailure(format!("status {status}"))),
            _ => Err(GatewayError::InvalidRequest(format!("status {status}: {}", truncate(&text, 200)))),
        }
    }
}

fn truncate(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

fn map_transport(e: ureq::Error) -> GatewayError {
    match e {
        ureq::Error::Timeout(_) => GatewayError::Timeout,
        ureq::Error::Io(io) if io.kind() == std::io::ErrorKind::TimedOut => GatewayError::Timeout,
        ureq::Error::Json(e) => GatewayError::MalformedResponse(e.to_string()),
        other => GatewayError::TransportFailure(other.to_string()),
    }
}

impl Backend for HttpBackend {
    fn complete(&self, config: &FmConfig, prompt: &str) -> Result<Completion, GatewayError> {
        let mut body = json!({
            "model": config.model_id,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": config.temperature,
            "top_p": config.top_p,
            "max_tokens": config.max_tokens,
        });
        if let Some(seed) = config.seed {
            body["seed"] = json!(seed);
        }
        let raw = self.post("chat/completions", body)?;
        let parsed: ChatResponse = serde_json::from_str(&raw).map_err(|e| GatewayError::MalformedResponse(e.to_string()))?;
        let text = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| GatewayError::MalformedResponse("missing choices[0].message.content".into()))?;
        let usage = parsed.usage.unwrap_or(Usage { prompt_tokens: None, completion_tokens: None });
        Ok(Completion {
            prompt_tokens: usage.prompt_tokens.unwrap_or_else(|| count_tokens_fallback(prompt)),
            completion_tokens: usage.completion_tokens.unwrap_or_else(|| count_tokens_fallback(&text)),
            text,
            wall_latency: Default::default(),
            backend_fingerprint: format!("http:{}", parsed.model.unwrap_or_else(|| config.model_id.clone())),
        })
    }

    fn embed(&self, config: &FmConfig, text: &str) -> Result<Embedding, GatewayError> {
        let raw = self.post("embeddings", json!({"model": config.model_id, "input": text}))?;
        let parsed: EmbeddingResponse = serde_json::from_str(&raw).map_err(|e| GatewayError::MalformedResponse(e.to_string()))?;
        let vector =
            parsed.data.into_iter().next().ok_or_else(|| GatewayError::MalformedResponse("missing data[0].embedding".into()))?.embedding;
        Embedding::new(vector)
    }

    fn fingerprint(&self) -> String {
        format!("http:{}", self.base)
    }
}
