//! Deterministic offline backend.
//!
//! Prompts are matched against scripted rules first (exact text or
//! substring). A rule either answers with fixed text or injects a fault,
//! optionally only for its first `times` matches. Unmatched prompts go to the
//! fallback: the generative mode derives a response from the prompt digest,
//! so the full prompt-to-completion map is a pure function of
//! `(model_id, seed, prompt)`.
//!
//! Embeddings are hashed bag-of-features vectors: each whitespace token and
//! each adjacent token pair contributes a pseudo-random Gaussian vector
//! seeded by its hash, plus a small term seeded by the whole text. Texts with
//! disjoint vocabularies map to nearly independent unit vectors, while texts
//! differing in one token stay close.

use std::sync::atomic::{AtomicU32, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{count_tokens_fallback, Backend, Completion, Embedding, FmConfig, GatewayError};
use crate::model::content_key;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockMatch {
    Exact(String),
    Contains(String),
}

impl MockMatch {
    pub fn exact(s: &str) -> Self {
        MockMatch::Exact(s.into())
    }

    pub fn contains(s: &str) -> Self {
        MockMatch::Contains(s.into())
    }

    fn matches(&self, prompt: &str) -> bool {
        match self {
            MockMatch::Exact(s) => prompt == s,
            MockMatch::Contains(s) => prompt.contains(s.as_str()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockRule {
    #[serde(rename = "match")]
    pub matcher: MockMatch,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fault: Option<super::GatewayError>,
    /// Fault rules fire only for their first `times` matches when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub times: Option<u32>,
}

impl MockRule {
    pub fn respond(matcher: MockMatch, response: &str) -> Self {
        MockRule { matcher, response: Some(response.into()), fault: None, times: None }
    }

    pub fn fault(matcher: MockMatch, fault: GatewayError, times: Option<u32>) -> Self {
        MockRule { matcher, response: None, fault: Some(fault), times }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockFallback {
    #[default]
    Generative,
    /// Returns the prompt unchanged.
    Echo,
    /// Unscripted prompts fail with a malformed-response error.
    Error,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockSpec {
    #[serde(default)]
    pub rules: Vec<MockRule>,
    #[serde(default)]
    pub fallback: MockFallback,
}

pub struct MockBackend {
    spec: MockSpec,
    fired: Vec<AtomicU32>,
}

const VOCABULARY: [&str; 48] = [
    "write",
    "clear",
    "correct",
    "concise",
    "python",
    "code",
    "function",
    "carefully",
    "handle",
    "edge",
    "cases",
    "return",
    "the",
    "result",
    "using",
    "idiomatic",
    "style",
    "avoid",
    "side",
    "effects",
    "test",
    "inputs",
    "reason",
    "step",
    "by",
    "documentation",
    "implement",
    "efficient",
    "solution",
    "given",
    "signature",
    "docstring",
    "only",
    "output",
    "complete",
    "body",
    "validate",
    "types",
    "prefer",
    "readable",
    "names",
    "explain",
    "nothing",
    "else",
    "exactly",
    "as",
    "specified",
    "examples",
];

impl MockBackend {
    pub fn new(spec: MockSpec) -> Self {
        let fired = spec.rules.iter().map(|_| AtomicU32::new(0)).collect();
        MockBackend { spec, fired }
    }

    fn scripted(&self, prompt: &str) -> Option<Result<String, GatewayError>> {
        for (rule, fired) in self.spec.rules.iter().zip(&self.fired) {
            if !rule.matcher.matches(prompt) {
                continue;
            }
            if let Some(fault) = &rule.fault {
                match rule.times {
                    None => return Some(Err(fault.clone())),
                    Some(n) => {
                        if fired.fetch_add(1, Ordering::SeqCst) < n {
                            return Some(Err(fault.clone()));
                        }
                        continue;
                    }
                }
            }
            if let Some(text) = &rule.response {
                return Some(Ok(text.clone()));
            }
        }
        None
    }
}

fn seeded_rng(parts: &[&[u8]]) -> ChaCha8Rng {
    let mut buf = Vec::new();
    for p in parts {
        buf.extend_from_slice(&(p.len() as u32).to_le_bytes());
        buf.extend_from_slice(p);
    }
    ChaCha8Rng::from_seed(*content_key(&buf).as_bytes())
}

/// Deterministic pseudo-text derived from the prompt digest.
pub fn generative_text(model_id: &str, seed: u64, prompt: &str) -> String {
    let mut rng = seeded_rng(&[b"gen", model_id.as_bytes(), &seed.to_le_bytes(), prompt.as_bytes()]);
    let n = rng.random_range(4..=12);
    let words: Vec<&str> = (0..n).map(|_| VOCABULARY[rng.random_range(0..VOCABULARY.len())]).collect();
    let mut text = words.join(" ");
    if let Some(first) = text.get_mut(0..1) {
        first.make_ascii_uppercase();
    }
    text.push('.');
    text
}

fn gaussian(parts: &[&[u8]], dim: usize, scale: f64, acc: &mut [f64]) {
    let mut rng = seeded_rng(parts);
    for a in acc.iter_mut().take(dim) {
        let z: f64 = rng.sample(StandardNormal);
        *a += scale * z;
    }
}

pub fn mock_embedding(model_id: &str, dim: usize, text: &str) -> Vec<f64> {
    let mut acc = vec![0.0; dim];
    let tokens: Vec<&str> = text.split_whitespace().collect();
    for t in &tokens {
        gaussian(&[b"uni", model_id.as_bytes(), t.as_bytes()], dim, 1.0, &mut acc);
    }
    for pair in tokens.windows(2) {
        gaussian(&[b"bi", model_id.as_bytes(), pair[0].as_bytes(), pair[1].as_bytes()], dim, 0.5, &mut acc);
    }
    gaussian(&[b"all", model_id.as_bytes(), text.as_bytes()], dim, 0.05, &mut acc);
    let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
    acc.iter_mut().for_each(|v| *v /= norm);
    acc
}

impl Backend for MockBackend {
    fn complete(&self, config: &FmConfig, prompt: &str) -> Result<Completion, GatewayError> {
        let seed = config.seed.unwrap_or(0);
        let text = match self.scripted(prompt) {
            Some(r) => r?,
            None => match self.spec.fallback {
                MockFallback::Generative => generative_text(&config.model_id, seed, prompt),
                MockFallback::Echo => prompt.to_string(),
                MockFallback::Error => return Err(GatewayError::MalformedResponse("no scripted response".into())),
            },
        };
        Ok(Completion {
            prompt_tokens: count_tokens_fallback(prompt),
            completion_tokens: count_tokens_fallback(&text),
            text,
            wall_latency: Default::default(),
            backend_fingerprint: format!("mock:{}:{}", config.model_id, seed),
        })
    }

    fn embed(&self, config: &FmConfig, text: &str) -> Result<Embedding, GatewayError> {
        if let Some(Err(e)) = self.scripted(text) {
            return Err(e);
        }
        Embedding::new(mock_embedding(&config.model_id, config.embedding_dim, text))
    }

    fn fingerprint(&self) -> String {
        "mock".into()
    }
}
