use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    RunStart,
    GenStart,
    Fill,
    FmCall,
    Eval,
    Reflect,
    Select,
    Crossover,
    Mutate,
    CacheHit,
    CacheMiss,
    Checkpoint,
    Gate,
    RunEnd,
    Warning,
}

/// One trace line. Payloads larger than a few fields live in the blob
/// directory and are referenced by their SHA-256 in `inputs`/`outputs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceEvent {
    pub schema: u32,
    pub seq: u64,
    /// Milliseconds since the run started.
    pub wall_time_ms: u64,
    pub kind: EventKind,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inputs: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outputs: Option<String>,
    /// Random stream that drove the step, as `name/gN`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rng: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_ms: Option<u64>,
    #[serde(default, skip_serializing_if = "Value::is_null")]
    pub data: Value,
    /// SHA-256 over the previous chain value and this line without the
    /// chain field.
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub chain: String,
}

impl TraceEvent {
    pub fn new(kind: EventKind) -> Self {
        TraceEvent {
            schema: SCHEMA_VERSION,
            seq: 0,
            wall_time_ms: 0,
            kind,
            label: String::new(),
            inputs: None,
            outputs: None,
            rng: None,
            tokens: None,
            latency_ms: None,
            data: Value::Null,
            chain: String::new(),
        }
    }

    pub fn label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn inputs(mut self, digest: String) -> Self {
        self.inputs = Some(digest);
        self
    }

    pub fn outputs(mut self, digest: String) -> Self {
        self.outputs = Some(digest);
        self
    }

    pub fn rng(mut self, label: String) -> Self {
        self.rng = Some(label);
        self
    }

    pub fn tokens(mut self, tokens: u64) -> Self {
        self.tokens = Some(tokens);
        self
    }

    pub fn latency_ms(mut self, ms: u64) -> Self {
        self.latency_ms = Some(ms);
        self
    }

    pub fn data(mut self, data: Value) -> Self {
        self.data = data;
        self
    }

    /// Copy with the nondeterministic fields cleared, for comparisons.
    pub fn normalized(&self) -> TraceEvent {
        TraceEvent { wall_time_ms: 0, latency_ms: None, chain: String::new(), ..self.clone() }
    }

    pub fn data_str(&self, field: &str) -> Option<&str> {
        self.data.get(field).and_then(Value::as_str)
    }
}
