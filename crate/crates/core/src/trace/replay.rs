//! Deterministic re-execution of a recorded run. Every model call, score
//! and validation is answered from the trace's blobs, so no model or
//! sandbox is contacted.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::Path;
use std::sync::Mutex;

use serde_json::Value;

use super::{EventKind, TraceError, TraceEvent, TraceLog, TraceWriter};
use crate::cache::SemanticCache;
use crate::eval::{EvalError, InstanceScore, ScoreContext};
use crate::gateway::{Completion, Embedding, FmRole, GatewayError};
use crate::model::{content_key, CacheKey, ProblemInstance};
use crate::optimizer::engine::{call_input, compile, EvalBlob, Oracle, RunOptions, RunOutcome, RunStartBlob};
use crate::optimizer::{CompilationResult, OptError};

#[derive(Debug)]
pub struct ReplayOutcome {
    pub events: usize,
    pub result: CompilationResult,
}

type Queue<T> = Mutex<BTreeMap<String, VecDeque<T>>>;

/// Answers recorded in a trace, consumed in recording order per key.
#[derive(Default)]
pub struct ReplayOracle {
    completions: Queue<Result<Completion, GatewayError>>,
    embeddings: Queue<Result<Embedding, GatewayError>>,
    scores: Queue<InstanceScore>,
    validations: Queue<Result<bool, EvalError>>,
    budget_stops: BTreeSet<u32>,
}

fn take<T>(q: &Queue<T>, key: &str) -> Option<T> {
    q.lock().expect("replay queue poisoned").get_mut(key)?.pop_front()
}

fn push<T>(q: &Queue<T>, key: String, v: T) {
    q.lock().expect("replay queue poisoned").entry(key).or_default().push_back(v);
}

fn missing(what: &str) -> GatewayError {
    GatewayError::TransportFailure(format!("replay: no recorded {what}"))
}

impl ReplayOracle {
    pub fn from_log(log: &TraceLog) -> Result<Self, TraceError> {
        let o = ReplayOracle::default();
        let mut stops = BTreeSet::new();
        for ev in &log.events {
            match ev.kind {
                EventKind::FmCall => {
                    let input = ev.inputs.clone().ok_or_else(|| format_err(ev, "fm_call without inputs"))?;
                    let error: Option<GatewayError> = match ev.data.get("error") {
                        Some(e) => Some(serde_json::from_value(e.clone()).map_err(|e| format_err(ev, &e.to_string()))?),
                        None => None,
                    };
                    let role: FmRole = serde_json::from_value(ev.data.get("role").cloned().unwrap_or(Value::Null))
                        .map_err(|e| format_err(ev, &e.to_string()))?;
                    if role == FmRole::Embedding {
                        let r = match (error, &ev.outputs) {
                            (Some(e), _) => Err(e),
                            (None, Some(out)) => Ok(log.blob_json::<Embedding>(out)?),
                            (None, None) => return Err(format_err(ev, "fm_call without outputs")),
                        };
                        push(&o.embeddings, input, r);
                    } else {
                        let r = match (error, &ev.outputs) {
                            (Some(e), _) => Err(e),
                            (None, Some(out)) => Ok(log.blob_json::<Completion>(out)?),
                            (None, None) => return Err(format_err(ev, "fm_call without outputs")),
                        };
                        push(&o.completions, input, r);
                    }
                }
                EventKind::Eval if ev.label.starts_with("validate:") => {
                    let input = ev.inputs.clone().ok_or_else(|| format_err(ev, "validation without inputs"))?;
                    let r = match (ev.data.get("valid").and_then(Value::as_bool), ev.data.get("error")) {
                        (Some(v), _) => Ok(v),
                        (None, Some(e)) => Err(serde_json::from_value(e.clone()).map_err(|e| format_err(ev, &e.to_string()))?),
                        (None, None) => return Err(format_err(ev, "validation without outcome")),
                    };
                    push(&o.validations, input, r);
                }
                EventKind::Eval | EventKind::Gate => {
                    let out = ev.outputs.as_deref().ok_or_else(|| format_err(ev, "evaluation without outputs"))?;
                    let blob: EvalBlob = log.blob_json(out)?;
                    for rec in blob.scores {
                        if let Some(ctx) = rec.ctx {
                            push(&o.scores, ctx, rec.score);
                        }
                    }
                }
                EventKind::Warning if ev.data.get("budget_exhausted").and_then(Value::as_bool) == Some(true) => {
                    if let Some(g) = ev.data.get("generation").and_then(Value::as_u64) {
                        stops.insert(g as u32);
                    }
                }
                _ => {}
            }
        }
        Ok(ReplayOracle { budget_stops: stops, ..o })
    }
}

fn format_err(ev: &TraceEvent, what: &str) -> TraceError {
    TraceError::Format(format!("event {}: {what}", ev.seq))
}

impl Oracle for ReplayOracle {
    fn complete(&self, role: FmRole, prompt: &str) -> Result<Completion, GatewayError> {
        let key = content_key(&call_input(role, prompt)).to_hex();
        take(&self.completions, &key).unwrap_or_else(|| Err(missing("completion")))
    }

    fn embed(&self, text: &str) -> Result<Embedding, GatewayError> {
        let key = content_key(&call_input(FmRole::Embedding, text)).to_hex();
        take(&self.embeddings, &key).unwrap_or_else(|| Err(missing("embedding")))
    }

    fn score(&self, key: &CacheKey, ctx: &ScoreContext<'_>) -> Result<InstanceScore, EvalError> {
        Ok(take(&self.scores, &key.to_hex())
            .unwrap_or_else(|| InstanceScore::errored(&ctx.instance.id, "replay: no recorded score".to_string())))
    }

    fn validate(&self, key: &CacheKey, _instance: &ProblemInstance) -> Result<bool, EvalError> {
        take(&self.validations, &key.to_hex()).unwrap_or(Ok(false))
    }

    fn budget_exhausted(&self, generation: u32, _elapsed_ms: u64) -> bool {
        self.budget_stops.contains(&generation)
    }
}

fn describe(ev: &TraceEvent) -> String {
    format!("{:?} `{}`", ev.kind, ev.label)
}

/// First index at which two normalized event streams differ.
fn first_difference(recorded: &[TraceEvent], replayed: &[TraceEvent]) -> Option<(u64, String)> {
    for (i, (a, b)) in recorded.iter().zip(replayed).enumerate() {
        if a != b {
            let reason = if a.kind != b.kind || a.label != b.label {
                format!("recorded {} but replay produced {}", describe(a), describe(b))
            } else {
                let field = if a.inputs != b.inputs {
                    "inputs"
                } else if a.outputs != b.outputs {
                    "outputs"
                } else if a.data != b.data {
                    "data"
                } else {
                    "metadata"
                };
                format!("{} differs in {field}", describe(a))
            };
            return Some((i as u64 + 1, reason));
        }
    }
    None
}

/// Re-executes the run recorded at `path` and checks that it reproduces
/// the trace event for event. With `write`, the regenerated trace is saved
/// there.
pub fn replay(path: &Path, write: Option<&Path>) -> Result<ReplayOutcome, OptError> {
    let log = TraceLog::read(path)?;
    log.verify()?;
    let start = log.first(EventKind::RunStart).ok_or(TraceError::Incomplete)?;
    let blob: RunStartBlob = log.blob_json(start.inputs.as_deref().ok_or_else(|| format_err(start, "run_start without inputs"))?)?;
    let spec = blob.spec;
    if spec.digest().to_hex() != blob.config_digest {
        return Err(TraceError::Divergence { seq: start.seq, reason: "run specification does not match its digest".into() }.into());
    }
    let cached = start.data.get("cache_entries").is_some_and(|v| !v.is_null());
    let cache = if cached {
        Some(match &blob.cache_snapshot {
            Some(hex) => SemanticCache::from_bytes(&log.blob(hex)?, spec.cache.threshold, spec.cache.capacity)
                .map_err(|e| TraceError::Format(format!("cache snapshot: {e}")))?,
            None => SemanticCache::new(spec.cache.threshold, spec.cache.capacity),
        })
    } else {
        None
    };
    let warnings = log
        .events
        .iter()
        .filter(|e| e.kind == EventKind::Warning && e.data_str("source") == Some("startup"))
        .filter_map(|e| e.data_str("message").map(str::to_string))
        .collect();
    let oracle = ReplayOracle::from_log(&log)?;
    let mut writer = TraceWriter::memory();
    let run = compile(&spec, &oracle, cache.as_ref(), &mut writer, RunOptions { warnings, ..RunOptions::default() });
    let regenerated = writer.finish()?.expect("memory writer keeps its log");

    let recorded = log.normalized();
    let produced = regenerated.normalized();
    if let Some((seq, reason)) = first_difference(&recorded, &produced) {
        return Err(TraceError::Divergence { seq, reason }.into());
    }
    let result = match run {
        Ok(RunOutcome::Completed(result, _)) => *result,
        Ok(RunOutcome::Halted { generation }) => {
            let seq = produced.len() as u64 + 1;
            return Err(TraceError::Divergence { seq, reason: format!("replay halted after generation {generation}") }.into());
        }
        Err(e) => {
            let seq = produced.len() as u64 + 1;
            return Err(TraceError::Divergence { seq, reason: format!("replay failed: {e}") }.into());
        }
    };
    if recorded.len() != produced.len() {
        let seq = recorded.len().min(produced.len()) as u64 + 1;
        return Err(TraceError::Divergence {
            seq,
            reason: format!("recorded {} events, replay produced {}", recorded.len(), produced.len()),
        }
        .into());
    }
    if let Some(out) = write {
        regenerated.write_to(out)?;
    }
    Ok(ReplayOutcome { events: produced.len(), result })
}
