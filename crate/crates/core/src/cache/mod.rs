//! Two-level memo of expensive operations.
//!
//! The first level is keyed by the job (intent text and data description),
//! the second by the digest of the operation's parameter text. Inference,
//! crossover and mutation results may also be served for a different text
//! whose embedding is close enough; fill and evaluation results never are.

mod store;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::Embedding;
use crate::model::{content_key, CacheKey, CanonicalWriter};

pub const DEFAULT_THRESHOLD: f64 = 0.85;
pub const DEFAULT_CAPACITY: usize = 100_000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CacheError {
    #[error("embedding dimensions differ ({0} vs {1})")]
    DimMismatch(usize, usize),
    #[error("corrupt cache file: {0}")]
    Corrupt(String),
    #[error("cache file version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("cache io: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Fill,
    Inference,
    Evaluation,
    Crossover,
    Mutation,
}

impl OpKind {
    pub const ALL: [OpKind; 5] = [OpKind::Fill, OpKind::Inference, OpKind::Evaluation, OpKind::Crossover, OpKind::Mutation];

    pub fn semantic(self) -> bool {
        matches!(self, OpKind::Inference | OpKind::Crossover | OpKind::Mutation)
    }

    fn code(self) -> u8 {
        self as u8
    }

    fn from_code(c: u8) -> Option<Self> {
        OpKind::ALL.get(c as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Fill => "fill",
            OpKind::Inference => "inference",
            OpKind::Evaluation => "evaluation",
            OpKind::Crossover => "crossover",
            OpKind::Mutation => "mutation",
        }
    }
}

/// Digest of `intent ‖ "||" ‖ data_description`.
pub fn l1_key(intent: &str, data_description: &str) -> CacheKey {
    content_key(format!("{intent}||{data_description}").as_bytes())
}

pub fn l2_key(param_text: &str) -> CacheKey {
    content_key(param_text.as_bytes())
}

/// `1 / (1 + ‖a − b‖₂)`.
pub fn similarity(a: &Embedding, b: &Embedding) -> Result<f64, CacheError> {
    similarity_raw(&a.vector, &b.vector)
}

fn similarity_raw(a: &[f64], b: &[f64]) -> Result<f64, CacheError> {
    if a.len() != b.len() {
        return Err(CacheError::DimMismatch(a.len(), b.len()));
    }
    let d = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    Ok(1.0 / (1.0 + d))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpStats {
    pub hits: u64,
    pub misses: u64,
    pub semantic_hits: u64,
    pub evictions: u64,
}

impl OpStats {
    pub fn lookups(&self) -> u64 {
        self.hits + self.misses
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub by_op: BTreeMap<OpKind, OpStats>,
}

impl CacheStats {
    pub fn total(&self) -> OpStats {
        self.by_op.values().fold(OpStats::default(), |a, s| OpStats {
            hits: a.hits + s.hits,
            misses: a.misses + s.misses,
            semantic_hits: a.semantic_hits + s.semantic_hits,
            evictions: a.evictions + s.evictions,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Entry {
    pub(crate) op: OpKind,
    pub(crate) key: CacheKey,
    pub(crate) embedding: Option<Vec<f64>>,
    pub(crate) payload: Vec<u8>,
    pub(crate) created_at: u64,
    pub(crate) last_hit: u64,
    pub(crate) hit_count: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub(crate) struct Bucket {
    pub(crate) entries: BTreeMap<(OpKind, CacheKey), Entry>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub(crate) struct State {
    pub(crate) clock: u64,
    pub(crate) buckets: BTreeMap<CacheKey, Bucket>,
    pub(crate) stats: CacheStats,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HitKind {
    Exact,
    Semantic,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Lookup {
    /// `embedding` is the query vector on a semantic hit.
    Hit { payload: Vec<u8>, kind: HitKind, matched: CacheKey, similarity: f64, embedding: Option<Embedding> },
    /// Carries the embedding computed during the lookup, if any, for reuse on insert.
    Miss { embedding: Option<Embedding> },
}

impl Lookup {
    pub fn is_hit(&self) -> bool {
        matches!(self, Lookup::Hit { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CacheConfig {
    #[serde(default = "yes")]
    pub enabled: bool,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default = "default_capacity")]
    pub capacity: usize,
}

fn yes() -> bool {
    true
}
fn default_threshold() -> f64 {
    DEFAULT_THRESHOLD
}
fn default_capacity() -> usize {
    DEFAULT_CAPACITY
}

impl Default for CacheConfig {
    fn default() -> Self {
        CacheConfig { enabled: true, threshold: DEFAULT_THRESHOLD, path: None, capacity: DEFAULT_CAPACITY }
    }
}

#[derive(Debug)]
pub struct SemanticCache {
    threshold: f64,
    capacity: usize,
    state: Mutex<State>,
}

impl SemanticCache {
    pub fn new(threshold: f64, capacity: usize) -> Self {
        assert!(threshold > 0.0 && threshold <= 1.0, "threshold must be in (0, 1]");
        SemanticCache { threshold, capacity: capacity.max(1), state: Mutex::new(State::default()) }
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn stats(&self) -> CacheStats {
        self.state.lock().unwrap().stats.clone()
    }

    pub fn reset_stats(&self) {
        self.state.lock().unwrap().stats = CacheStats::default();
    }

    pub fn set_stats(&self, stats: CacheStats) {
        self.state.lock().unwrap().stats = stats;
    }

    pub fn len(&self) -> usize {
        self.state.lock().unwrap().buckets.values().map(|b| b.entries.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Exact match first, then (for semantic op kinds) the most similar
    /// entry at or above the threshold. `embed` is called after an exact
    /// miss on a semantic op kind; the vector comes back in `Miss` so the
    /// caller can store it with the result.
    pub fn lookup<E>(
        &self,
        l1: &CacheKey,
        op: OpKind,
        param_text: &str,
        embed: impl FnOnce() -> Result<Embedding, E>,
    ) -> Result<Lookup, E> {
        let key = l2_key(param_text);
        {
            let mut st = self.state.lock().unwrap();
            if let Some(hit) = st.touch(l1, op, &key) {
                st.stats.by_op.entry(op).or_default().hits += 1;
                return Ok(Lookup::Hit { payload: hit, kind: HitKind::Exact, matched: key, similarity: 1.0, embedding: None });
            }
            if !op.semantic() {
                st.stats.by_op.entry(op).or_default().misses += 1;
                return Ok(Lookup::Miss { embedding: None });
            }
        }
        let embedding = match embed() {
            Ok(e) => e,
            Err(e) => {
                let mut st = self.state.lock().unwrap();
                st.stats.by_op.entry(op).or_default().misses += 1;
                return Err(e);
            }
        };
        let mut st = self.state.lock().unwrap();
        let best = st.buckets.get(l1).and_then(|b| {
            let mut best: Option<(f64, u64, CacheKey)> = None;
            for e in b.entries.values().filter(|e| e.op == op) {
                let Some(v) = &e.embedding else { continue };
                let Ok(s) = similarity_raw(v, &embedding.vector) else { continue };
                if s < self.threshold {
                    continue;
                }
                let better = match best {
                    None => true,
                    Some((bs, bc, _)) => s > bs || (s == bs && e.created_at < bc),
                };
                if better {
                    best = Some((s, e.created_at, e.key));
                }
            }
            best
        });
        match best {
            Some((s, _, matched)) => {
                let payload = st.touch(l1, op, &matched).expect("matched entry present");
                let stats = st.stats.by_op.entry(op).or_default();
                stats.hits += 1;
                stats.semantic_hits += 1;
                Ok(Lookup::Hit { payload, kind: HitKind::Semantic, matched, similarity: s, embedding: Some(embedding) })
            }
            None => {
                st.stats.by_op.entry(op).or_default().misses += 1;
                Ok(Lookup::Miss { embedding: Some(embedding) })
            }
        }
    }

    /// Stores a result. Re-inserting an existing key leaves the stored entry
    /// untouched. Returns the number of entries evicted to make room.
    pub fn insert(&self, l1: &CacheKey, op: OpKind, param_text: &str, embedding: Option<&Embedding>, payload: Vec<u8>) -> usize {
        let key = l2_key(param_text);
        let mut st = self.state.lock().unwrap();
        st.clock += 1;
        let now = st.clock;
        let capacity = self.capacity;
        let bucket = st.buckets.entry(*l1).or_default();
        if bucket.entries.contains_key(&(op, key)) {
            return 0;
        }
        let mut evicted = Vec::new();
        while bucket.entries.len() >= capacity {
            let victim = *bucket.entries.iter().min_by_key(|(_, e)| e.last_hit).map(|(k, _)| k).expect("non-empty bucket");
            bucket.entries.remove(&victim);
            evicted.push(victim.0);
        }
        bucket.entries.insert(
            (op, key),
            Entry { op, key, embedding: embedding.map(|e| e.vector.clone()), payload, created_at: now, last_hit: now, hit_count: 0 },
        );
        for op in &evicted {
            st.stats.by_op.entry(*op).or_default().evictions += 1;
        }
        evicted.len()
    }

    /// Digest of the stored entries (not the statistics).
    pub fn content_digest(&self) -> CacheKey {
        let st = self.state.lock().unwrap();
        let mut w = CanonicalWriter::new(b"CACHE");
        for (l1, b) in &st.buckets {
            w.key(l1).u32(b.entries.len() as u32);
            for e in b.entries.values() {
                w.u8(e.op.code()).key(&e.key).bytes(&e.payload);
            }
        }
        w.digest()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        store::encode(&self.state.lock().unwrap())
    }

    pub fn from_bytes(bytes: &[u8], threshold: f64, capacity: usize) -> Result<Self, CacheError> {
        let state = store::decode(bytes)?;
        let cache = SemanticCache::new(threshold, capacity);
        *cache.state.lock().unwrap() = state;
        Ok(cache)
    }

    pub fn persist(&self, path: &Path) -> Result<(), CacheError> {
        let bytes = self.to_bytes();
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes).map_err(|e| CacheError::Io(e.to_string()))?;
        std::fs::rename(&tmp, path).map_err(|e| CacheError::Io(e.to_string()))
    }

    pub fn load(path: &Path, threshold: f64, capacity: usize) -> Result<Self, CacheError> {
        let bytes = std::fs::read(path).map_err(|e| CacheError::Io(e.to_string()))?;
        Self::from_bytes(&bytes, threshold, capacity)
    }
}

impl State {
    fn touch(&mut self, l1: &CacheKey, op: OpKind, key: &CacheKey) -> Option<Vec<u8>> {
        self.clock += 1;
        let now = self.clock;
        let e = self.buckets.get_mut(l1)?.entries.get_mut(&(op, *key))?;
        e.hit_count += 1;
        e.last_hit = now;
        Some(e.payload.clone())
    }
}
