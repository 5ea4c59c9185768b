//! Multi-objective evolutionary search over prompt templates and
//! parameter genomes.

mod config;
pub mod engine;
pub mod nsga2;
pub mod operators;
pub mod rng;
pub mod selection;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{OperatorConfig, OptimizerConfig, StopCriteria, ThresholdStop};
pub use engine::{compile, LiveOracle, Oracle, RunOptions, RunOutcome};

use crate::eval::{EvalError, QualityGateResult};
use crate::gateway::GatewayError;
use crate::model::{Candidate, ModelError, ObjectiveSpec};

#[derive(Debug, Error)]
pub enum OptError {
    #[error("objective vector has {got} values, expected {expected}")]
    ArityMismatch { expected: usize, got: usize },
    #[error("candidate `{0}` has not been evaluated")]
    Unevaluated(String),
    #[error("invalid optimizer configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Trace(#[from] crate::trace::TraceError),
    #[error(transparent)]
    Expand(#[from] crate::expand::ExpandError),
}

/// Best objective values of one generation's population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationSummary {
    pub generation: u32,
    pub best: Vec<f64>,
    pub front_size: usize,
}

/// Outcome of a compilation. Contains no timing, cache statistics or call
/// counts, so equal runs produce byte-identical serializations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompilationResult {
    pub objectives: Vec<ObjectiveSpec>,
    pub pareto_front: Vec<Candidate>,
    pub best: Candidate,
    /// The first candidate of the initial population.
    pub initial: Candidate,
    pub generations_run: u32,
    pub gate: QualityGateResult,
    pub budget_exhausted: bool,
    pub threshold_reached: bool,
    pub history: Vec<GenerationSummary>,
}

impl CompilationResult {
    pub fn to_json(&self) -> Vec<u8> {
        serde_json::to_vec_pretty(self).expect("result serializes")
    }
}

/// Optimizer-side accounting, reconciled against trace event counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub completions: u64,
    pub embeddings: u64,
    pub evaluations: u64,
    pub crossovers: u64,
    pub mutations: u64,
    pub fills: u64,
    pub reflections: u64,
    pub cache_hits: u64,
    pub cache_misses: u64,
}
