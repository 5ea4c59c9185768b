//! Error estimation: per-instance scoring against gold labels, aggregation
//! into objective vectors, self-reflection, the holdout split and the
//! quality gate.

mod gate;
mod holdout;
mod reflect;
mod sandbox;
mod text;

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::Completion;
use crate::model::{ComponentKind, Expected, ObjectiveSpec, ObjectiveVector, ProblemInstance, PromptTemplate};

pub use gate::{quality_gate, wilson_lower_bound, z_for_confidence, QualityGateResult};
pub use holdout::split_holdout;
pub use reflect::{feedback_from, generality_filter, reflection_prompt, self_reflect, Failure, FeedbackText};
pub use sandbox::{Outcome, Sandbox, SandboxConfig, TestResult};
pub use text::{evaluate_text, TextMetric};

pub const ACCURACY: &str = "accuracy";
pub const EXEC_LATENCY: &str = "exec_latency";
pub const TOKENS: &str = "tokens";

#[derive(Debug, Clone, PartialEq, Error, Serialize, Deserialize)]
pub enum EvalError {
    #[error("sandbox unavailable: {0}")]
    SandboxUnavailable(String),
    #[error("unknown text metric `{0}`")]
    UnknownMetric(String),
    #[error("no scores to aggregate")]
    EmptyScores,
    #[error("instance `{instance}` has no value for metric `{metric}`")]
    MissingMetric { instance: String, metric: String },
    #[error("no worst-case value for metric `{0}`")]
    NoPenalty(String),
    #[error("need at least 2 instances, got {0}")]
    TooFewInstances(usize),
    #[error("holdout ratio {0} is outside (0, 1)")]
    BadRatio(f64),
    #[error("instance `{0}` has an empty test suite")]
    EmptySuite(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceScore {
    pub instance_id: String,
    /// Raw metric values keyed by evaluator id.
    pub metrics: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failure_detail: Vec<TestResult>,
    /// Set when the instance could not be evaluated (e.g. the model call
    /// failed); aggregation then substitutes worst-case values.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl InstanceScore {
    pub fn new(instance_id: &str) -> Self {
        InstanceScore { instance_id: instance_id.into(), metrics: BTreeMap::new(), failure_detail: Vec::new(), error: None }
    }

    pub fn errored(instance_id: &str, error: String) -> Self {
        InstanceScore { error: Some(error), ..Self::new(instance_id) }
    }

    pub fn accuracy(&self) -> Option<f64> {
        if self.error.is_some() {
            return Some(0.0);
        }
        self.metrics.get(ACCURACY).copied()
    }
}

/// Worst-case metric values charged to errored instances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Penalty {
    pub timeout_s: f64,
    pub max_tokens: f64,
    #[serde(default)]
    pub custom: BTreeMap<String, f64>,
}

impl Penalty {
    pub fn worst(&self, metric: &str) -> Result<f64, EvalError> {
        match metric {
            ACCURACY => Ok(0.0),
            EXEC_LATENCY => Ok(self.timeout_s),
            TOKENS => Ok(self.max_tokens),
            other => self.custom.get(other).copied().ok_or_else(|| EvalError::NoPenalty(other.into())),
        }
    }
}

/// Per-objective arithmetic mean over instances.
pub fn aggregate(scores: &[InstanceScore], specs: &[ObjectiveSpec], penalty: &Penalty) -> Result<ObjectiveVector, EvalError> {
    if scores.is_empty() {
        return Err(EvalError::EmptyScores);
    }
    let mut out = Vec::with_capacity(specs.len());
    for spec in specs {
        let mut values = Vec::with_capacity(scores.len());
        for s in scores {
            let v = if s.error.is_some() {
                penalty.worst(&spec.evaluator_id)?
            } else {
                *s.metrics
                    .get(&spec.evaluator_id)
                    .ok_or_else(|| EvalError::MissingMetric { instance: s.instance_id.clone(), metric: spec.evaluator_id.clone() })?
            };
            values.push(v);
        }
        // Summing in sorted order makes the mean exactly order-independent.
        values.sort_by(f64::total_cmp);
        out.push(values.iter().sum::<f64>() / values.len() as f64);
    }
    Ok(ObjectiveVector(out))
}

pub struct ScoreContext<'a> {
    pub instance: &'a ProblemInstance,
    pub prompt: &'a str,
    pub completion: &'a Completion,
    pub template: &'a PromptTemplate,
    pub params: &'a BTreeMap<String, i64>,
}

/// Scores one model output for one instance.
pub trait EvaluationBench: Send + Sync {
    /// Identifies the bench and its settings in configuration digests.
    fn fingerprint(&self) -> String;
    fn score(&self, ctx: &ScoreContext<'_>) -> Result<InstanceScore, EvalError>;
}

/// Body of the first fenced code block, or the whole text if there is none.
pub fn extract_code(text: &str) -> String {
    let Some(open) = text.find("```") else {
        return text.to_string();
    };
    let after = &text[open + 3..];
    let body_start = after.find('\n').map(|i| i + 1).unwrap_or(after.len());
    let body = &after[body_start..];
    match body.find("```") {
        Some(close) => body[..close].to_string(),
        None => body.to_string(),
    }
}

/// Scores against the instance's gold label: unit tests through the
/// sandbox, reference text through a text metric.
pub struct GoldBench {
    sandbox: Sandbox,
    metric: TextMetric,
}

impl GoldBench {
    pub fn new(sandbox: Sandbox, metric: TextMetric) -> Self {
        GoldBench { sandbox, metric }
    }

    pub fn sandbox(&self) -> &Sandbox {
        &self.sandbox
    }

    /// Program text submitted for an instance: the optional prefix binding
    /// followed by the extracted code.
    pub fn program(instance: &ProblemInstance, prefix: Option<&str>, generated: &str) -> String {
        let code = extract_code(generated);
        match prefix.and_then(|name| instance.bindings.get(name)) {
            Some(p) if p.ends_with('\n') => format!("{p}{code}"),
            Some(p) => format!("{p}\n{code}"),
            None => code,
        }
    }
}

impl EvaluationBench for GoldBench {
    fn fingerprint(&self) -> String {
        let c = self.sandbox.config();
        format!("gold:{:?}:{}:{}:{:?}", c.interpreter, c.timeout_ms, c.memory_mb, self.metric)
    }

    fn score(&self, ctx: &ScoreContext<'_>) -> Result<InstanceScore, EvalError> {
        match &ctx.instance.gold.expected {
            Expected::UnitTests(suite) => {
                let code = Self::program(ctx.instance, suite.code_prefix.as_deref(), &ctx.completion.text);
                self.sandbox.evaluate_codegen(&ctx.instance.id, &code, suite)
            }
            Expected::ReferenceText(reference) => {
                let mut s = InstanceScore::new(&ctx.instance.id);
                s.metrics.insert(ACCURACY.into(), evaluate_text(&ctx.completion.text, reference, self.metric));
                s.metrics.insert(EXEC_LATENCY.into(), 0.0);
                Ok(s)
            }
        }
    }
}

/// Synthetic objective for offline experiments: accuracy is one minus the
/// normalized edit distance between the candidate's instruction component
/// and a hidden target string.
pub struct TargetSimilarityBench {
    target: String,
}

impl TargetSimilarityBench {
    pub fn new(target: &str) -> Self {
        TargetSimilarityBench { target: target.into() }
    }

    pub fn similarity(&self, template: &PromptTemplate) -> f64 {
        let text = match template.component(ComponentKind::Instruction) {
            Some(t) => t.to_string(),
            None => template.to_text(),
        };
        strsim::normalized_levenshtein(&text, &self.target)
    }
}

impl EvaluationBench for TargetSimilarityBench {
    fn fingerprint(&self) -> String {
        format!("target_similarity:{}", crate::model::content_key(self.target.as_bytes()).short())
    }

    fn score(&self, ctx: &ScoreContext<'_>) -> Result<InstanceScore, EvalError> {
        let mut s = InstanceScore::new(&ctx.instance.id);
        s.metrics.insert(ACCURACY.into(), self.similarity(ctx.template));
        s.metrics.insert(EXEC_LATENCY.into(), 0.0);
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BenchSpec {
    Gold {
        #[serde(default)]
        sandbox: SandboxConfig,
        #[serde(default)]
        text_metric: TextMetric,
    },
    TargetSimilarity {
        target: String,
    },
}

impl Default for BenchSpec {
    fn default() -> Self {
        BenchSpec::Gold { sandbox: SandboxConfig::default(), text_metric: TextMetric::default() }
    }
}

impl BenchSpec {
    pub fn build(&self) -> Result<Arc<dyn EvaluationBench>, EvalError> {
        Ok(match self {
            BenchSpec::Gold { sandbox, text_metric } => Arc::new(GoldBench::new(Sandbox::new(sandbox.clone())?, *text_metric)),
            BenchSpec::TargetSimilarity { target } => Arc::new(TargetSimilarityBench::new(target)),
        })
    }

    /// Worst-case latency charged to errored instances, in seconds.
    pub fn timeout_s(&self) -> f64 {
        match self {
            BenchSpec::Gold { sandbox, .. } => sandbox.timeout_ms as f64 / 1000.0,
            BenchSpec::TargetSimilarity { .. } => 0.0,
        }
    }
}

/// Maps `f` over `items` on at most `workers` threads, preserving order.
pub fn parallel_map<T, R, F>(items: &[T], workers: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    use rayon::prelude::*;
    if workers <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(workers.min(items.len())).build().expect("worker pool");
    pool.install(|| items.par_iter().map(&f).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Direction;
    use proptest::prelude::*;

    fn score(id: &str, acc: f64, lat: f64, tok: f64) -> InstanceScore {
        let mut s = InstanceScore::new(id);
        s.metrics.insert(ACCURACY.into(), acc);
        s.metrics.insert(EXEC_LATENCY.into(), lat);
        s.metrics.insert(TOKENS.into(), tok);
        s
    }

    fn specs() -> Vec<ObjectiveSpec> {
        vec![
            ObjectiveSpec::new("accuracy", Direction::Maximize, ACCURACY),
            ObjectiveSpec::new("latency", Direction::Minimize, EXEC_LATENCY),
            ObjectiveSpec::new("cost", Direction::Minimize, TOKENS),
        ]
    }

    fn penalty() -> Penalty {
        Penalty { timeout_s: 10.0, max_tokens: 512.0, custom: BTreeMap::new() }
    }

    #[test]
    fn mean_of_accuracies() {
        let v = aggregate(&[score("a", 1.0, 1.0, 10.0), score("b", 0.0, 3.0, 20.0)], &specs(), &penalty()).unwrap();
        assert_eq!(v.0, vec![0.5, 2.0, 15.0]);
    }

    #[test]
    fn single_instance_identity() {
        let v = aggregate(&[score("a", 0.3, 0.2, 7.0)], &specs(), &penalty()).unwrap();
        assert_eq!(v.0, vec![0.3, 0.2, 7.0]);
    }

    #[test]
    fn errored_instance_gets_worst_case() {
        let v = aggregate(&[score("a", 1.0, 2.0, 100.0), InstanceScore::errored("b", "timeout".into())], &specs(), &penalty()).unwrap();
        assert_eq!(v.0, vec![0.5, 6.0, 306.0]);
    }

    #[test]
    fn empty_and_missing() {
        assert_eq!(aggregate(&[], &specs(), &penalty()), Err(EvalError::EmptyScores));
        let mut s = InstanceScore::new("a");
        s.metrics.insert(ACCURACY.into(), 1.0);
        assert!(matches!(aggregate(&[s], &specs(), &penalty()), Err(EvalError::MissingMetric { .. })));
    }

    #[test]
    fn code_extraction() {
        assert_eq!(extract_code("x = 1"), "x = 1");
        assert_eq!(extract_code("Here:\n```python\ndef f():\n    return 1\n```\nDone"), "def f():\n    return 1\n");
    }

    #[test]
    fn target_similarity() {
        let b = TargetSimilarityBench::new("abcd");
        let t = PromptTemplate::parse("{#instruction}abcx{/instruction} {p}").unwrap();
        assert!((b.similarity(&t) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn parallel_map_preserves_order() {
        let items: Vec<u32> = (0..100).collect();
        assert_eq!(parallel_map(&items, 4, |x| x * 2), items.iter().map(|x| x * 2).collect::<Vec<_>>());
    }

    proptest! {
        #[test]
        fn aggregate_is_permutation_invariant(vals in proptest::collection::vec((0.0f64..1.0, 0.0f64..5.0, 0.0f64..1e4), 1..20), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let scores: Vec<InstanceScore> = vals.iter().enumerate().map(|(i, &(a, l, t))| score(&i.to_string(), a, l, t)).collect();
            let mut shuffled = scores.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(aggregate(&scores, &specs(), &penalty()).unwrap(), aggregate(&shuffled, &specs(), &penalty()).unwrap());
        }

        #[test]
        fn accuracy_monotone_in_added_tests(passes in 0usize..20, fails in 0usize..20) {
            let total = passes + fails;
            prop_assume!(total > 0);
            let acc = passes as f64 / total as f64;
            let with_pass = (passes + 1) as f64 / (total + 1) as f64;
            let with_fail = passes as f64 / (total + 1) as f64;
            prop_assert!(with_pass >= acc);
            prop_assert!(with_fail <= acc);
        }
    }
}
