//! Domain types shared by every stage of a compilation.

pub mod digest;
pub mod genome;
pub mod template;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use digest::{content_key, CacheKey, CanonicalWriter};
pub use genome::{decode_param, GenomeEntry, ParamSpec, ParameterGenome};
pub use template::{ComponentKind, PromptTemplate, Segment, TemplateError, TemplateSyntax};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("intent text is empty")]
    EmptyIntent,
    #[error("scenario has no problem instances")]
    NoInstances,
    #[error("duplicate instance id `{0}`")]
    DuplicateInstance(String),
    #[error("instance `{instance}` does not bind placeholder `{placeholder}`")]
    UnboundPlaceholder { instance: String, placeholder: String },
    #[error("instance `{0}` has an empty unit-test suite")]
    EmptySuite(String),
    #[error("no objectives declared")]
    NoObjectives,
    #[error("duplicate objective `{0}`")]
    DuplicateObjective(String),
    #[error("objective `{0}` has a non-positive weight")]
    BadWeight(String),
    #[error("objective vector has {got} values, expected {expected}")]
    Arity { expected: usize, got: usize },
    #[error("objective vector contains a non-finite value")]
    NonFinite,
    #[error(transparent)]
    Template(#[from] TemplateError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Intent {
    pub id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestCase {
    pub id: String,
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnitTestSuite {
    pub tests: Vec<TestCase>,
    /// Runner command template; `None` uses the sandbox default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command: Option<Vec<String>>,
    /// Binding whose text is prepended to the generated code before testing
    /// (e.g. the signature and docstring the model was asked to complete).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub code_prefix: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Expected {
    UnitTests(UnitTestSuite),
    ReferenceText(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldLabel {
    #[serde(flatten)]
    pub expected: Expected,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_solution: Option<String>,
}

impl GoldLabel {
    pub fn unit_tests(&self) -> Option<&UnitTestSuite> {
        match &self.expected {
            Expected::UnitTests(s) => Some(s),
            Expected::ReferenceText(_) => None,
        }
    }
}

/// Where a synthesized instance came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Origin {
    pub instance: String,
    pub kind: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemInstance {
    pub id: String,
    pub bindings: BTreeMap<String, String>,
    pub gold: GoldLabel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin: Option<Origin>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Minimize,
    Maximize,
}

impl Direction {
    /// True if `a` is strictly better than `b` in this direction.
    pub fn better(self, a: f64, b: f64) -> bool {
        match self {
            Direction::Minimize => a < b,
            Direction::Maximize => a > b,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveSpec {
    pub name: String,
    pub direction: Direction,
    /// Metric key produced by the evaluation bench (`accuracy`, `exec_latency`, `tokens`, or custom).
    pub evaluator_id: String,
    /// Report-only; never consulted by selection.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<f64>,
}

impl ObjectiveSpec {
    pub fn new(name: &str, direction: Direction, evaluator_id: &str) -> Self {
        ObjectiveSpec { name: name.into(), direction, evaluator_id: evaluator_id.into(), weight: None }
    }

    pub fn validate_all(specs: &[ObjectiveSpec]) -> Result<(), ModelError> {
        if specs.is_empty() {
            return Err(ModelError::NoObjectives);
        }
        for (i, s) in specs.iter().enumerate() {
            if specs[..i].iter().any(|o| o.name == s.name) {
                return Err(ModelError::DuplicateObjective(s.name.clone()));
            }
            if matches!(s.weight, Some(w) if !(w > 0.0 && w.is_finite())) {
                return Err(ModelError::BadWeight(s.name.clone()));
            }
        }
        Ok(())
    }
}

/// Fitness values aligned index-for-index with the job's objective list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ObjectiveVector(pub Vec<f64>);

impl ObjectiveVector {
    pub fn new(values: Vec<f64>, arity: usize) -> Result<Self, ModelError> {
        if values.len() != arity {
            return Err(ModelError::Arity { expected: arity, got: values.len() });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite);
        }
        Ok(ObjectiveVector(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lineage {
    pub parents: Vec<String>,
    pub operator: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: String,
    pub generation: u32,
    pub template: PromptTemplate,
    #[serde(default, skip_serializing_if = "ParameterGenome::is_empty")]
    pub genome: ParameterGenome,
    pub objectives: Option<ObjectiveVector>,
    pub rank: Option<usize>,
    #[serde(with = "crowding_serde")]
    pub crowding: Option<f64>,
    pub lineage: Option<Lineage>,
}

impl Candidate {
    pub fn new(id: String, generation: u32, template: PromptTemplate, genome: ParameterGenome) -> Self {
        Candidate { id, generation, template, genome, objectives: None, rank: None, crowding: None, lineage: None }
    }

    /// Identity of the configuration: template content plus genome bits.
    pub fn config_key(&self) -> CacheKey {
        config_key(&self.template, &self.genome)
    }

    pub fn is_evaluated(&self) -> bool {
        self.objectives.is_some()
    }
}

pub fn config_key(template: &PromptTemplate, genome: &ParameterGenome) -> CacheKey {
    let mut w = CanonicalWriter::new(b"CAND1");
    w.bytes(&template.canonical_bytes());
    genome.write_canonical(&mut w);
    w.digest()
}

/// Serializes an optional crowding distance, writing `+inf` as the string `"inf"`.
mod crowding_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            None => s.serialize_none(),
            Some(x) if x.is_infinite() => s.serialize_str("inf"),
            Some(x) => s.serialize_f64(*x),
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        match Option::<Raw>::deserialize(d)? {
            None => Ok(None),
            Some(Raw::Num(x)) => Ok(Some(x)),
            Some(Raw::Text(t)) if t == "inf" => Ok(Some(f64::INFINITY)),
            Some(Raw::Text(t)) => Err(serde::de::Error::custom(format!("bad crowding value `{t}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub intent: Intent,
    pub instances: Vec<ProblemInstance>,
    #[serde(default)]
    pub objectives: Vec<ObjectiveSpec>,
    #[serde(default)]
    pub data_description: String,
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.intent.text.trim().is_empty() {
            return Err(ModelError::EmptyIntent);
        }
        if self.instances.is_empty() {
            return Err(ModelError::NoInstances);
        }
        for (i, inst) in self.instances.iter().enumerate() {
            if self.instances[..i].iter().any(|o| o.id == inst.id) {
                return Err(ModelError::DuplicateInstance(inst.id.clone()));
            }
            if let Some(suite) = inst.gold.unit_tests() {
                if suite.tests.is_empty() {
                    return Err(ModelError::EmptySuite(inst.id.clone()));
                }
            }
        }
        ObjectiveSpec::validate_all(&self.objectives)
    }

    /// Placeholder names every instance binds.
    pub fn binding_schema(&self) -> Vec<String> {
        let mut names: Vec<String> = self.instances.first().map(|i| i.bindings.keys().cloned().collect()).unwrap_or_default();
        names.retain(|n| self.instances.iter().all(|i| i.bindings.contains_key(n)));
        names
    }

    /// Checks that each template placeholder is bound by every instance or by a genome parameter.
    pub fn check_template(&self, template: &PromptTemplate, params: &[ParamSpec]) -> Result<(), ModelError> {
        for ph in template.placeholders() {
            if params.iter().any(|p| p.name == ph) {
                continue;
            }
            if let Some(inst) = self.instances.iter().find(|i| !i.bindings.contains_key(ph)) {
                return Err(ModelError::UnboundPlaceholder { instance: inst.id.clone(), placeholder: ph.to_string() });
            }
        }
        Ok(())
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Minimize => "minimize",
            Direction::Maximize => "maximize",
        })
    }
}
