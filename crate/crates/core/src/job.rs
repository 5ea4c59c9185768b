//! Job configuration as read from disk, and the path-free run
//! specification derived from it.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cache::{CacheConfig, DEFAULT_CAPACITY, DEFAULT_THRESHOLD};
use crate::eval::{BenchSpec, Penalty, ACCURACY, EXEC_LATENCY, TOKENS};
use crate::expand::ExpansionConfig;
use crate::gateway::{FmConfig, FmRole};
use crate::model::{content_key, CacheKey, Direction, ObjectiveSpec, ParamSpec, PromptTemplate, ScenarioSpec};
use crate::optimizer::OptimizerConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("invalid {what}: {message}")]
    Invalid { what: String, message: String },
}

fn invalid(what: &str, message: impl ToString) -> ConfigError {
    ConfigError::Invalid { what: what.into(), message: message.to_string() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HoldoutConfig {
    /// Fraction of instances used to guide the search.
    pub ratio: f64,
    pub seed: u64,
}

impl Default for HoldoutConfig {
    fn default() -> Self {
        HoldoutConfig { ratio: 0.7, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GateConfig {
    /// Objective name.
    pub objective: String,
    /// Required lower confidence bound on the pass rate.
    pub threshold: f64,
    pub confidence: f64,
    /// An instance passes when its objective value reaches this.
    pub pass_at: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig { objective: "accuracy".into(), threshold: 0.5, confidence: 0.95, pass_at: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FmSet {
    pub release: FmConfig,
    pub evaluator: FmConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<FmConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobConfig {
    /// Scenario file, relative to the configuration file.
    pub scenario: PathBuf,
    #[serde(default)]
    pub objectives: Vec<ObjectiveSpec>,
    #[serde(default)]
    pub parameters: Vec<ParamSpec>,
    /// Starting templates in template syntax.
    #[serde(default)]
    pub templates: Vec<String>,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    pub fms: FmSet,
    #[serde(default)]
    pub cache: CacheConfig,
    #[serde(default)]
    pub holdout: HoldoutConfig,
    #[serde(default)]
    pub gate: GateConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expansion: Option<ExpansionConfig>,
    #[serde(default)]
    pub bench: BenchSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub penalty: Option<Penalty>,
    #[serde(default = "default_out")]
    pub output_dir: PathBuf,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

/// Command-line overrides of scalar configuration fields.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub generations: Option<u32>,
    pub population: Option<usize>,
    pub cache: Option<bool>,
    pub cache_threshold: Option<f64>,
    pub holdout_ratio: Option<f64>,
    pub gate_threshold: Option<f64>,
    pub out: Option<PathBuf>,
}

impl JobConfig {
    pub fn load(path: &Path) -> Result<(JobConfig, PathBuf), ConfigError> {
        let text = fs::read_to_string(path).map_err(|e| ConfigError::Io { path: path.into(), message: e.to_string() })?;
        let job: JobConfig = serde_json::from_str(&text).map_err(|e| invalid("job configuration", e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((job, base))
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = o.seed {
            self.optimizer.master_seed = v;
        }
        if let Some(v) = o.generations {
            self.optimizer.generations = v;
        }
        if let Some(v) = o.population {
            self.optimizer.population_size = v;
        }
        if let Some(v) = o.cache {
            self.cache.enabled = v;
        }
        if let Some(v) = o.cache_threshold {
            self.cache.threshold = v;
        }
        if let Some(v) = o.holdout_ratio {
            self.holdout.ratio = v;
        }
        if let Some(v) = o.gate_threshold {
            self.gate.threshold = v;
        }
        if let Some(v) = &o.out {
            self.output_dir = v.clone();
        }
    }

    pub fn load_scenario(&self, base: &Path) -> Result<ScenarioSpec, ConfigError> {
        let path = base.join(&self.scenario);
        let text = fs::read_to_string(&path).map_err(|e| ConfigError::Io { path: path.clone(), message: e.to_string() })?;
        serde_json::from_str(&text).map_err(|e| invalid("scenario", e))
    }

    pub fn run_spec(&self, mut scenario: ScenarioSpec) -> Result<RunSpec, ConfigError> {
        if !self.objectives.is_empty() {
            scenario.objectives = self.objectives.clone();
        }
        if scenario.objectives.is_empty() {
            scenario.objectives = default_objectives();
        }
        let embedding = match (&self.fms.embedding, self.cache.enabled) {
            (Some(fm), _) => fm.clone(),
            (None, false) => FmConfig::mock(FmRole::Embedding, "mock-embedding"),
            (None, true) => return Err(invalid("fms", "the semantic cache needs an `embedding` model")),
        };
        let penalty = self.penalty.clone().unwrap_or(Penalty {
            timeout_s: self.bench.timeout_s(),
            max_tokens: self.fms.release.max_tokens as f64,
            custom: Default::default(),
        });
        let spec = RunSpec {
            scenario,
            parameters: self.parameters.clone(),
            templates: self.templates.clone(),
            optimizer: self.optimizer.clone(),
            release: self.fms.release.clone(),
            evaluator: self.fms.evaluator.clone(),
            embedding,
            cache: RunCache { enabled: self.cache.enabled, threshold: self.cache.threshold, capacity: self.cache.capacity },
            holdout: self.holdout.clone(),
            gate: self.gate.clone(),
            expansion: self.expansion.clone(),
            bench: self.bench.clone(),
            penalty,
        };
        spec.validate()?;
        Ok(spec)
    }
}

pub fn default_objectives() -> Vec<ObjectiveSpec> {
    vec![
        ObjectiveSpec::new("accuracy", Direction::Maximize, ACCURACY),
        ObjectiveSpec::new("latency", Direction::Minimize, EXEC_LATENCY),
        ObjectiveSpec::new("cost", Direction::Minimize, TOKENS),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunCache {
    pub enabled: bool,
    pub threshold: f64,
    pub capacity: usize,
}

impl Default for RunCache {
    fn default() -> Self {
        RunCache { enabled: true, threshold: DEFAULT_THRESHOLD, capacity: DEFAULT_CAPACITY }
    }
}

/// Everything that determines a run's outcome, with file paths resolved
/// away. Its digest identifies the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub scenario: ScenarioSpec,
    pub parameters: Vec<ParamSpec>,
    pub templates: Vec<String>,
    pub optimizer: OptimizerConfig,
    pub release: FmConfig,
    pub evaluator: FmConfig,
    pub embedding: FmConfig,
    pub cache: RunCache,
    pub holdout: HoldoutConfig,
    pub gate: GateConfig,
    pub expansion: Option<ExpansionConfig>,
    pub bench: BenchSpec,
    pub penalty: Penalty,
}

impl RunSpec {
    /// Mock-backed specification over `scenario`, mainly for tests.
    pub fn mock(scenario: ScenarioSpec, bench: BenchSpec) -> RunSpec {
        let job = JobConfig {
            scenario: PathBuf::new(),
            objectives: Vec::new(),
            parameters: Vec::new(),
            templates: Vec::new(),
            optimizer: OptimizerConfig::default(),
            fms: FmSet {
                release: FmConfig::mock(FmRole::Release, "mock-release"),
                evaluator: FmConfig::mock(FmRole::Evaluator, "mock-evaluator"),
                embedding: Some(FmConfig::mock(FmRole::Embedding, "mock-embedding")),
            },
            cache: CacheConfig::default(),
            holdout: HoldoutConfig::default(),
            gate: GateConfig::default(),
            expansion: None,
            bench,
            penalty: None,
            output_dir: default_out(),
        };
        job.run_spec(scenario).expect("valid mock specification")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.scenario.validate().map_err(|e| invalid("scenario", e))?;
        self.optimizer.validate().map_err(|e| invalid("optimizer", e))?;
        for fm in [&self.release, &self.evaluator, &self.embedding] {
            fm.validate().map_err(|e| invalid(&format!("{} model", fm.role), e))?;
        }
        if !(self.cache.threshold > 0.0 && self.cache.threshold <= 1.0) {
            return Err(invalid("cache", "threshold must be in (0, 1]"));
        }
        if self.cache.capacity == 0 {
            return Err(invalid("cache", "capacity must be positive"));
        }
        if !(self.holdout.ratio > 0.0 && self.holdout.ratio < 1.0) {
            return Err(invalid("holdout", "ratio must be in (0, 1)"));
        }
        if self.scenario.instances.len() < 2 {
            return Err(invalid("scenario", "at least two instances are needed for the holdout split"));
        }
        if self.gate_index().is_none() {
            return Err(invalid("gate", format!("unknown objective `{}`", self.gate.objective)));
        }
        if !(self.gate.confidence > 0.0 && self.gate.confidence < 1.0) {
            return Err(invalid("gate", "confidence must be in (0, 1)"));
        }
        if let Some(t) = &self.optimizer.stop.threshold {
            if !self.scenario.objectives.iter().any(|o| o.name == t.objective) {
                return Err(invalid("optimizer", format!("threshold stop names unknown objective `{}`", t.objective)));
            }
        }
        for p in &self.parameters {
            if p.lo > p.hi {
                return Err(invalid("parameters", format!("`{}` has lo > hi", p.name)));
            }
        }
        for (i, text) in self.templates.iter().enumerate() {
            let t = PromptTemplate::parse(text).map_err(|e| invalid(&format!("template {i}"), e))?;
            self.scenario.check_template(&t, &self.parameters).map_err(|e| invalid(&format!("template {i}"), e))?;
        }
        for o in &self.scenario.objectives {
            self.penalty.worst(&o.evaluator_id).map_err(|e| invalid("penalty", e))?;
        }
        if let Some(x) = &self.expansion {
            x.validate(&self.scenario).map_err(|e| invalid("expansion", e))?;
        }
        Ok(())
    }

    pub fn gate_index(&self) -> Option<usize> {
        self.scenario.objectives.iter().position(|o| o.name == self.gate.objective)
    }

    pub fn digest(&self) -> CacheKey {
        content_key(&serde_json::to_vec(self).expect("run spec serializes"))
    }

    pub fn run_id(&self) -> String {
        format!("run-{}", &self.digest().to_hex()[..12])
    }
}
