//! The generation loop. All external effects (model calls, scoring,
//! sandbox validation, the wall clock) go through an [`Oracle`], so a run
//! can be replayed from its trace by swapping the oracle.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::nsga2;
use super::operators::{self, CrossoverPath, MutationPath};
use super::rng::{label, stream};
use super::selection::select_parents;
use super::{CompilationResult, Counters, GenerationSummary, OptError};
use crate::cache::{l1_key, CacheStats, HitKind, Lookup, OpKind, SemanticCache};
use crate::eval::BenchSpec;
use crate::eval::{
    aggregate, feedback_from, parallel_map, quality_gate, reflection_prompt, split_holdout, EvalError, EvaluationBench, Failure,
    FeedbackText, GoldBench, InstanceScore, QualityGateResult, Sandbox, SandboxConfig, ScoreContext, TOKENS,
};
use crate::expand::{expand, ExpandServices};
use crate::gateway::{BackendKind, Completion, Embedding, FmConfig, FmRole, Gateway, GatewayError};
use crate::job::RunSpec;
use crate::model::template::is_valid_name;
use crate::model::{
    content_key, CacheKey, Candidate, ComponentKind, Direction, Lineage, ObjectiveVector, ParameterGenome, ProblemInstance, PromptTemplate,
    Segment,
};
use crate::prompts::{self, MetaPrompt};
use crate::trace::checkpoint;
use crate::trace::{EventKind, TraceError, TraceEvent, TraceWriter};

/// Source of every nondeterministic or external answer a run needs.
pub trait Oracle: Sync {
    fn complete(&self, role: FmRole, prompt: &str) -> Result<Completion, GatewayError>;
    fn embed(&self, text: &str) -> Result<Embedding, GatewayError>;
    /// `key` identifies the scoring context in the trace.
    fn score(&self, key: &CacheKey, ctx: &ScoreContext<'_>) -> Result<InstanceScore, EvalError>;
    /// Whether the instance's reference solution passes its whole suite.
    fn validate(&self, key: &CacheKey, instance: &ProblemInstance) -> Result<bool, EvalError>;
    fn budget_exhausted(&self, generation: u32, elapsed_ms: u64) -> bool;
}

/// Answers from real gateways, the configured bench and the sandbox.
pub struct LiveOracle {
    release: Gateway,
    evaluator: Gateway,
    embedding: Gateway,
    bench: Arc<dyn EvaluationBench>,
    sandbox_config: SandboxConfig,
    sandbox: OnceLock<Result<Sandbox, EvalError>>,
    wall_budget_ms: Option<u64>,
}

impl LiveOracle {
    pub fn new(spec: &RunSpec) -> Result<Self, OptError> {
        Ok(LiveOracle {
            release: Gateway::new(spec.release.clone())?,
            evaluator: Gateway::new(spec.evaluator.clone())?,
            embedding: Gateway::new(spec.embedding.clone())?,
            bench: spec.bench.build()?,
            sandbox_config: match &spec.bench {
                BenchSpec::Gold { sandbox, .. } => sandbox.clone(),
                BenchSpec::TargetSimilarity { .. } => SandboxConfig::default(),
            },
            sandbox: OnceLock::new(),
            wall_budget_ms: spec.optimizer.stop.wall_budget_ms,
        })
    }

    pub fn gateway(&self, role: FmRole) -> &Gateway {
        match role {
            FmRole::Release => &self.release,
            FmRole::Evaluator => &self.evaluator,
            FmRole::Embedding => &self.embedding,
        }
    }

    /// Completion calls made by all gateways so far.
    pub fn completions(&self) -> u64 {
        [FmRole::Release, FmRole::Evaluator, FmRole::Embedding].iter().map(|r| self.gateway(*r).counts().completions).sum()
    }
}

impl Oracle for LiveOracle {
    fn complete(&self, role: FmRole, prompt: &str) -> Result<Completion, GatewayError> {
        self.gateway(role).complete(prompt)
    }

    fn embed(&self, text: &str) -> Result<Embedding, GatewayError> {
        self.embedding.embed(text)
    }

    fn score(&self, _key: &CacheKey, ctx: &ScoreContext<'_>) -> Result<InstanceScore, EvalError> {
        self.bench.score(ctx)
    }

    fn validate(&self, _key: &CacheKey, instance: &ProblemInstance) -> Result<bool, EvalError> {
        let sandbox = self.sandbox.get_or_init(|| Sandbox::new(self.sandbox_config.clone())).as_ref().map_err(Clone::clone)?;
        let (Some(reference), Some(suite)) = (&instance.gold.reference_solution, instance.gold.unit_tests()) else {
            return Ok(false);
        };
        let code = GoldBench::program(instance, suite.code_prefix.as_deref(), reference);
        let score = sandbox.evaluate_codegen(&instance.id, &code, suite)?;
        Ok(score.accuracy() == Some(1.0))
    }

    fn budget_exhausted(&self, _generation: u32, elapsed_ms: u64) -> bool {
        self.wall_budget_ms.is_some_and(|b| elapsed_ms >= b)
    }
}

/// Canonical bytes naming one model call; its digest keys replay lookups.
pub fn call_input(role: FmRole, text: &str) -> Vec<u8> {
    let field = if role == FmRole::Embedding { "text" } else { "prompt" };
    serde_json::to_vec(&json!({ "role": role, field: text })).expect("call input serializes")
}

/// Scoring context identity recorded with each instance score.
pub fn score_key(instance: &str, prompt: &str, completion: &str, template: &PromptTemplate, params: &BTreeMap<String, i64>) -> CacheKey {
    let v = json!({
        "instance": instance,
        "prompt": prompt,
        "completion": completion,
        "template": template.to_text(),
        "params": params,
    });
    content_key(&serde_json::to_vec(&v).expect("score key serializes"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ctx: Option<String>,
    pub score: InstanceScore,
}

/// Blob attached to `eval` and `gate` events.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalBlob {
    pub candidate: String,
    pub objectives: Vec<f64>,
    pub scores: Vec<ScoreRecord>,
}

/// Blob attached to `run_start`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStartBlob {
    pub spec: RunSpec,
    pub config_digest: String,
    pub prompts: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_snapshot: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct EvalRecord {
    objectives: Vec<f64>,
    scores: Vec<InstanceScore>,
}

/// Everything needed to continue a run from a generation boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineState {
    pub generation: u32,
    pub population: Vec<Candidate>,
    /// Guidance scores of current population members.
    pub details: BTreeMap<String, Vec<InstanceScore>>,
    /// Configuration keys of every candidate evaluated so far.
    pub archive: BTreeSet<String>,
    pub next_id: u64,
    pub feedback: Option<FeedbackText>,
    pub history: Vec<GenerationSummary>,
    pub initial: Option<Candidate>,
    pub counters: Counters,
    pub guidance: Vec<ProblemInstance>,
    pub evaluation: Vec<ProblemInstance>,
    pub threshold_reached: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointBody {
    pub state: EngineState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_stats: Option<CacheStats>,
    pub elapsed_ms: u64,
    pub trace_len: u64,
    pub chain: String,
}

/// Latest checkpoint of a run, if any.
pub fn resume_point(dir: &Path, spec: &RunSpec) -> Result<Option<(u32, CheckpointBody)>, TraceError> {
    match checkpoint::latest(dir) {
        None => Ok(None),
        Some((g, path)) => Ok(Some((g, checkpoint::read(&path, &spec.digest())?))),
    }
}

#[derive(Debug, Default)]
pub struct RunOptions {
    /// Where per-generation checkpoints are written; none when unset.
    pub checkpoint_dir: Option<PathBuf>,
    /// Stop cleanly after this generation's checkpoint.
    pub halt_after: Option<u32>,
    /// Emitted right after `run_start` (e.g. about the cache file).
    pub warnings: Vec<String>,
    /// Continue from a checkpoint instead of starting fresh.
    pub resume: Option<EngineState>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub counters: Counters,
    pub cache: Option<CacheStats>,
}

#[derive(Debug)]
pub enum RunOutcome {
    Completed(Box<CompilationResult>, RunStats),
    Halted { generation: u32 },
}

/// Intent-derived starting template: the intent as the instruction,
/// followed by every placeholder the instances bind.
pub fn base_template(spec: &RunSpec) -> PromptTemplate {
    let mut segs = vec![
        Segment::Component { kind: ComponentKind::Instruction, text: spec.scenario.intent.text.trim().to_string() },
        Segment::Static("\n\n".into()),
    ];
    let names: Vec<String> = spec.scenario.binding_schema().into_iter().filter(|n| is_valid_name(n)).collect();
    for (i, n) in names.into_iter().enumerate() {
        if i > 0 {
            segs.push(Segment::Static("\n".into()));
        }
        segs.push(Segment::Placeholder(n));
    }
    PromptTemplate::from_segments(segs).expect("base template is well formed")
}

enum Looked {
    Hit(Vec<u8>),
    Miss(Option<Embedding>),
}

struct Engine<'a> {
    spec: &'a RunSpec,
    oracle: &'a dyn Oracle,
    cache: Option<&'a SemanticCache>,
    trace: &'a mut TraceWriter,
    l1: CacheKey,
    st: EngineState,
    eval_scope: BTreeMap<String, String>,
}

/// Runs (or resumes) a compilation.
pub fn compile(
    spec: &RunSpec,
    oracle: &dyn Oracle,
    cache: Option<&SemanticCache>,
    trace: &mut TraceWriter,
    opts: RunOptions,
) -> Result<RunOutcome, OptError> {
    spec.validate().map_err(|e| OptError::Config(e.to_string()))?;
    let l1 = l1_key(&spec.scenario.intent.text, &spec.scenario.data_description);
    let resumed = opts.resume.is_some();
    let st = opts.resume.clone().unwrap_or(EngineState {
        generation: 0,
        population: Vec::new(),
        details: BTreeMap::new(),
        archive: BTreeSet::new(),
        next_id: 0,
        feedback: None,
        history: Vec::new(),
        initial: None,
        counters: Counters::default(),
        guidance: Vec::new(),
        evaluation: Vec::new(),
        threshold_reached: false,
    });
    let mut e = Engine { spec, oracle, cache, trace, l1, st, eval_scope: BTreeMap::new() };
    if !resumed {
        e.start(&opts.warnings)?;
    }
    e.run(&opts)
}

impl<'a> Engine<'a> {
    fn seed(&self) -> u64 {
        self.spec.optimizer.master_seed
    }

    fn objectives(&self) -> &'a [crate::model::ObjectiveSpec] {
        &self.spec.scenario.objectives
    }

    fn emit(&mut self, ev: TraceEvent) -> Result<u64, OptError> {
        Ok(self.trace.emit(ev)?)
    }

    fn blob<T: Serialize + ?Sized>(&mut self, v: &T) -> Result<String, OptError> {
        Ok(self.trace.put_json(v)?)
    }

    fn text_blob(&mut self, text: &str) -> Result<String, OptError> {
        Ok(self.trace.put_blob(text.as_bytes())?)
    }

    fn warn(&mut self, message: &str, data: serde_json::Value) -> Result<(), OptError> {
        let mut d = json!({ "message": message });
        if let (Some(m), serde_json::Value::Object(extra)) = (d.as_object_mut(), data) {
            m.extend(extra);
        }
        self.emit(TraceEvent::new(EventKind::Warning).data(d))?;
        Ok(())
    }

    fn fm_config(&self, role: FmRole) -> &'a FmConfig {
        match role {
            FmRole::Release => &self.spec.release,
            FmRole::Evaluator => &self.spec.evaluator,
            FmRole::Embedding => &self.spec.embedding,
        }
    }

    fn log_completion(&mut self, role: FmRole, prompt: &str, r: &Result<Completion, GatewayError>, label: &str) -> Result<(), OptError> {
        let inputs = self.trace.put_blob(&call_input(role, prompt))?;
        let model = self.fm_config(role).model_id.clone();
        let mut ev = TraceEvent::new(EventKind::FmCall).label(label).inputs(inputs);
        match r {
            Ok(c) => {
                let out = self.blob(&c.without_latency())?;
                ev = ev
                    .outputs(out)
                    .tokens(c.total_tokens())
                    .latency_ms(c.wall_latency.as_millis() as u64)
                    .data(json!({ "role": role, "model": model }));
            }
            Err(err) => ev = ev.data(json!({ "role": role, "model": model, "error": err })),
        }
        self.st.counters.completions += 1;
        self.emit(ev)?;
        Ok(())
    }

    fn embed_logged(&mut self, text: &str) -> Result<Embedding, OptError> {
        let r = self.oracle.embed(text);
        let inputs = self.trace.put_blob(&call_input(FmRole::Embedding, text))?;
        let model = self.spec.embedding.model_id.clone();
        let mut ev = TraceEvent::new(EventKind::FmCall).label("embed").inputs(inputs);
        match &r {
            Ok(v) => {
                let out = self.blob(v)?;
                ev = ev.outputs(out).data(json!({ "role": FmRole::Embedding, "model": model }));
            }
            Err(err) => ev = ev.data(json!({ "role": FmRole::Embedding, "model": model, "error": err })),
        }
        self.st.counters.embeddings += 1;
        self.emit(ev)?;
        Ok(r?)
    }

    fn lookup(&mut self, op: OpKind, text: &str, label: &str) -> Result<Looked, OptError> {
        let Some(cache) = self.cache else { return Ok(Looked::Miss(None)) };
        let l1 = self.l1;
        let found = match cache.lookup(&l1, op, text, || self.embed_logged(text)) {
            Ok(l) => l,
            Err(OptError::Gateway(_)) => Lookup::Miss { embedding: None },
            Err(e) => return Err(e),
        };
        let inputs = self.text_blob(text)?;
        match found {
            Lookup::Hit { payload, kind, similarity, embedding, .. } => {
                if kind == HitKind::Semantic {
                    cache.insert(&l1, op, text, embedding.as_ref(), payload.clone());
                }
                self.st.counters.cache_hits += 1;
                self.emit(
                    TraceEvent::new(EventKind::CacheHit)
                        .label(label)
                        .inputs(inputs)
                        .data(json!({ "op": op.name(), "match": kind, "similarity": similarity })),
                )?;
                Ok(Looked::Hit(payload))
            }
            Lookup::Miss { embedding } => {
                self.st.counters.cache_misses += 1;
                self.emit(TraceEvent::new(EventKind::CacheMiss).label(label).inputs(inputs).data(json!({ "op": op.name() })))?;
                Ok(Looked::Miss(embedding))
            }
        }
    }

    fn store(&mut self, op: OpKind, text: &str, embedding: Option<&Embedding>, payload: Vec<u8>) {
        if let Some(cache) = self.cache {
            cache.insert(&self.l1, op, text, embedding, payload);
        }
    }

    fn cache_text(&self, role: FmRole, prompt: &str) -> String {
        format!("[{}:{}]\n{}", role, self.fm_config(role).model_id, prompt)
    }

    /// One cached model call; the outer error is fatal, the inner one is
    /// the model's.
    fn fm(&mut self, op: OpKind, role: FmRole, prompt: &str, label: &str) -> Result<Result<Completion, GatewayError>, OptError> {
        let text = self.cache_text(role, prompt);
        let embedding = match self.lookup(op, &text, label)? {
            Looked::Hit(payload) => {
                let c: Completion = serde_json::from_slice(&payload).map_err(|e| OptError::Config(format!("cache payload: {e}")))?;
                return Ok(Ok(c));
            }
            Looked::Miss(e) => e,
        };
        let r = self.oracle.complete(role, prompt);
        self.log_completion(role, prompt, &r, label)?;
        if let Ok(c) = &r {
            let payload = serde_json::to_vec(&c.without_latency()).expect("completion serializes");
            self.store(op, &text, embedding.as_ref(), payload);
        }
        Ok(r)
    }

    fn new_id(&mut self) -> String {
        self.st.next_id += 1;
        format!("c{:04}", self.st.next_id)
    }

    fn start(&mut self, warnings: &[String]) -> Result<(), OptError> {
        let snapshot = match self.cache {
            Some(c) if !c.is_empty() => Some(self.trace.put_blob(&c.to_bytes())?),
            _ => None,
        };
        let blob = RunStartBlob {
            spec: self.spec.clone(),
            config_digest: self.spec.digest().to_hex(),
            prompts: prompts::digests(),
            cache_snapshot: snapshot,
        };
        let inputs = self.blob(&blob)?;
        let entries = self.cache.map(|c| c.len());
        self.emit(
            TraceEvent::new(EventKind::RunStart)
                .label(self.spec.run_id())
                .inputs(inputs)
                .data(json!({ "config_digest": blob.config_digest, "cache_entries": entries })),
        )?;
        for w in warnings {
            self.warn(w, json!({ "source": "startup" }))?;
        }
        let (guidance, evaluation) = split_holdout(&self.spec.scenario.instances, self.spec.holdout.ratio, self.spec.holdout.seed)?;
        self.st.guidance = guidance;
        self.st.evaluation = evaluation;
        if let Some(cfg) = self.spec.expansion.clone() {
            let mut rng = stream(self.seed(), "expansion", 0);
            let originals = self.st.guidance.clone();
            let intent = self.spec.scenario.intent.clone();
            let mut host = ExpandHost { engine: self, fatal: None };
            let added = expand(&intent, &originals, &cfg, &mut rng, &mut host);
            if let Some(e) = host.fatal {
                return Err(e);
            }
            self.st.guidance.extend(added?);
        }
        Ok(())
    }

    fn run(&mut self, opts: &RunOptions) -> Result<RunOutcome, OptError> {
        let total = self.spec.optimizer.generations;
        let mut budget_exhausted = false;
        while self.st.generation < total && !self.st.threshold_reached {
            let g = self.st.generation + 1;
            if g >= 2 && self.oracle.budget_exhausted(g, self.trace.elapsed_ms()) {
                self.warn("wall-clock budget exhausted", json!({ "budget_exhausted": true, "generation": g }))?;
                budget_exhausted = true;
                break;
            }
            self.emit(TraceEvent::new(EventKind::GenStart).label(format!("g{g}")).data(json!({ "generation": g })))?;
            if g == 1 {
                self.initial_generation()?;
            } else {
                self.next_generation(g)?;
            }
            self.st.generation = g;
            self.summarize(g);
            self.st.threshold_reached = self.threshold_met();
            if self.spec.optimizer.self_reflection && g < total && !self.st.threshold_reached {
                self.reflect(g)?;
            }
            self.checkpoint(opts)?;
            if opts.halt_after == Some(g) && g < total && !self.st.threshold_reached {
                self.trace.flush()?;
                return Ok(RunOutcome::Halted { generation: g });
            }
        }
        self.finish(budget_exhausted)
    }

    fn summarize(&mut self, g: u32) {
        let specs = self.objectives();
        let best = specs
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let vals = self.st.population.iter().map(|c| c.objectives.as_ref().expect("evaluated").values()[i]);
                match s.direction {
                    Direction::Maximize => vals.fold(f64::NEG_INFINITY, f64::max),
                    Direction::Minimize => vals.fold(f64::INFINITY, f64::min),
                }
            })
            .collect();
        let front_size = self.st.population.iter().filter(|c| c.rank == Some(0)).count();
        self.st.history.push(GenerationSummary { generation: g, best, front_size });
    }

    fn threshold_met(&self) -> bool {
        let Some(t) = &self.spec.optimizer.stop.threshold else { return false };
        let specs = self.objectives();
        let Some(i) = specs.iter().position(|s| s.name == t.objective) else { return false };
        self.st.population.iter().any(|c| {
            let v = c.objectives.as_ref().expect("evaluated").values()[i];
            match specs[i].direction {
                Direction::Maximize => v >= t.value,
                Direction::Minimize => v <= t.value,
            }
        })
    }

    fn initial_generation(&mut self) -> Result<(), OptError> {
        let pop = self.spec.optimizer.population_size;
        let mut templates: Vec<(PromptTemplate, Option<Lineage>)> =
            self.spec.templates.iter().take(pop).map(|t| (PromptTemplate::parse(t).expect("validated template"), None)).collect();
        let base = base_template(self.spec);
        if templates.is_empty() {
            templates.push((base.clone(), None));
        }
        let mut seen: BTreeSet<String> = templates.iter().map(|(t, _)| t.content_key().to_hex()).collect();
        let mut rng = stream(self.seed(), "synthesis", 1);
        let wanted: BTreeSet<&str> = base.placeholders().collect();
        let mock = self.spec.evaluator.backend == BackendKind::Mock;
        let mut index = 0;
        while templates.len() < pop {
            index += 1;
            let mut path = "token";
            let mut variant = None;
            if !mock {
                let prompt = MetaPrompt::Synthesis
                    .render(&[("intent", &self.spec.scenario.intent.text), ("template", &base.to_text()), ("index", &index.to_string())])
                    .expect("synthesis prompt variables are complete");
                if let Ok(c) = self.fm(OpKind::Mutation, FmRole::Evaluator, &prompt, "synthesis")? {
                    let cleaned = operators::clean_response(&c.text);
                    if let Ok(t) = PromptTemplate::parse(&cleaned) {
                        let same: BTreeSet<&str> = t.placeholders().collect();
                        if same == wanted && !cleaned.is_empty() && !seen.contains(&t.content_key().to_hex()) {
                            variant = Some(t.with_version(base.version() + 1));
                            path = "fm";
                        }
                    }
                }
            }
            let t = match variant {
                Some(t) => t,
                None => {
                    let mut t = base.clone();
                    for _ in 0..100 {
                        match operators::token_mutate(&t, &mut rng) {
                            Some(m) => t = m,
                            None => break,
                        }
                        if !seen.contains(&t.content_key().to_hex()) {
                            break;
                        }
                    }
                    t
                }
            };
            seen.insert(t.content_key().to_hex());
            let lineage = Lineage { parents: Vec::new(), operator: format!("synthesis:{path}") };
            templates.push((t, Some(lineage)));
        }
        let mut genome_rng = stream(self.seed(), "genome", 1);
        let mut novelty = stream(self.seed(), "novelty", 1);
        let mut batch: BTreeSet<String> = BTreeSet::new();
        let mut cands = Vec::with_capacity(pop);
        for (t, lineage) in templates {
            let g = ParameterGenome::random(&self.spec.parameters, &mut genome_rng);
            let (t, g) = self.make_novel(t, g, &batch, &mut novelty);
            batch.insert(crate::model::config_key(&t, &g).to_hex());
            let id = self.new_id();
            let mut c = Candidate::new(id, 1, t, g);
            if let Some(l) = lineage {
                let outputs = self.text_blob(&c.template.to_text())?;
                self.st.counters.mutations += 1;
                self.emit(
                    TraceEvent::new(EventKind::Mutate)
                        .label(c.id.clone())
                        .outputs(outputs)
                        .rng(label("synthesis", 1))
                        .data(json!({ "operator": l.operator })),
                )?;
                c.lineage = Some(l);
            }
            cands.push(c);
        }
        let guidance = self.st.guidance.clone();
        let scores = self.evaluate(&mut cands, &guidance, EventKind::Eval)?;
        for (c, s) in cands.iter().zip(scores) {
            self.st.archive.insert(c.config_key().to_hex());
            self.st.details.insert(c.id.clone(), s);
        }
        nsga2::assign(&mut cands, self.objectives())?;
        self.st.initial = Some(cands[0].clone());
        self.st.population = cands;
        Ok(())
    }

    /// Perturbs a child until its configuration is new to the run, giving up
    /// after 100 attempts.
    fn make_novel<R: Rng>(
        &self,
        mut t: PromptTemplate,
        mut g: ParameterGenome,
        batch: &BTreeSet<String>,
        rng: &mut R,
    ) -> (PromptTemplate, ParameterGenome) {
        let taken = |t: &PromptTemplate, g: &ParameterGenome| {
            let k = crate::model::config_key(t, g).to_hex();
            self.st.archive.contains(&k) || batch.contains(&k)
        };
        let mut tries = 0;
        while taken(&t, &g) && tries < 100 {
            tries += 1;
            match operators::token_mutate(&t, rng) {
                Some(m) => t = m,
                None if !g.is_empty() => g = operators::mutate_genome(&g, 0.5, rng),
                None => break,
            }
        }
        (t, g)
    }

    fn next_generation(&mut self, gen: u32) -> Result<(), OptError> {
        let pop = self.spec.optimizer.population_size;
        let ops = self.spec.optimizer.operators.clone();
        let intent = self.spec.scenario.intent.clone();
        let seed = self.seed();
        let mut sel_rng = stream(seed, "selection", gen);
        let k = pop + pop % 2;
        let pairs = select_parents(&self.st.population, k, self.spec.optimizer.tournament_size, &mut sel_rng);
        let ids: Vec<[String; 2]> =
            pairs.iter().map(|&(a, b)| [self.st.population[a].id.clone(), self.st.population[b].id.clone()]).collect();
        self.emit(TraceEvent::new(EventKind::Select).label(format!("g{gen}")).rng(label("selection", gen)).data(json!({ "pairs": ids })))?;

        let mut x_rng = stream(seed, "crossover", gen);
        let mut m_rng = stream(seed, "mutation", gen);
        let mut g_rng = stream(seed, "genome", gen);
        let mut novelty = stream(seed, "novelty", gen);
        let feedback = self.st.feedback.clone();
        let mut batch: BTreeSet<String> = BTreeSet::new();
        let mut offspring: Vec<Candidate> = Vec::with_capacity(pop);
        for &(a, b) in &pairs {
            let pa = self.st.population[a].clone();
            let pb = self.st.population[b].clone();
            for (first, second) in [(&pa, &pb), (&pb, &pa)] {
                if offspring.len() == pop {
                    break;
                }
                let id = self.new_id();
                let (template, genome, mut operator) = if ops.crossover {
                    let mut fatal = None;
                    let (t, path) = {
                        let mut call = |op: OpKind, prompt: &str| self.operator_call(op, prompt, &id, &mut fatal);
                        operators::crossover_templates(&first.template, &second.template, &intent, &mut x_rng, &mut call)
                    };
                    if let Some(e) = fatal {
                        return Err(e);
                    }
                    let g = operators::crossover_genome(&first.genome, &second.genome, &mut x_rng);
                    let outputs = self.text_blob(&t.to_text())?;
                    self.st.counters.crossovers += 1;
                    let path_name = match path {
                        CrossoverPath::Fm => "fm",
                        CrossoverPath::Fallback => "fallback",
                        CrossoverPath::Disabled => "disabled",
                    };
                    self.emit(
                        TraceEvent::new(EventKind::Crossover)
                            .label(id.clone())
                            .outputs(outputs)
                            .rng(label("crossover", gen))
                            .data(json!({ "parents": [first.id, second.id], "path": path_name })),
                    )?;
                    (t, g, format!("crossover:{path_name}"))
                } else {
                    (first.template.clone(), first.genome.clone(), "copy".to_string())
                };
                let mut fatal = None;
                let (t, mpath) = {
                    let mut call = |op: OpKind, prompt: &str| self.operator_call(op, prompt, &id, &mut fatal);
                    operators::mutate_template(&template, &intent, feedback.as_ref(), &ops, &mut m_rng, &mut call)
                };
                if let Some(e) = fatal {
                    return Err(e);
                }
                let g = operators::mutate_genome(&genome, ops.bitflip_prob, &mut g_rng);
                let (t, g) = self.make_novel(t, g, &batch, &mut novelty);
                batch.insert(crate::model::config_key(&t, &g).to_hex());
                let mpath_name = match mpath {
                    MutationPath::Identity => "identity",
                    MutationPath::Fm => "fm",
                    MutationPath::Token => "token",
                    MutationPath::FmFallback => "fm_fallback",
                };
                let outputs = self.text_blob(&t.to_text())?;
                self.st.counters.mutations += 1;
                self.emit(
                    TraceEvent::new(EventKind::Mutate)
                        .label(id.clone())
                        .outputs(outputs)
                        .rng(label("mutation", gen))
                        .data(json!({ "path": mpath_name, "feedback": feedback.is_some() })),
                )?;
                operator.push_str(&format!("+mutation:{mpath_name}"));
                let mut child = Candidate::new(id, gen, t, g);
                child.lineage = Some(Lineage { parents: vec![first.id.clone(), second.id.clone()], operator });
                offspring.push(child);
            }
        }

        let guidance = self.st.guidance.clone();
        let scores = self.evaluate(&mut offspring, &guidance, EventKind::Eval)?;
        for (c, s) in offspring.iter().zip(scores) {
            self.st.archive.insert(c.config_key().to_hex());
            self.st.details.insert(c.id.clone(), s);
        }
        let mut pool = std::mem::take(&mut self.st.population);
        pool.extend(offspring);
        self.st.population = nsga2::environmental_selection(pool, self.objectives(), pop)?;
        let alive: BTreeSet<&String> = self.st.population.iter().map(|c| &c.id).collect();
        self.st.details.retain(|id, _| alive.contains(id));
        Ok(())
    }

    fn operator_call(&mut self, op: OpKind, prompt: &str, label: &str, fatal: &mut Option<OptError>) -> Result<String, GatewayError> {
        match self.fm(op, FmRole::Evaluator, prompt, label) {
            Ok(r) => r.map(|c| c.text),
            Err(e) => {
                *fatal = Some(e);
                Err(GatewayError::TransportFailure("run aborted".into()))
            }
        }
    }

    fn gate_pick(&self, among: &[usize]) -> Vec<usize> {
        let gi = self.spec.gate_index().expect("validated gate objective");
        let dir = self.objectives()[gi].direction;
        let value = |i: usize| self.st.population[i].objectives.as_ref().expect("evaluated").values()[gi];
        let mut best: Vec<usize> = Vec::new();
        for &i in among {
            match best.first() {
                None => best.push(i),
                Some(&b) if dir.better(value(i), value(b)) => best = vec![i],
                Some(&b) if value(i) == value(b) => best.push(i),
                _ => {}
            }
        }
        best
    }

    fn reflect(&mut self, gen: u32) -> Result<(), OptError> {
        let all: Vec<usize> = (0..self.st.population.len()).collect();
        let best = self.gate_pick(&all)[0];
        let cand = self.st.population[best].clone();
        let Some(scores) = self.st.details.get(&cand.id).cloned() else { return Ok(()) };
        let guidance = self.st.guidance.clone();
        let failing: Vec<(&ProblemInstance, &InstanceScore)> = scores
            .iter()
            .filter(|s| s.error.is_some() || s.accuracy().is_some_and(|a| a < 1.0))
            .filter_map(|s| guidance.iter().find(|i| i.id == s.instance_id).map(|i| (i, s)))
            .collect();
        if failing.is_empty() {
            return Ok(());
        }
        let failures: Vec<Failure<'_>> = failing.iter().map(|(i, s)| Failure { instance: i, detail: &s.failure_detail }).collect();
        let prompt = reflection_prompt(&cand.template, &self.spec.scenario.intent, &failures);
        let label_text = format!("reflect:{}", cand.id);
        let r = self.fm(OpKind::Inference, FmRole::Evaluator, &prompt, &label_text)?;
        let inputs = self.text_blob(&prompt)?;
        self.st.counters.reflections += 1;
        match r {
            Ok(c) => {
                let fb = feedback_from(&c, &failures, self.spec.optimizer.feedback_cap);
                let outputs = self.blob(&fb)?;
                self.emit(
                    TraceEvent::new(EventKind::Reflect)
                        .label(cand.id.clone())
                        .inputs(inputs)
                        .outputs(outputs)
                        .data(json!({ "generation": gen, "generality_checked": fb.generality_checked })),
                )?;
                self.st.feedback = Some(fb);
            }
            Err(e) => {
                self.emit(
                    TraceEvent::new(EventKind::Reflect)
                        .label(cand.id.clone())
                        .inputs(inputs)
                        .data(json!({ "generation": gen, "error": e })),
                )?;
            }
        }
        Ok(())
    }

    fn checkpoint(&mut self, opts: &RunOptions) -> Result<(), OptError> {
        let g = self.st.generation;
        let digest = content_key(&serde_json::to_vec(&self.st).expect("state serializes")).to_hex();
        self.emit(TraceEvent::new(EventKind::Checkpoint).label(format!("g{g}")).data(json!({ "generation": g, "state": digest })))?;
        self.trace.flush()?;
        if let Some(dir) = &opts.checkpoint_dir {
            std::fs::create_dir_all(dir).map_err(|e| TraceError::Io(e.to_string()))?;
            if let Some(cache) = self.cache {
                cache.persist(&checkpoint::cache_snapshot_path(dir, g)).map_err(|e| TraceError::Io(e.to_string()))?;
            }
            let body = CheckpointBody {
                state: self.st.clone(),
                cache_stats: self.cache.map(|c| c.stats()),
                elapsed_ms: self.trace.elapsed_ms(),
                trace_len: self.trace.seq(),
                chain: self.trace.chain().to_string(),
            };
            checkpoint::write(&checkpoint::checkpoint_path(dir, g), &self.spec.digest(), &body)?;
        }
        Ok(())
    }

    fn finish(&mut self, budget_exhausted: bool) -> Result<RunOutcome, OptError> {
        let front: Vec<usize> = (0..self.st.population.len()).filter(|&i| self.st.population[i].rank == Some(0)).collect();
        let by_gate = self.gate_pick(&front);
        let mut best_crowd: Vec<usize> = Vec::new();
        for &i in &by_gate {
            let c = self.st.population[i].crowding.unwrap_or(0.0);
            match best_crowd.first().map(|&b| self.st.population[b].crowding.unwrap_or(0.0)) {
                None => best_crowd.push(i),
                Some(bc) if c > bc => best_crowd = vec![i],
                Some(bc) if c == bc => best_crowd.push(i),
                _ => {}
            }
        }
        let pick = if best_crowd.len() == 1 {
            best_crowd[0]
        } else {
            let mut rng = stream(self.seed(), "tiebreak", self.st.generation);
            best_crowd[rng.random_range(0..best_crowd.len())]
        };
        let best = self.st.population[pick].clone();

        let evaluation = self.st.evaluation.clone();
        let mut probe = vec![best.clone()];
        let scores = self.evaluate(&mut probe, &evaluation, EventKind::Gate)?.remove(0);
        let gate = self.gate_result(&scores);

        let result = CompilationResult {
            objectives: self.objectives().to_vec(),
            pareto_front: front.iter().map(|&i| self.st.population[i].clone()).collect(),
            best,
            initial: self.st.initial.clone().expect("initial generation ran"),
            generations_run: self.st.generation,
            gate,
            budget_exhausted,
            threshold_reached: self.st.threshold_reached,
            history: self.st.history.clone(),
        };
        let stats = RunStats { counters: self.st.counters, cache: self.cache.map(|c| c.stats()) };
        let outputs = self.trace.put_blob(&result.to_json())?;
        self.emit(
            TraceEvent::new(EventKind::RunEnd)
                .label(self.spec.run_id())
                .outputs(outputs)
                .data(json!({ "counters": stats.counters, "cache": stats.cache, "generations_run": result.generations_run })),
        )?;
        self.trace.flush()?;
        Ok(RunOutcome::Completed(Box::new(result), stats))
    }

    fn gate_result(&self, scores: &[InstanceScore]) -> QualityGateResult {
        let gi = self.spec.gate_index().expect("validated gate objective");
        let spec = &self.objectives()[gi];
        let pass_at = self.spec.gate.pass_at;
        let outcomes: Vec<bool> = scores
            .iter()
            .map(|s| match (&s.error, s.metrics.get(&spec.evaluator_id)) {
                (None, Some(&v)) => match spec.direction {
                    Direction::Maximize => v >= pass_at,
                    Direction::Minimize => v <= pass_at,
                },
                _ => false,
            })
            .collect();
        quality_gate(&outcomes, self.spec.gate.threshold, self.spec.gate.confidence)
    }

    fn scope_digest(&mut self, instances: &[ProblemInstance]) -> String {
        let ids: Vec<&str> = instances.iter().map(|i| i.id.as_str()).collect();
        let key = ids.join("\u{1f}");
        if let Some(d) = self.eval_scope.get(&key) {
            return d.clone();
        }
        let v = json!({
            "instances": instances,
            "bench": self.spec.bench,
            "penalty": self.spec.penalty,
            "objectives": self.spec.scenario.objectives,
            "release": self.spec.release,
        });
        let d = content_key(&serde_json::to_vec(&v).expect("scope serializes")).to_hex();
        self.eval_scope.insert(key, d.clone());
        d
    }

    /// Scores each candidate on `instances`, setting its objectives and
    /// returning the per-instance scores.
    fn evaluate(
        &mut self,
        cands: &mut [Candidate],
        instances: &[ProblemInstance],
        kind: EventKind,
    ) -> Result<Vec<Vec<InstanceScore>>, OptError> {
        let scope = self.scope_digest(instances);
        let eval_text = |c: &Candidate| format!("eval|{scope}|{}", c.config_key().to_hex());
        let mut out: Vec<Option<Vec<InstanceScore>>> = vec![None; cands.len()];
        let mut pending = Vec::new();
        for (ci, c) in cands.iter_mut().enumerate() {
            match self.lookup(OpKind::Evaluation, &eval_text(c), &c.id)? {
                Looked::Hit(payload) => {
                    let rec: EvalRecord = serde_json::from_slice(&payload).map_err(|e| OptError::Config(format!("cache payload: {e}")))?;
                    c.objectives = Some(ObjectiveVector(rec.objectives));
                    out[ci] = Some(rec.scores);
                }
                Looked::Miss(_) => pending.push(ci),
            }
        }

        struct Job {
            cand: usize,
            inst: usize,
            prompt: Result<String, String>,
            completion: Option<Result<Completion, GatewayError>>,
        }
        let mut jobs: Vec<Job> = Vec::new();
        for &ci in &pending {
            let c = &cands[ci];
            let params = c.genome.values();
            for (ii, inst) in instances.iter().enumerate() {
                let mut bindings = inst.bindings.clone();
                for (k, v) in &params {
                    bindings.insert(k.clone(), v.to_string());
                }
                let fill_text =
                    format!("fill|{}|{}", c.template.content_key().to_hex(), serde_json::to_string(&bindings).expect("bindings serialize"));
                let label = format!("{}/{}", c.id, inst.id);
                let prompt = match self.lookup(OpKind::Fill, &fill_text, &label)? {
                    Looked::Hit(p) => Ok(String::from_utf8(p).map_err(|e| OptError::Config(format!("cache payload: {e}")))?),
                    Looked::Miss(_) => {
                        let rendered = c.template.render(&bindings).map_err(|e| e.to_string());
                        let inputs = self.text_blob(&fill_text)?;
                        let mut ev = TraceEvent::new(EventKind::Fill).label(label).inputs(inputs);
                        match &rendered {
                            Ok(p) => {
                                ev = ev.outputs(self.text_blob(p)?);
                                self.store(OpKind::Fill, &fill_text, None, p.as_bytes().to_vec());
                            }
                            Err(e) => ev = ev.data(json!({ "error": e })),
                        }
                        self.st.counters.fills += 1;
                        self.emit(ev)?;
                        rendered
                    }
                };
                jobs.push(Job { cand: ci, inst: ii, prompt, completion: None });
            }
        }

        // Release-model inference: cache lookups in order, then the distinct
        // misses in parallel.
        let mut unique: Vec<(String, Option<Embedding>, Vec<usize>)> = Vec::new();
        let mut by_prompt: BTreeMap<String, usize> = BTreeMap::new();
        for j in 0..jobs.len() {
            let Ok(prompt) = jobs[j].prompt.clone() else { continue };
            if self.cache.is_some() {
                if let Some(&u) = by_prompt.get(&prompt) {
                    unique[u].2.push(j);
                    continue;
                }
            }
            let text = self.cache_text(FmRole::Release, &prompt);
            let label = format!("{}/{}", cands[jobs[j].cand].id, instances[jobs[j].inst].id);
            match self.lookup(OpKind::Inference, &text, &label)? {
                Looked::Hit(payload) => {
                    let c: Completion = serde_json::from_slice(&payload).map_err(|e| OptError::Config(format!("cache payload: {e}")))?;
                    jobs[j].completion = Some(Ok(c));
                }
                Looked::Miss(emb) => {
                    by_prompt.insert(prompt.clone(), unique.len());
                    unique.push((prompt, emb, vec![j]));
                }
            }
        }
        let oracle = self.oracle;
        let prompts: Vec<&str> = unique.iter().map(|u| u.0.as_str()).collect();
        let results = parallel_map(&prompts, self.spec.optimizer.workers, |p| oracle.complete(FmRole::Release, p));
        for ((prompt, emb, members), r) in unique.iter().zip(results) {
            let label = format!("{}/{}", cands[jobs[members[0]].cand].id, instances[jobs[members[0]].inst].id);
            self.log_completion(FmRole::Release, prompt, &r, &label)?;
            if let Ok(c) = &r {
                let text = self.cache_text(FmRole::Release, prompt);
                self.store(
                    OpKind::Inference,
                    &text,
                    emb.as_ref(),
                    serde_json::to_vec(&c.without_latency()).expect("completion serializes"),
                );
            }
            for &j in members {
                jobs[j].completion = Some(r.clone().map(|c| c.without_latency()));
            }
        }

        // Scoring.
        struct Scored {
            ctx: Option<CacheKey>,
            result: Result<InstanceScore, EvalError>,
        }
        let scored: Vec<Scored> = {
            let cands_ref: &[Candidate] = cands;
            parallel_map(&jobs, self.spec.optimizer.workers, |job| {
                let inst = &instances[job.inst];
                let cand = &cands_ref[job.cand];
                let prompt = match &job.prompt {
                    Ok(p) => p,
                    Err(e) => return Scored { ctx: None, result: Ok(InstanceScore::errored(&inst.id, format!("render: {e}"))) },
                };
                let completion = match job.completion.as_ref().expect("inference resolved") {
                    Ok(c) => c,
                    Err(e) => return Scored { ctx: None, result: Ok(InstanceScore::errored(&inst.id, e.to_string())) },
                };
                let params = cand.genome.values();
                let key = score_key(&inst.id, prompt, &completion.text, &cand.template, &params);
                let ctx = ScoreContext { instance: inst, prompt, completion, template: &cand.template, params: &params };
                let result = oracle.score(&key, &ctx).map(|mut s| {
                    if s.error.is_none() {
                        s.metrics.insert(TOKENS.into(), completion.total_tokens() as f64);
                    }
                    s
                });
                Scored { ctx: Some(key), result }
            })
        };
        let mut per_cand: BTreeMap<usize, Vec<ScoreRecord>> = BTreeMap::new();
        for (job, s) in jobs.iter().zip(scored) {
            let score = match s.result {
                Ok(score) => score,
                Err(e @ EvalError::SandboxUnavailable(_)) => return Err(e.into()),
                Err(e) => InstanceScore::errored(&instances[job.inst].id, e.to_string()),
            };
            per_cand.entry(job.cand).or_default().push(ScoreRecord { ctx: s.ctx.map(|k| k.to_hex()), score });
        }

        for ci in pending {
            let records = per_cand.remove(&ci).unwrap_or_default();
            let scores: Vec<InstanceScore> = records.iter().map(|r| r.score.clone()).collect();
            let objectives = aggregate(&scores, self.objectives(), &self.spec.penalty)?;
            let c = &mut cands[ci];
            c.objectives = Some(objectives.clone());
            let blob = EvalBlob { candidate: c.id.clone(), objectives: objectives.0.clone(), scores: records };
            let cand_json = json!({ "id": c.id, "template": c.template.to_text(), "genome": c.genome.values() });
            let id = c.id.clone();
            let key_text = eval_text(c);
            let inputs = self.blob(&cand_json)?;
            let outputs = self.blob(&blob)?;
            let mut data = json!({ "candidate": id, "objectives": objectives.0 });
            if kind == EventKind::Gate {
                data["gate"] = json!(self.gate_result(&scores));
            } else {
                self.st.counters.evaluations += 1;
            }
            self.emit(TraceEvent::new(kind).label(id).inputs(inputs).outputs(outputs).data(data))?;
            let rec = EvalRecord { objectives: objectives.0, scores: scores.clone() };
            self.store(OpKind::Evaluation, &key_text, None, serde_json::to_vec(&rec).expect("record serializes"));
            out[ci] = Some(scores);
        }
        Ok(out.into_iter().map(|s| s.expect("every candidate scored")).collect())
    }
}

struct ExpandHost<'e, 'a> {
    engine: &'e mut Engine<'a>,
    fatal: Option<OptError>,
}

impl ExpandServices for ExpandHost<'_, '_> {
    fn complete(&mut self, prompt: &str) -> Result<String, GatewayError> {
        if self.fatal.is_some() {
            return Err(GatewayError::TransportFailure("run aborted".into()));
        }
        let mut fatal = None;
        let r = self.engine.operator_call(OpKind::Inference, prompt, "expand", &mut fatal);
        if fatal.is_some() {
            self.fatal = fatal;
        }
        r
    }

    fn validate(&mut self, instance: &ProblemInstance) -> Result<bool, EvalError> {
        let bytes = serde_json::to_vec(instance).expect("instance serializes");
        let key = content_key(&bytes);
        let r = self.engine.oracle.validate(&key, instance);
        let logged = (|| -> Result<(), OptError> {
            let inputs = self.engine.trace.put_blob(&bytes)?;
            let data = match &r {
                Ok(v) => json!({ "valid": v }),
                Err(e) => json!({ "error": e }),
            };
            self.engine.emit(TraceEvent::new(EventKind::Eval).label(format!("validate:{}", instance.id)).inputs(inputs).data(data))?;
            Ok(())
        })();
        if let Err(e) = logged {
            self.fatal.get_or_insert(e);
        }
        r
    }

    fn warn(&mut self, message: String) {
        if let Err(e) = self.engine.warn(&message, json!({ "source": "expansion" })) {
            self.fatal.get_or_insert(e);
        }
    }
}
