//! Scenario expansion: new problem instances derived from existing ones.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{extract_code, EvalError};
use crate::gateway::GatewayError;
use crate::model::{Expected, Intent, Origin, ProblemInstance, ScenarioSpec, TestCase};
use crate::prompts::MetaPrompt;

#[derive(Debug, Error)]
pub enum ExpandError {
    #[error("instance `{0}` has no reference solution for test synthesis")]
    MissingReference(String),
    #[error("instance `{0}` is not graded by unit tests")]
    NotUnitTests(String),
    #[error("instance `{instance}` has no `{binding}` binding")]
    MissingBinding { instance: String, binding: String },
    #[error("synthesized instance `{0}` is inconsistent with its reference solution")]
    InvalidInstance(String),
    #[error(transparent)]
    Sandbox(#[from] EvalError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpansionKind {
    ParaphraseDescription,
    ReorderExamples,
    SynthesizeTests,
}

impl ExpansionKind {
    pub fn name(self) -> &'static str {
        match self {
            ExpansionKind::ParaphraseDescription => "paraphrase_description",
            ExpansionKind::ReorderExamples => "reorder_examples",
            ExpansionKind::SynthesizeTests => "synthesize_tests",
        }
    }

    fn tag(self) -> &'static str {
        match self {
            ExpansionKind::ParaphraseDescription => "para",
            ExpansionKind::ReorderExamples => "order",
            ExpansionKind::SynthesizeTests => "tests",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Validation {
    Strict,
    #[default]
    DropInvalid,
}

fn one() -> usize {
    1
}
fn three() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpansionConfig {
    #[serde(default = "one")]
    pub variants_per_instance: usize,
    pub kinds: Vec<ExpansionKind>,
    #[serde(default)]
    pub validation: Validation,
    /// Binding holding the task description; defaults to `description`,
    /// then `prompt`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description_binding: Option<String>,
    #[serde(default = "three")]
    pub tests_per_variant: usize,
}

impl ExpansionConfig {
    fn description_key(&self, instance: &ProblemInstance) -> Result<String, ExpandError> {
        let key = match &self.description_binding {
            Some(k) => k.clone(),
            None if instance.bindings.contains_key("description") => "description".into(),
            None => "prompt".into(),
        };
        if instance.bindings.contains_key(&key) {
            Ok(key)
        } else {
            Err(ExpandError::MissingBinding { instance: instance.id.clone(), binding: key })
        }
    }

    pub fn validate(&self, scenario: &ScenarioSpec) -> Result<(), ExpandError> {
        if self.variants_per_instance == 0 {
            return Ok(());
        }
        for inst in &scenario.instances {
            self.description_key(inst)?;
            if self.kinds.contains(&ExpansionKind::SynthesizeTests) {
                if inst.gold.unit_tests().is_none() {
                    return Err(ExpandError::NotUnitTests(inst.id.clone()));
                }
                if inst.gold.reference_solution.is_none() {
                    return Err(ExpandError::MissingReference(inst.id.clone()));
                }
            }
        }
        Ok(())
    }
}

/// Side effects expansion needs from its host.
pub trait ExpandServices {
    fn complete(&mut self, prompt: &str) -> Result<String, GatewayError>;
    /// True iff the instance's reference solution passes its whole suite.
    fn validate(&mut self, instance: &ProblemInstance) -> Result<bool, EvalError>;
    fn warn(&mut self, message: String);
}

#[derive(Debug, Clone, PartialEq)]
enum Piece {
    Line(String),
    Slot(usize),
}

/// Splits text into fixed lines and `>>>` example blocks. A block is a
/// `>>>` line plus the non-blank lines after it, up to the next `>>>` line
/// or closing docstring quote.
fn example_blocks(text: &str) -> (Vec<Piece>, Vec<Vec<String>>) {
    let mut pieces = Vec::new();
    let mut blocks: Vec<Vec<String>> = Vec::new();
    let mut open = false;
    for line in text.split('\n') {
        let t = line.trim_start();
        if t.starts_with(">>>") {
            pieces.push(Piece::Slot(blocks.len()));
            blocks.push(vec![line.to_string()]);
            open = true;
        } else if open && !t.is_empty() && !t.starts_with("\"\"\"") && !t.starts_with("'''") {
            blocks.last_mut().unwrap().push(line.to_string());
        } else {
            open = false;
            pieces.push(Piece::Line(line.to_string()));
        }
    }
    (pieces, blocks)
}

fn assemble(pieces: &[Piece], blocks: &[Vec<String>], order: &[usize]) -> String {
    let mut out: Vec<&str> = Vec::new();
    for p in pieces {
        match p {
            Piece::Line(l) => out.push(l),
            Piece::Slot(k) => out.extend(blocks[order[*k]].iter().map(String::as_str)),
        }
    }
    out.join("\n")
}

/// Up to `n` distinct reorderings of the description's examples.
pub fn reorder_examples<R: Rng + ?Sized>(text: &str, n: usize, rng: &mut R) -> Vec<String> {
    let (pieces, blocks) = example_blocks(text);
    if blocks.len() < 2 {
        return Vec::new();
    }
    let identity: Vec<usize> = (0..blocks.len()).collect();
    let mut seen = vec![identity.clone()];
    let mut out = Vec::new();
    for _ in 0..n * 10 {
        if out.len() == n {
            break;
        }
        let mut order = identity.clone();
        order.shuffle(rng);
        if !seen.contains(&order) {
            out.push(assemble(&pieces, &blocks, &order));
            seen.push(order);
        }
    }
    out
}

/// Splits a reply on `---` lines into test sources.
pub fn split_tests(reply: &str) -> Vec<String> {
    let mut chunks = vec![String::new()];
    for line in reply.lines() {
        if line.trim() == "---" {
            chunks.push(String::new());
        } else {
            let c = chunks.last_mut().unwrap();
            c.push_str(line);
            c.push('\n');
        }
    }
    chunks
        .into_iter()
        .map(|c| if c.contains("```") { extract_code(&c) } else { c })
        .map(|c| c.trim().to_string())
        .filter(|c| !c.is_empty())
        .collect()
}

fn derived(instance: &ProblemInstance, kind: ExpansionKind, variant: usize) -> ProblemInstance {
    ProblemInstance {
        id: format!("{}#{}{}", instance.id, kind.tag(), variant),
        origin: Some(Origin { instance: instance.id.clone(), kind: kind.name().into() }),
        ..instance.clone()
    }
}

/// New instances derived from `instances`; the originals are never changed.
pub fn expand<R: Rng + ?Sized>(
    intent: &Intent,
    instances: &[ProblemInstance],
    cfg: &ExpansionConfig,
    rng: &mut R,
    services: &mut dyn ExpandServices,
) -> Result<Vec<ProblemInstance>, ExpandError> {
    let mut out = Vec::new();
    if cfg.variants_per_instance == 0 {
        return Ok(out);
    }
    for inst in instances {
        let key = cfg.description_key(inst)?;
        let desc = inst.bindings[&key].clone();
        for &kind in &cfg.kinds {
            match kind {
                ExpansionKind::ParaphraseDescription => {
                    for v in 1..=cfg.variants_per_instance {
                        let prompt = MetaPrompt::Paraphrase
                            .render(&[("variant", &v.to_string()), ("text", &desc)])
                            .expect("paraphrase prompt variables are complete");
                        match services.complete(&prompt) {
                            Ok(reply) if !reply.trim().is_empty() && reply.trim() != desc.trim() => {
                                let mut new = derived(inst, kind, v);
                                new.bindings.insert(key.clone(), reply.trim().to_string());
                                out.push(new);
                            }
                            Ok(_) => services.warn(format!("paraphrase {v} of `{}` was empty or unchanged", inst.id)),
                            Err(e) => services.warn(format!("paraphrase {v} of `{}` failed: {e}", inst.id)),
                        }
                    }
                }
                ExpansionKind::ReorderExamples => {
                    for (i, text) in reorder_examples(&desc, cfg.variants_per_instance, rng).into_iter().enumerate() {
                        let mut new = derived(inst, kind, i + 1);
                        new.bindings.insert(key.clone(), text);
                        out.push(new);
                    }
                }
                ExpansionKind::SynthesizeTests => {
                    let reference =
                        inst.gold.reference_solution.as_deref().ok_or_else(|| ExpandError::MissingReference(inst.id.clone()))?;
                    let Expected::UnitTests(suite) = &inst.gold.expected else {
                        return Err(ExpandError::NotUnitTests(inst.id.clone()));
                    };
                    for v in 1..=cfg.variants_per_instance {
                        let prompt = MetaPrompt::SynthTests
                            .render(&[
                                ("intent", &intent.text),
                                ("description", &desc),
                                ("reference", reference),
                                ("count", &cfg.tests_per_variant.to_string()),
                            ])
                            .expect("test synthesis prompt variables are complete");
                        let tests = match services.complete(&prompt) {
                            Ok(reply) => split_tests(&reply),
                            Err(e) => {
                                services.warn(format!("test synthesis {v} for `{}` failed: {e}", inst.id));
                                continue;
                            }
                        };
                        if tests.is_empty() {
                            services.warn(format!("test synthesis {v} for `{}` produced no tests", inst.id));
                            continue;
                        }
                        let mut new = derived(inst, kind, v);
                        let mut new_suite = suite.clone();
                        for (k, source) in tests.into_iter().enumerate() {
                            new_suite.tests.push(TestCase { id: format!("syn{v}_{}", k + 1), source });
                        }
                        new.gold.expected = Expected::UnitTests(new_suite);
                        if services.validate(&new)? {
                            out.push(new);
                        } else if cfg.validation == Validation::Strict {
                            return Err(ExpandError::InvalidInstance(new.id));
                        } else {
                            services.warn(format!("dropped `{}`: reference solution fails synthesized tests", new.id));
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}
