//! Variation operators. Template operators may consult the evaluator model
//! through a caller-supplied function; every model failure has a
//! deterministic local fallback.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::OperatorConfig;
use crate::cache::OpKind;
use crate::eval::{extract_code, FeedbackText};
use crate::gateway::GatewayError;
use crate::model::{ComponentKind, Intent, ParameterGenome, PromptTemplate, Segment};
use crate::prompts::MetaPrompt;

/// Evaluator-model access as seen by the operators.
pub type FmCall<'a> = dyn FnMut(OpKind, &str) -> Result<String, GatewayError> + 'a;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenOp {
    Swap(usize, usize),
    Delete(usize),
    Duplicate(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MutationPath {
    Identity,
    Fm,
    Token,
    /// The model path failed and the token path ran instead.
    FmFallback,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrossoverPath {
    Fm,
    Fallback,
    Disabled,
}

fn token_spans(text: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        match (c.is_whitespace(), start) {
            (false, None) => start = Some(i),
            (true, Some(s)) => {
                spans.push((s, i));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        spans.push((s, text.len()));
    }
    spans
}

pub fn token_count(text: &str) -> usize {
    token_spans(text).len()
}

/// Applies one token edit. Separators around untouched tokens are kept;
/// a deleted token takes its following separator with it (the preceding
/// one if it is last), and a duplicate is joined by a single space.
pub fn apply_token_op(text: &str, op: TokenOp) -> String {
    let spans = token_spans(text);
    let tok = |i: usize| &text[spans[i].0..spans[i].1];
    match op {
        TokenOp::Delete(i) => {
            let (s, e) = spans[i];
            if i + 1 < spans.len() {
                format!("{}{}", &text[..s], &text[spans[i + 1].0..])
            } else if i > 0 {
                format!("{}{}", &text[..spans[i - 1].1], &text[e..])
            } else {
                format!("{}{}", &text[..s], &text[e..])
            }
        }
        TokenOp::Duplicate(i) => {
            let e = spans[i].1;
            format!("{} {}{}", &text[..e], tok(i), &text[e..])
        }
        TokenOp::Swap(i, j) => {
            let (i, j) = (i.min(j), i.max(j));
            if i == j {
                return text.to_string();
            }
            let (si, ei) = spans[i];
            let (sj, ej) = spans[j];
            format!("{}{}{}{}{}", &text[..si], tok(j), &text[ei..sj], tok(i), &text[ej..])
        }
    }
}

pub fn random_token_op<R: Rng + ?Sized>(n_tokens: usize, rng: &mut R) -> Option<TokenOp> {
    match n_tokens {
        0 => None,
        1 => Some(TokenOp::Duplicate(0)),
        n => Some(match rng.random_range(0..3) {
            0 => {
                let i = rng.random_range(0..n);
                let mut j = rng.random_range(0..n - 1);
                if j >= i {
                    j += 1;
                }
                TokenOp::Swap(i, j)
            }
            1 => TokenOp::Delete(rng.random_range(0..n)),
            _ => TokenOp::Duplicate(rng.random_range(0..n)),
        }),
    }
}

fn bump(original: &PromptTemplate, new: PromptTemplate) -> PromptTemplate {
    if new.segments() == original.segments() {
        new.with_version(original.version())
    } else {
        new.with_version(original.version() + 1)
    }
}

/// One token edit inside one randomly chosen non-empty component.
pub fn token_mutate<R: Rng + ?Sized>(t: &PromptTemplate, rng: &mut R) -> Option<PromptTemplate> {
    let eligible: Vec<usize> = t
        .component_indices()
        .into_iter()
        .filter(|&i| matches!(&t.segments()[i], Segment::Component { text, .. } if token_count(text) > 0))
        .collect();
    if eligible.is_empty() {
        return None;
    }
    let idx = eligible[rng.random_range(0..eligible.len())];
    let Segment::Component { text, .. } = &t.segments()[idx] else { unreachable!() };
    let op = random_token_op(token_count(text), rng)?;
    let edited = apply_token_op(text, op);
    Some(bump(t, t.with_component_text(idx, edited)?))
}

/// Strips a code fence and surrounding quotes from a model reply.
pub fn clean_response(text: &str) -> String {
    let body = if text.contains("```") { extract_code(text) } else { text.to_string() };
    let trimmed = body.trim();
    for q in ['"', '\''] {
        if trimmed.len() >= 2 && trimmed.starts_with(q) && trimmed.ends_with(q) {
            return trimmed[1..trimmed.len() - 1].trim().to_string();
        }
    }
    trimmed.to_string()
}

fn feedback_section(feedback: Option<&FeedbackText>) -> String {
    match feedback {
        Some(f) if !f.text.trim().is_empty() => format!("\nReviewer feedback on recent failures:\n{}\n", f.text.trim()),
        _ => String::new(),
    }
}

/// Rewrites one randomly chosen component through the evaluator model.
pub fn fm_mutate<R: Rng + ?Sized>(
    t: &PromptTemplate,
    intent: &Intent,
    feedback: Option<&FeedbackText>,
    rng: &mut R,
    call: &mut FmCall<'_>,
) -> Result<PromptTemplate, String> {
    let comps = t.component_indices();
    if comps.is_empty() {
        return Err("template has no optimizable component".into());
    }
    let idx = comps[rng.random_range(0..comps.len())];
    let Segment::Component { kind, text } = &t.segments()[idx] else { unreachable!() };
    let prompt = MetaPrompt::Mutation
        .render(&[("intent", &intent.text), ("kind", kind.name()), ("component", text), ("feedback", &feedback_section(feedback))])
        .map_err(|e| e.to_string())?;
    let reply = call(OpKind::Mutation, &prompt).map_err(|e| e.to_string())?;
    let cleaned = clean_response(&reply);
    if cleaned.is_empty() {
        return Err("empty rewrite".into());
    }
    Ok(bump(t, t.with_component_text(idx, cleaned).expect("component index")))
}

/// Chooses and applies the mutation path for one offspring.
pub fn mutate_template<R: Rng + ?Sized>(
    t: &PromptTemplate,
    intent: &Intent,
    feedback: Option<&FeedbackText>,
    ops: &OperatorConfig,
    rng: &mut R,
    call: &mut FmCall<'_>,
) -> (PromptTemplate, MutationPath) {
    let u: f64 = rng.random();
    if u < ops.fm_mutation_prob {
        match fm_mutate(t, intent, feedback, rng, call) {
            Ok(m) => (m, MutationPath::Fm),
            Err(_) => match token_mutate(t, rng) {
                Some(m) => (m, MutationPath::FmFallback),
                None => (t.clone(), MutationPath::Identity),
            },
        }
    } else if u < ops.fm_mutation_prob + ops.token_mutation_prob {
        match token_mutate(t, rng) {
            Some(m) => (m, MutationPath::Token),
            None => (t.clone(), MutationPath::Identity),
        }
    } else {
        (t.clone(), MutationPath::Identity)
    }
}

fn placeholder_set(t: &PromptTemplate) -> BTreeSet<&str> {
    t.placeholders().collect()
}

fn child_version(a: &PromptTemplate, b: &PromptTemplate, child: PromptTemplate) -> PromptTemplate {
    if child.segments() == a.segments() {
        child.with_version(a.version())
    } else if child.segments() == b.segments() {
        child.with_version(b.version())
    } else {
        child.with_version(a.version().max(b.version()) + 1)
    }
}

/// Each component of `a` is taken from `a` or from the component of `b`
/// with the same kind and ordinal, with equal probability.
pub fn uniform_crossover<R: Rng + ?Sized>(a: &PromptTemplate, b: &PromptTemplate, rng: &mut R) -> PromptTemplate {
    let b_components: Vec<(ComponentKind, &str)> = b
        .segments()
        .iter()
        .filter_map(|s| match s {
            Segment::Component { kind, text } => Some((*kind, text.as_str())),
            _ => None,
        })
        .collect();
    let mut seen: Vec<ComponentKind> = Vec::new();
    let mut child = a.clone();
    for idx in a.component_indices() {
        let Segment::Component { kind, .. } = &a.segments()[idx] else { unreachable!() };
        let ordinal = seen.iter().filter(|k| *k == kind).count();
        seen.push(*kind);
        let take_b = rng.random_bool(0.5);
        let donor = b_components.iter().filter(|(k, _)| k == kind).nth(ordinal);
        if let (true, Some((_, text))) = (take_b, donor) {
            child = child.with_component_text(idx, text.to_string()).expect("component index");
        }
    }
    child_version(a, b, child)
}

/// Asks the evaluator model to merge two parents; replies that do not
/// parse or that change the placeholder set fall back to
/// [`uniform_crossover`].
pub fn crossover_templates<R: Rng + ?Sized>(
    a: &PromptTemplate,
    b: &PromptTemplate,
    intent: &Intent,
    rng: &mut R,
    call: &mut FmCall<'_>,
) -> (PromptTemplate, CrossoverPath) {
    let wanted = placeholder_set(a);
    let listing =
        if wanted.is_empty() { "(none)".to_string() } else { wanted.iter().map(|p| format!("{{{p}}}")).collect::<Vec<_>>().join(", ") };
    let prompt = MetaPrompt::Crossover
        .render(&[("intent", &intent.text), ("parent_a", &a.to_text()), ("parent_b", &b.to_text()), ("placeholders", &listing)])
        .expect("crossover prompt variables are complete");
    if let Ok(reply) = call(OpKind::Crossover, &prompt) {
        let cleaned = clean_response(&reply);
        if let Ok(t) = PromptTemplate::parse(&cleaned) {
            if !cleaned.is_empty() && placeholder_set(&t) == wanted {
                return (child_version(a, b, t), CrossoverPath::Fm);
            }
        }
    }
    (uniform_crossover(a, b, rng), CrossoverPath::Fallback)
}

pub fn mutate_genome<R: Rng + ?Sized>(g: &ParameterGenome, bitflip_prob: f64, rng: &mut R) -> ParameterGenome {
    let mut out = g.clone();
    for p in &mut out.params {
        for bit in &mut p.bits {
            if rng.random_bool(bitflip_prob) {
                *bit = !*bit;
            }
        }
    }
    out
}

/// Uniform per-parameter crossover of two genomes over the same specs.
pub fn crossover_genome<R: Rng + ?Sized>(a: &ParameterGenome, b: &ParameterGenome, rng: &mut R) -> ParameterGenome {
    let mut out = a.clone();
    for (p, q) in out.params.iter_mut().zip(&b.params) {
        if rng.random_bool(0.5) {
            p.bits = q.bits.clone();
        }
    }
    out
}
