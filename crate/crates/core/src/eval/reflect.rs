use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::sandbox::{Outcome, TestResult};
use crate::gateway::{Completion, Fm, GatewayError};
use crate::model::{Intent, ProblemInstance, PromptTemplate};
use crate::prompts::MetaPrompt;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackText {
    pub text: String,
    pub source_failures: Vec<String>,
    /// False when the generality filter had to remove something.
    pub generality_checked: bool,
}

/// One failing instance and its per-test outcomes.
#[derive(Debug, Clone)]
pub struct Failure<'a> {
    pub instance: &'a ProblemInstance,
    pub detail: &'a [TestResult],
}

impl Failure<'_> {
    fn failed_tests(&self) -> impl Iterator<Item = &TestResult> {
        self.detail.iter().filter(|r| r.outcome != Outcome::Pass)
    }
}

pub fn reflection_prompt(template: &PromptTemplate, intent: &Intent, failures: &[Failure<'_>]) -> String {
    let mut listing = String::new();
    for f in failures {
        let tests: Vec<String> = f.failed_tests().map(|r| format!("{} ({:?})", r.test_id, r.outcome).to_lowercase()).collect();
        let tests = if tests.is_empty() { "model call failed".to_string() } else { tests.join(", ") };
        listing.push_str(&format!("- {}: {}\n", f.instance.id, tests));
    }
    MetaPrompt::Reflection
        .render(&[("intent", &intent.text), ("template", &template.to_text()), ("failures", listing.trim_end())])
        .expect("reflection prompt variables are complete")
}

fn identifier_tokens(text: &str) -> impl Iterator<Item = &str> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '_')).filter(|t| !t.is_empty())
}

fn sentences(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    for (i, c) in text.char_indices() {
        if matches!(c, '.' | '!' | '?' | '\n') {
            let end = i + c.len_utf8();
            out.push(&text[start..end]);
            start = end;
        }
    }
    if start < text.len() {
        out.push(&text[start..]);
    }
    out
}

/// Drops every sentence that mentions a binding token of four or more
/// characters. Returns the kept text and whether nothing was dropped.
pub fn generality_filter(text: &str, instances: &[&ProblemInstance]) -> (String, bool) {
    let banned: BTreeSet<&str> =
        instances.iter().flat_map(|i| i.bindings.values()).flat_map(|v| identifier_tokens(v)).filter(|t| t.chars().count() >= 4).collect();
    let mut clean = true;
    let mut kept = Vec::new();
    for s in sentences(text) {
        if identifier_tokens(s).any(|t| banned.contains(t)) {
            clean = false;
        } else if !s.trim().is_empty() {
            kept.push(s.trim());
        }
    }
    (kept.join(" "), clean)
}

fn cap_chars(text: &str, cap: usize) -> String {
    match text.char_indices().nth(cap) {
        Some((i, _)) => text[..i].to_string(),
        None => text.to_string(),
    }
}

/// Turns a completed reflection call into feedback.
pub fn feedback_from(completion: &Completion, failures: &[Failure<'_>], cap: usize) -> FeedbackText {
    let instances: Vec<&ProblemInstance> = failures.iter().map(|f| f.instance).collect();
    let (text, clean) = generality_filter(&completion.text, &instances);
    FeedbackText {
        text: cap_chars(&text, cap),
        source_failures: failures.iter().flat_map(|f| f.failed_tests().map(|r| r.test_id.clone())).collect(),
        generality_checked: clean,
    }
}

/// One evaluator call; `None` when there is nothing to reflect on or the
/// call fails.
pub fn self_reflect(
    evaluator: &dyn Fm,
    template: &PromptTemplate,
    intent: &Intent,
    failures: &[Failure<'_>],
    cap: usize,
) -> Option<Result<FeedbackText, GatewayError>> {
    if failures.is_empty() {
        return None;
    }
    let prompt = reflection_prompt(template, intent, failures);
    Some(evaluator.complete(&prompt).map(|c| feedback_from(&c, failures, cap)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{FmConfig, FmRole, Gateway, MockMatch, MockRule, MockSpec};
    use crate::model::{Expected, GoldLabel, TestCase, UnitTestSuite};

    fn instance() -> ProblemInstance {
        ProblemInstance {
            id: "HumanEval/0".into(),
            bindings: [("prompt".to_string(), "def has_close_elements(numbers, threshold):".to_string())].into(),
            gold: GoldLabel {
                expected: Expected::UnitTests(UnitTestSuite {
                    tests: vec![TestCase { id: "t1".into(), source: "assert True".into() }],
                    command: None,
                    code_prefix: None,
                }),
                reference_solution: None,
            },
            origin: None,
        }
    }

    fn failed() -> Vec<TestResult> {
        vec![TestResult { test_id: "t1".into(), outcome: Outcome::Fail, millis: 1.0 }]
    }

    #[test]
    fn scripted_feedback_passes_through() {
        let spec =
            MockSpec { rules: vec![MockRule::respond(MockMatch::contains("Failures:"), "add type hints guidance")], ..Default::default() };
        let gw = Gateway::new(FmConfig::mock(FmRole::Evaluator, "ev").with_mock(spec)).unwrap();
        let inst = instance();
        let detail = failed();
        let failures = [Failure { instance: &inst, detail: &detail }];
        let t = PromptTemplate::parse("Complete: {prompt}").unwrap();
        let intent = Intent { id: "i".into(), text: "generate code".into() };
        let fb = self_reflect(&gw, &t, &intent, &failures, 500).unwrap().unwrap();
        assert_eq!(fb.text, "add type hints guidance");
        assert!(fb.generality_checked);
        assert_eq!(fb.source_failures, vec!["t1"]);
    }

    #[test]
    fn no_failures_means_no_call() {
        let gw = Gateway::new(FmConfig::mock(FmRole::Evaluator, "ev")).unwrap();
        let t = PromptTemplate::parse("{prompt}").unwrap();
        let intent = Intent { id: "i".into(), text: "x".into() };
        assert!(self_reflect(&gw, &t, &intent, &[], 500).is_none());
        assert_eq!(gw.counts().completions, 0);
    }

    #[test]
    fn specific_sentences_are_removed() {
        let inst = instance();
        let text = "Check boundary values. Make has_close_elements compare all pairs! Prefer clear loops.";
        let (kept, clean) = generality_filter(text, &[&inst]);
        assert_eq!(kept, "Check boundary values. Prefer clear loops.");
        assert!(!clean);
        // "def" is shorter than four characters and stays allowed.
        let (kept, clean) = generality_filter("Use def blocks.", &[&inst]);
        assert_eq!(kept, "Use def blocks.");
        assert!(clean);
    }

    #[test]
    fn feedback_is_capped() {
        let inst = instance();
        let detail = failed();
        let failures = [Failure { instance: &inst, detail: &detail }];
        let c = Completion {
            text: "a".repeat(50),
            prompt_tokens: 0,
            completion_tokens: 0,
            wall_latency: Default::default(),
            backend_fingerprint: String::new(),
        };
        assert_eq!(feedback_from(&c, &failures, 10).text.len(), 10);
    }
}
