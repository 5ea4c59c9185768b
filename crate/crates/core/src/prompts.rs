//! Meta-prompts that drive the evaluator model. They ship with the binary
//! and their digests are written into every trace.

use std::collections::BTreeMap;

use crate::model::{PromptTemplate, TemplateError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum MetaPrompt {
    Synthesis,
    Mutation,
    Crossover,
    Reflection,
    Paraphrase,
    SynthTests,
}

impl MetaPrompt {
    pub const ALL: [MetaPrompt; 6] = [
        MetaPrompt::Synthesis,
        MetaPrompt::Mutation,
        MetaPrompt::Crossover,
        MetaPrompt::Reflection,
        MetaPrompt::Paraphrase,
        MetaPrompt::SynthTests,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MetaPrompt::Synthesis => "synthesis",
            MetaPrompt::Mutation => "mutation",
            MetaPrompt::Crossover => "crossover",
            MetaPrompt::Reflection => "reflection",
            MetaPrompt::Paraphrase => "paraphrase",
            MetaPrompt::SynthTests => "synth_tests",
        }
    }

    fn source(self) -> &'static str {
        match self {
            MetaPrompt::Synthesis => include_str!("../assets/synthesis.txt"),
            MetaPrompt::Mutation => include_str!("../assets/mutation.txt"),
            MetaPrompt::Crossover => include_str!("../assets/crossover.txt"),
            MetaPrompt::Reflection => include_str!("../assets/reflection.txt"),
            MetaPrompt::Paraphrase => include_str!("../assets/paraphrase.txt"),
            MetaPrompt::SynthTests => include_str!("../assets/synth_tests.txt"),
        }
    }

    pub fn template(self) -> PromptTemplate {
        PromptTemplate::parse(self.source()).expect("bundled meta-prompt parses")
    }

    pub fn render(self, vars: &[(&str, &str)]) -> Result<String, TemplateError> {
        let map: BTreeMap<String, String> = vars.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        self.template().render(&map)
    }
}

/// Content digest of every bundled meta-prompt, keyed by name.
pub fn digests() -> BTreeMap<String, String> {
    MetaPrompt::ALL.iter().map(|m| (m.name().to_string(), m.template().content_key().to_hex())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_prompts_parse_and_render() {
        let text =
            MetaPrompt::Crossover.render(&[("intent", "i"), ("parent_a", "{x}"), ("parent_b", "{x}!"), ("placeholders", "{x}")]).unwrap();
        assert!(text.contains("like {name}"));
        assert!(text.contains("Template B:\n{x}!"));
        assert_eq!(digests().len(), MetaPrompt::ALL.len());
    }

    #[test]
    fn missing_variable_is_reported() {
        assert!(MetaPrompt::Reflection.render(&[("intent", "i")]).is_err());
    }
}
