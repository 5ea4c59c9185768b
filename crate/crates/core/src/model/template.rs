//! Prompt templates: parsing, rendering, and canonical serialization.
//!
//! Concrete syntax (with the default `{`/`}` delimiters):
//!
//! * `{name}` is a placeholder; `name` matches `[a-z_][a-z0-9_]*`.
//! * `{#kind}...{/kind}` wraps an optimizable component, where `kind` is one
//!   of `instruction`, `few_shot_examples`, `output_format`. Component bodies
//!   are literal text and may not contain placeholders.
//! * `{{` and `}}` are literal braces.
//!
//! [`PromptTemplate::to_text`] is the exact inverse of [`PromptTemplate::parse`].
//!
//! Canonical byte layout (input to [`PromptTemplate::content_key`]):
//!
//! ```text
//! "PT1"                          tag, itself length-prefixed (u32 LE = 3)
//! u32 LE                         segment count
//! per segment:
//!   u8                           0 = static, 1 = placeholder, 2 = component
//!   u8                           component kind (components only):
//!                                0 instruction, 1 few_shot_examples, 2 output_format
//!   u32 LE + UTF-8 bytes         text, placeholder name, or component body
//! ```
//!
//! The version stamp is not part of the canonical form.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use super::digest::{CacheKey, CanonicalWriter};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TemplateError {
    #[error("unbalanced delimiter at byte {offset}")]
    UnbalancedDelimiter { offset: usize },
    #[error("duplicate placeholder `{0}`")]
    DuplicatePlaceholder(String),
    #[error("invalid placeholder name `{name}` at byte {offset}")]
    InvalidName { name: String, offset: usize },
    #[error("unknown component kind `{0}`")]
    UnknownComponent(String),
    #[error("malformed component at byte {offset}: {reason}")]
    MalformedComponent { offset: usize, reason: &'static str },
    #[error("missing binding for placeholder `{0}`")]
    MissingBinding(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComponentKind {
    Instruction,
    FewShotExamples,
    OutputFormat,
}

impl ComponentKind {
    pub const ALL: [ComponentKind; 3] = [ComponentKind::Instruction, ComponentKind::FewShotExamples, ComponentKind::OutputFormat];

    pub fn name(self) -> &'static str {
        match self {
            ComponentKind::Instruction => "instruction",
            ComponentKind::FewShotExamples => "few_shot_examples",
            ComponentKind::OutputFormat => "output_format",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        ComponentKind::ALL.into_iter().find(|k| k.name() == s)
    }

    fn code(self) -> u8 {
        match self {
            ComponentKind::Instruction => 0,
            ComponentKind::FewShotExamples => 1,
            ComponentKind::OutputFormat => 2,
        }
    }
}

impl fmt::Display for ComponentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Segment {
    Static(String),
    Placeholder(String),
    Component { kind: ComponentKind, text: String },
}

/// Delimiter convention for placeholders and component markers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TemplateSyntax {
    pub open: char,
    pub close: char,
}

impl Default for TemplateSyntax {
    fn default() -> Self {
        TemplateSyntax { open: '{', close: '}' }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    segments: Vec<Segment>,
    version: u64,
}

pub fn is_valid_name(name: &str) -> bool {
    let mut chars = name.chars();
    match chars.next() {
        Some(c) if c.is_ascii_lowercase() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
}

impl PromptTemplate {
    pub fn parse(text: &str) -> Result<Self, TemplateError> {
        Self::parse_with(text, TemplateSyntax::default())
    }

    pub fn parse_with(text: &str, syntax: TemplateSyntax) -> Result<Self, TemplateError> {
        let TemplateSyntax { open, close } = syntax;
        let mut segments = Vec::new();
        let mut literal = String::new();
        // (kind, offset of the opening marker, body)
        let mut component: Option<(ComponentKind, usize, String)> = None;
        let mut seen = Vec::<String>::new();

        let mut iter = text.char_indices().peekable();
        while let Some((offset, c)) = iter.next() {
            if c == close {
                if matches!(iter.peek(), Some(&(_, n)) if n == close) {
                    iter.next();
                    push_literal(&mut component, &mut literal, close);
                    continue;
                }
                return Err(TemplateError::UnbalancedDelimiter { offset });
            }
            if c != open {
                push_literal(&mut component, &mut literal, c);
                continue;
            }
            if matches!(iter.peek(), Some(&(_, n)) if n == open) {
                iter.next();
                push_literal(&mut component, &mut literal, open);
                continue;
            }
            let mut inner = String::new();
            let mut closed = false;
            for (inner_offset, ic) in iter.by_ref() {
                if ic == close {
                    closed = true;
                    break;
                }
                if ic == open {
                    return Err(TemplateError::UnbalancedDelimiter { offset: inner_offset });
                }
                inner.push(ic);
            }
            if !closed {
                return Err(TemplateError::UnbalancedDelimiter { offset });
            }

            if let Some(kind_name) = inner.strip_prefix('#') {
                if component.is_some() {
                    return Err(TemplateError::MalformedComponent { offset, reason: "nested component" });
                }
                let kind = ComponentKind::from_name(kind_name).ok_or_else(|| TemplateError::UnknownComponent(kind_name.to_string()))?;
                if !literal.is_empty() {
                    segments.push(Segment::Static(std::mem::take(&mut literal)));
                }
                component = Some((kind, offset, String::new()));
            } else if let Some(kind_name) = inner.strip_prefix('/') {
                match component.take() {
                    Some((kind, _, body)) if kind.name() == kind_name => {
                        segments.push(Segment::Component { kind, text: body });
                    }
                    Some(_) => return Err(TemplateError::MalformedComponent { offset, reason: "mismatched closing marker" }),
                    None => return Err(TemplateError::MalformedComponent { offset, reason: "closing marker without opening" }),
                }
            } else {
                if component.is_some() {
                    return Err(TemplateError::MalformedComponent { offset, reason: "placeholder inside component" });
                }
                if !is_valid_name(&inner) {
                    return Err(TemplateError::InvalidName { name: inner, offset });
                }
                if seen.contains(&inner) {
                    return Err(TemplateError::DuplicatePlaceholder(inner));
                }
                seen.push(inner.clone());
                if !literal.is_empty() {
                    segments.push(Segment::Static(std::mem::take(&mut literal)));
                }
                segments.push(Segment::Placeholder(inner));
            }
        }
        if let Some((_, offset, _)) = component {
            return Err(TemplateError::UnbalancedDelimiter { offset });
        }
        if !literal.is_empty() {
            segments.push(Segment::Static(literal));
        }
        Ok(PromptTemplate { segments, version: 0 })
    }

    /// Builds a template from segments, checking placeholder uniqueness and
    /// merging adjacent static runs so the result has a unique text form.
    pub fn from_segments(segments: Vec<Segment>) -> Result<Self, TemplateError> {
        let mut out: Vec<Segment> = Vec::with_capacity(segments.len());
        let mut seen = Vec::<&str>::new();
        for seg in &segments {
            if let Segment::Placeholder(name) = seg {
                if !is_valid_name(name) {
                    return Err(TemplateError::InvalidName { name: name.clone(), offset: 0 });
                }
                if seen.contains(&name.as_str()) {
                    return Err(TemplateError::DuplicatePlaceholder(name.clone()));
                }
                seen.push(name);
            }
        }
        for seg in segments {
            match (out.last_mut(), seg) {
                (_, Segment::Static(s)) if s.is_empty() => {}
                (Some(Segment::Static(prev)), Segment::Static(s)) => prev.push_str(&s),
                (_, seg) => out.push(seg),
            }
        }
        Ok(PromptTemplate { segments: out, version: 0 })
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn with_version(mut self, version: u64) -> Self {
        self.version = version;
        self
    }

    /// A template with no placeholders renders to the same string for every instance.
    pub fn is_constant(&self) -> bool {
        self.placeholders().next().is_none()
    }

    pub fn placeholders(&self) -> impl Iterator<Item = &str> {
        self.segments.iter().filter_map(|s| match s {
            Segment::Placeholder(n) => Some(n.as_str()),
            _ => None,
        })
    }

    /// Indices into [`segments`](Self::segments) of optimizable components.
    pub fn component_indices(&self) -> Vec<usize> {
        self.segments.iter().enumerate().filter(|(_, s)| matches!(s, Segment::Component { .. })).map(|(i, _)| i).collect()
    }

    pub fn component(&self, kind: ComponentKind) -> Option<&str> {
        self.segments.iter().find_map(|s| match s {
            Segment::Component { kind: k, text } if *k == kind => Some(text.as_str()),
            _ => None,
        })
    }

    /// Replaces the body of the segment at `index`, which must be a component.
    pub fn with_component_text(&self, index: usize, text: String) -> Option<Self> {
        let mut segments = self.segments.clone();
        match segments.get_mut(index) {
            Some(Segment::Component { text: body, .. }) => *body = text,
            _ => return None,
        }
        Some(PromptTemplate { segments, version: self.version })
    }

    pub fn to_text(&self) -> String {
        self.to_text_with(TemplateSyntax::default())
    }

    pub fn to_text_with(&self, syntax: TemplateSyntax) -> String {
        let TemplateSyntax { open, close } = syntax;
        let mut out = String::new();
        let escape = |out: &mut String, s: &str| {
            for c in s.chars() {
                if c == open || c == close {
                    out.push(c);
                }
                out.push(c);
            }
        };
        for seg in &self.segments {
            match seg {
                Segment::Static(s) => escape(&mut out, s),
                Segment::Placeholder(n) => {
                    out.push(open);
                    out.push_str(n);
                    out.push(close);
                }
                Segment::Component { kind, text } => {
                    out.push(open);
                    out.push('#');
                    out.push_str(kind.name());
                    out.push(close);
                    escape(&mut out, text);
                    out.push(open);
                    out.push('/');
                    out.push_str(kind.name());
                    out.push(close);
                }
            }
        }
        out
    }

    pub fn render(&self, bindings: &BTreeMap<String, String>) -> Result<String, TemplateError> {
        self.render_with(|name| bindings.get(name).map(String::as_str))
    }

    /// Renders with an arbitrary binding lookup. Component markers are dropped;
    /// their bodies are emitted verbatim.
    pub fn render_with<'a, F>(&self, lookup: F) -> Result<String, TemplateError>
    where
        F: Fn(&str) -> Option<&'a str>,
    {
        let mut out = String::new();
        for seg in &self.segments {
            match seg {
                Segment::Static(s) => out.push_str(s),
                Segment::Component { text, .. } => out.push_str(text),
                Segment::Placeholder(n) => out.push_str(lookup(n).ok_or_else(|| TemplateError::MissingBinding(n.clone()))?),
            }
        }
        Ok(out)
    }

    pub fn canonical_bytes(&self) -> Vec<u8> {
        self.canonical_writer().finish()
    }

    pub fn content_key(&self) -> CacheKey {
        self.canonical_writer().digest()
    }

    fn canonical_writer(&self) -> CanonicalWriter {
        let mut w = CanonicalWriter::new(b"PT1");
        w.u32(self.segments.len() as u32);
        for seg in &self.segments {
            match seg {
                Segment::Static(s) => {
                    w.u8(0).str(s);
                }
                Segment::Placeholder(n) => {
                    w.u8(1).str(n);
                }
                Segment::Component { kind, text } => {
                    w.u8(2).u8(kind.code()).str(text);
                }
            }
        }
        w
    }
}

fn push_literal(component: &mut Option<(ComponentKind, usize, String)>, literal: &mut String, c: char) {
    match component {
        Some((_, _, body)) => body.push(c),
        None => literal.push(c),
    }
}

impl fmt::Display for PromptTemplate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

/// Templates serialize as their text form plus version, which keeps traces
/// and checkpoints readable.
impl Serialize for PromptTemplate {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let mut st = s.serialize_struct("PromptTemplate", 2)?;
        st.serialize_field("text", &self.to_text())?;
        st.serialize_field("version", &self.version)?;
        st.end()
    }
}

impl<'de> Deserialize<'de> for PromptTemplate {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            text: String,
            #[serde(default)]
            version: u64,
        }
        let raw = Raw::deserialize(d)?;
        PromptTemplate::parse(&raw.text).map(|t| t.with_version(raw.version)).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn parses_code_completion_placeholder() {
        let t = PromptTemplate::parse("Complete: {code_to_complete}").unwrap();
        assert_eq!(t.segments(), &[Segment::Static("Complete: ".into()), Segment::Placeholder("code_to_complete".into())]);
        assert!(!t.is_constant());
    }

    #[test]
    fn zero_placeholders_is_constant() {
        let t = PromptTemplate::parse("no holes").unwrap();
        assert_eq!(t.segments(), &[Segment::Static("no holes".into())]);
        assert!(t.is_constant());
    }

    #[test]
    fn duplicate_placeholder_rejected() {
        assert_eq!(PromptTemplate::parse("{a}{a}"), Err(TemplateError::DuplicatePlaceholder("a".into())));
    }

    #[test]
    fn unbalanced_delimiters_rejected() {
        assert!(matches!(PromptTemplate::parse("x {a"), Err(TemplateError::UnbalancedDelimiter { .. })));
        assert!(matches!(PromptTemplate::parse("x } y"), Err(TemplateError::UnbalancedDelimiter { offset: 2 })));
        assert!(matches!(PromptTemplate::parse("{a{b}}"), Err(TemplateError::UnbalancedDelimiter { .. })));
        assert!(matches!(PromptTemplate::parse("{#instruction}open"), Err(TemplateError::UnbalancedDelimiter { .. })));
    }

    #[test]
    fn invalid_names_rejected() {
        assert!(matches!(PromptTemplate::parse("{Foo}"), Err(TemplateError::InvalidName { .. })));
        assert!(matches!(PromptTemplate::parse("{}"), Err(TemplateError::InvalidName { .. })));
        assert!(matches!(PromptTemplate::parse("{9a}"), Err(TemplateError::InvalidName { .. })));
    }

    #[test]
    fn escaped_braces_round_trip() {
        let src = "dict {{k: v}} then {x}";
        let t = PromptTemplate::parse(src).unwrap();
        assert_eq!(t.segments()[0], Segment::Static("dict {k: v} then ".into()));
        assert_eq!(t.to_text(), src);
        assert_eq!(t.render(&b(&[("x", "1")])).unwrap(), "dict {k: v} then 1");
    }

    #[test]
    fn components_parse_and_render() {
        let src = "{#instruction}Write {{clean}} code.{/instruction}\n{code_to_complete}{#output_format}Only code.{/output_format}";
        let t = PromptTemplate::parse(src).unwrap();
        assert_eq!(t.component(ComponentKind::Instruction), Some("Write {clean} code."));
        assert_eq!(t.component_indices(), vec![0, 3]);
        assert_eq!(t.to_text(), src);
        assert_eq!(t.render(&b(&[("code_to_complete", "def f():")])).unwrap(), "Write {clean} code.\ndef f():Only code.");
    }

    #[test]
    fn component_errors() {
        assert!(matches!(PromptTemplate::parse("{#bogus}x{/bogus}"), Err(TemplateError::UnknownComponent(_))));
        assert!(matches!(PromptTemplate::parse("{#instruction}x{/output_format}"), Err(TemplateError::MalformedComponent { .. })));
        assert!(matches!(PromptTemplate::parse("{#instruction}{a}{/instruction}"), Err(TemplateError::MalformedComponent { .. })));
        assert!(matches!(PromptTemplate::parse("{/instruction}"), Err(TemplateError::MalformedComponent { .. })));
    }

    #[test]
    fn render_substitutes_and_reports_missing() {
        let t = PromptTemplate::parse("Complete: {code_to_complete}").unwrap();
        assert_eq!(t.render(&b(&[("code_to_complete", "def f():")])).unwrap(), "Complete: def f():");
        assert_eq!(t.render(&BTreeMap::new()), Err(TemplateError::MissingBinding("code_to_complete".into())));
        let c = PromptTemplate::parse("no holes").unwrap();
        assert_eq!(c.render(&BTreeMap::new()).unwrap(), "no holes");
    }

    #[test]
    fn custom_syntax() {
        let syntax = TemplateSyntax { open: '<', close: '>' };
        let t = PromptTemplate::parse_with("a <x> b << {c}", syntax).unwrap();
        assert_eq!(t.placeholders().collect::<Vec<_>>(), vec!["x"]);
        assert_eq!(t.to_text_with(syntax), "a <x> b << {c}");
    }

    #[test]
    fn content_key_ignores_version_but_not_bytes() {
        let a = PromptTemplate::parse("x {y}").unwrap();
        let b = a.clone().with_version(7);
        assert_eq!(a.content_key(), b.content_key());
        let c = PromptTemplate::parse("x  {y}").unwrap();
        assert_ne!(a.content_key(), c.content_key());
    }

    #[test]
    fn canonical_layout_is_documented_layout() {
        let t = PromptTemplate::parse("a{b}").unwrap();
        let mut expected = vec![3, 0, 0, 0, b'P', b'T', b'1', 2, 0, 0, 0];
        expected.extend([0, 1, 0, 0, 0, b'a']);
        expected.extend([1, 1, 0, 0, 0, b'b']);
        assert_eq!(t.canonical_bytes(), expected);
    }

    #[test]
    fn from_segments_merges_static_runs() {
        let t =
            PromptTemplate::from_segments(vec![Segment::Static("a".into()), Segment::Static("b".into()), Segment::Placeholder("x".into())])
                .unwrap();
        assert_eq!(t, PromptTemplate::parse("ab{x}").unwrap());
    }

    #[test]
    fn serde_uses_text_form() {
        let t = PromptTemplate::parse("{#instruction}Hi{/instruction} {x}").unwrap().with_version(3);
        let json = serde_json::to_string(&t).unwrap();
        assert_eq!(json, r#"{"text":"{#instruction}Hi{/instruction} {x}","version":3}"#);
        let back: PromptTemplate = serde_json::from_str(&json).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.version(), 3);
    }
}
