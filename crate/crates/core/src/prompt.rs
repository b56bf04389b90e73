//! Chain-of-thought prompt rendering and verdict parsing.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::SubjectPair;
use crate::oracle::{TransformRule, TransformedTest};

const BUILTIN_TEMPLATE: &str = include_str!("../templates/cot_prompt_v1.txt");
pub const BUILTIN_TEMPLATE_VERSION: &str = "cot_prompt_v1";

const PLACEHOLDERS: [&str; 4] = ["signature", "documentation", "test_source", "label_instruction"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Correct,
    Undecidable,
    Incorrect,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::Correct, Label::Undecidable, Label::Incorrect];

    pub fn tag(self) -> &'static str {
        match self {
            Label::Correct => "<correct>",
            Label::Undecidable => "<undecidable>",
            Label::Incorrect => "<incorrect>",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Correct => "correct",
            Label::Undecidable => "undecidable",
            Label::Incorrect => "incorrect",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Whether the judge may answer `<undecidable>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    #[default]
    ThreeLabel,
    TwoLabel,
}

impl LabelMode {
    pub fn permits(self, label: Label) -> bool {
        self == LabelMode::ThreeLabel || label != Label::Undecidable
    }

    pub fn labels(self) -> &'static [Label] {
        match self {
            LabelMode::ThreeLabel => &Label::ALL,
            LabelMode::TwoLabel => &[Label::Correct, Label::Incorrect],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LabelMode::ThreeLabel => "three_label",
            LabelMode::TwoLabel => "two_label",
        }
    }
}

impl fmt::Display for LabelMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LabelMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "three_label" | "three" | "3" => Ok(LabelMode::ThreeLabel),
            "two_label" | "two" | "2" => Ok(LabelMode::TwoLabel),
            other => Err(format!("unknown label mode {other:?} (expected three_label or two_label)")),
        }
    }
}

/// The sentence telling the judge which tags it may answer with. This is the
/// only place the tag strings appear in a rendered prompt.
pub fn label_instruction(mode: LabelMode) -> &'static str {
    match mode {
        LabelMode::ThreeLabel => {
            "Finish your answer with exactly one of the labels <correct>, <undecidable> or \
             <incorrect>: <correct> if the assertion agrees with the documentation, <incorrect> \
             if it contradicts the documentation, and <undecidable> if the documentation does \
             not give enough information to decide."
        }
        LabelMode::TwoLabel => {
            "Finish your answer with exactly one of the labels <correct> or <incorrect>: \
             <correct> if the assertion agrees with the documentation and <incorrect> if it \
             contradicts the documentation."
        }
    }
}

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("template {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("template uses unknown placeholder {{{{{0}}}}}")]
    UnknownPlaceholder(String),
    #[error("template must contain {{{{{name}}}}} exactly once (found {count})")]
    PlaceholderCount { name: &'static str, count: usize },
    #[error("template text contains the answer tag {0}; tags may only come from {{{{label_instruction}}}}")]
    ContainsTag(&'static str),
}

#[derive(Clone)]
enum Segment {
    Text(String),
    Slot(&'static str),
}

/// A parsed prompt template with `{{signature}}`, `{{documentation}}`,
/// `{{test_source}}` and `{{label_instruction}}` slots.
#[derive(Clone)]
pub struct PromptTemplate {
    version: String,
    segments: Vec<Segment>,
}

impl fmt::Debug for PromptTemplate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PromptTemplate")
            .field("version", &self.version)
            .finish_non_exhaustive()
    }
}

impl PromptTemplate {
    pub fn builtin() -> Self {
        Self::parse(BUILTIN_TEMPLATE, BUILTIN_TEMPLATE_VERSION)
            .expect("builtin template is valid")
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, TemplateError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| TemplateError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let version = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Self::parse(&text, &version)
    }

    pub fn parse(text: &str, version: &str) -> Result<Self, TemplateError> {
        for label in Label::ALL {
            if text.contains(label.tag()) {
                return Err(TemplateError::ContainsTag(label.tag()));
            }
        }
        let mut segments = Vec::new();
        let mut rest = text;
        while let Some(open) = rest.find("{{") {
            let Some(close) = rest[open + 2..].find("}}") else {
                break;
            };
            let name = &rest[open + 2..open + 2 + close];
            let slot = PLACEHOLDERS
                .iter()
                .find(|p| **p == name.trim())
                .ok_or_else(|| TemplateError::UnknownPlaceholder(name.to_string()))?;
            segments.push(Segment::Text(rest[..open].to_string()));
            segments.push(Segment::Slot(slot));
            rest = &rest[open + 2 + close + 2..];
        }
        segments.push(Segment::Text(rest.to_string()));

        for name in ["test_source", "label_instruction"] {
            let count = segments
                .iter()
                .filter(|s| matches!(s, Segment::Slot(n) if *n == name))
                .count();
            if count != 1 {
                return Err(TemplateError::PlaceholderCount { name, count });
            }
        }
        Ok(PromptTemplate {
            version: version.to_string(),
            segments,
        })
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    /// Substitutes in a single pass; substituted text is never re-expanded.
    pub fn render(
        &self,
        signature: &str,
        documentation: &str,
        test_source: &str,
        mode: LabelMode,
    ) -> String {
        let mut out = String::new();
        for segment in &self.segments {
            match segment {
                Segment::Text(t) => out.push_str(t),
                Segment::Slot("signature") => out.push_str(signature.trim()),
                Segment::Slot("documentation") => out.push_str(documentation.trim()),
                Segment::Slot("test_source") => out.push_str(test_source.trim_end()),
                Segment::Slot(_) => out.push_str(label_instruction(mode)),
            }
        }
        out
    }
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self::builtin()
    }
}

/// The original prompt and its metamorphic counterpart for one pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSet {
    pub pair_id: String,
    pub original_prompt: String,
    pub transformed_prompt: String,
    pub applied_rule: TransformRule,
    pub label_mode: LabelMode,
}

pub fn build_prompt_set(
    pair: &SubjectPair,
    transformed: &TransformedTest,
    label_mode: LabelMode,
    template: &PromptTemplate,
) -> PromptSet {
    let render = |test: &str| {
        template.render(
            &pair.method_signature,
            &pair.documentation,
            test,
            label_mode,
        )
    };
    PromptSet {
        pair_id: pair.id.clone(),
        original_prompt: render(&pair.test_source),
        transformed_prompt: render(&transformed.source),
        applied_rule: transformed.applied_rule,
        label_mode,
    }
}

/// One parsed judge answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub label: Label,
    pub raw_response: String,
    /// More than one distinct permitted tag appeared; the last one was taken.
    pub mixed_tags: bool,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum VerdictError {
    #[error("no permitted label tag in response ({mode}): {excerpt:?}")]
    UnparseableResponse { mode: LabelMode, excerpt: String },
}

/// Takes the label whose tag occurs last in the response. Tag matching is
/// ASCII case-insensitive.
pub fn parse_verdict(raw_response: &str, mode: LabelMode) -> Result<Verdict, VerdictError> {
    let lowered = raw_response.to_ascii_lowercase();
    let mut last: Option<(usize, Label)> = None;
    let mut distinct = Vec::with_capacity(3);
    for &label in mode.labels() {
        if let Some(pos) = lowered.rfind(label.tag()) {
            distinct.push(label);
            if last.is_none_or(|(p, _)| pos > p) {
                last = Some((pos, label));
            }
        }
    }
    let Some((_, label)) = last else {
        let excerpt: String = raw_response.chars().take(120).collect();
        return Err(VerdictError::UnparseableResponse { mode, excerpt });
    };
    let mixed_tags = distinct.len() > 1;
    if mixed_tags {
        log::warn!("response mentions several labels; taking the last ({label})");
    }
    Ok(Verdict {
        label,
        raw_response: raw_response.to_string(),
        mixed_tags,
    })
}
