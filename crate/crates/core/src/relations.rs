//! The refined discourse relation taxonomy, prompt rendering, and parsing of
//! LLM relation responses.
//!
//! Two closed label families exist: nucleus-nucleus relations between core
//! sentences of equal weight, and nucleus-satellite relations from a core
//! sentence to a supporting one. Responses are expected to carry one
//! `(index_a, index_b, label)` triple per line inside a fenced block; the
//! parser also accepts bare triple lines so that terse model output still
//! parses.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use crate::corpus::Sentence;

pub const NN_PROMPT_TEMPLATE: &str = include_str!("../resources/prompts/nn_relations_v1.txt");
pub const NS_PROMPT_TEMPLATE: &str = include_str!("../resources/prompts/ns_relations_v1.txt");
pub const FORMAT_REMINDER: &str = include_str!("../resources/prompts/format_reminder_v1.txt");

/// Nucleus-nucleus relation labels between two core sentences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum NNRelation {
    Conjunction,
    Contrast,
    Disjunction,
    MultinuclearRestatement,
    Sequence,
}

impl NNRelation {
    pub const ALL: [NNRelation; 5] = [
        NNRelation::Conjunction,
        NNRelation::Contrast,
        NNRelation::Disjunction,
        NNRelation::MultinuclearRestatement,
        NNRelation::Sequence,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            NNRelation::Conjunction => "conjunction",
            NNRelation::Contrast => "contrast",
            NNRelation::Disjunction => "disjunction",
            NNRelation::MultinuclearRestatement => "multinuclear restatement",
            NNRelation::Sequence => "sequence",
        }
    }

    /// Sequence is the only ordered N-N relation; the rest canonicalize to
    /// src < dst.
    pub fn is_symmetric(self) -> bool {
        !matches!(self, NNRelation::Sequence)
    }
}

impl fmt::Display for NNRelation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NNRelation {
    type Err = UnknownLabel;

    fn from_str(s: &str) -> Result<Self, UnknownLabel> {
        match normalize_label(s).as_str() {
            "conjunction" => Ok(NNRelation::Conjunction),
            "contrast" => Ok(NNRelation::Contrast),
            "disjunction" => Ok(NNRelation::Disjunction),
            "multinuclear restatement" | "restatement" => Ok(NNRelation::MultinuclearRestatement),
            "sequence" => Ok(NNRelation::Sequence),
            _ => Err(UnknownLabel(s.to_string())),
        }
    }
}

/// Nucleus-satellite relation labels from a core sentence to a supporting one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum NSRelation {
    Cause,
    Result,
    Opposition,
    Elaboration,
    Circumstance,
    Evaluation,
    Solutionhood,
}

impl NSRelation {
    pub const ALL: [NSRelation; 7] = [
        NSRelation::Cause,
        NSRelation::Result,
        NSRelation::Opposition,
        NSRelation::Elaboration,
        NSRelation::Circumstance,
        NSRelation::Evaluation,
        NSRelation::Solutionhood,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            NSRelation::Cause => "cause",
            NSRelation::Result => "result",
            NSRelation::Opposition => "opposition",
            NSRelation::Elaboration => "elaboration",
            NSRelation::Circumstance => "circumstance",
            NSRelation::Evaluation => "evaluation",
            NSRelation::Solutionhood => "solutionhood",
        }
    }
}

impl fmt::Display for NSRelation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NSRelation {
    type Err = UnknownLabel;

    fn from_str(s: &str) -> Result<Self, UnknownLabel> {
        match normalize_label(s).as_str() {
            "cause" => Ok(NSRelation::Cause),
            "result" => Ok(NSRelation::Result),
            "opposition" => Ok(NSRelation::Opposition),
            "elaboration" => Ok(NSRelation::Elaboration),
            "circumstance" => Ok(NSRelation::Circumstance),
            "evaluation" => Ok(NSRelation::Evaluation),
            "solutionhood" => Ok(NSRelation::Solutionhood),
            _ => Err(UnknownLabel(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown relation label `{0}`")]
pub struct UnknownLabel(pub String);

/// Which relation family a prompt or parse targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RelationKind {
    Nn,
    Ns,
}

/// A parsed relation label from either family.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum RelationLabel {
    Nn(NNRelation),
    Ns(NSRelation),
}

impl RelationLabel {
    pub fn kind(&self) -> RelationKind {
        match self {
            RelationLabel::Nn(_) => RelationKind::Nn,
            RelationLabel::Ns(_) => RelationKind::Ns,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            RelationLabel::Nn(r) => r.as_str(),
            RelationLabel::Ns(r) => r.as_str(),
        }
    }
}

/// A labeled logical relation between two sentences of one document,
/// addressed by their sentence indices. N-S assertions run nucleus to
/// satellite; symmetric N-N assertions are canonicalized to `src < dst`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RelationAssertion {
    pub src: usize,
    pub dst: usize,
    pub label: RelationLabel,
}

impl RelationAssertion {
    pub fn kind(&self) -> RelationKind {
        self.label.kind()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("whole response unparseable: {0}")]
pub struct WholeResponseUnparseable(pub &'static str);

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PromptError {
    #[error("cannot render a relation prompt over an empty sentence list")]
    EmptySentences,
    #[error("cannot render a nucleus-satellite prompt with no satellites")]
    EmptySatellites,
}

/// Substitute `{name}` placeholders in a prompt template.
pub fn render_template(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (name, value) in vars {
        out = out.replace(&format!("{{{name}}}"), value);
    }
    out
}

/// Neutralize fenced-block delimiters inside corpus text so document content
/// cannot open or close the response block the templates request.
pub fn escape_delimiters(text: &str) -> String {
    text.replace("```", "'''")
}

fn sentence_line(s: &Sentence) -> String {
    format!("[{}] {}", s.index, escape_delimiters(&s.text))
}

/// Render the nucleus-nucleus recognition prompt over a document's sentences.
pub fn render_nn_prompt(sentences: &[Sentence]) -> Result<String, PromptError> {
    if sentences.is_empty() {
        return Err(PromptError::EmptySentences);
    }
    let listing = sentences.iter().map(sentence_line).collect::<Vec<_>>().join("\n");
    Ok(render_template(NN_PROMPT_TEMPLATE, &[("sentences", &listing)]))
}

/// Render the nucleus-satellite labeling prompt for one nucleus and its
/// assigned satellites.
pub fn render_ns_prompt(core: &Sentence, satellites: &[Sentence]) -> Result<String, PromptError> {
    if satellites.is_empty() {
        return Err(PromptError::EmptySatellites);
    }
    let listing = satellites.iter().map(sentence_line).collect::<Vec<_>>().join("\n");
    Ok(render_template(
        NS_PROMPT_TEMPLATE,
        &[
            ("nucleus", &sentence_line(core)),
            ("satellites", &listing),
            ("nucleus_index", &core.index.to_string()),
        ],
    ))
}

fn normalize_label(s: &str) -> String {
    s.trim()
        .chars()
        .map(|c| if c == '_' || c == '-' { ' ' } else { c.to_ascii_lowercase() })
        .collect::<String>()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

/// A structurally valid `(i, j, label-text)` line, before any filtering.
fn parse_triple_line(line: &str) -> Option<(usize, usize, String)> {
    let open = line.find('(')?;
    let close = line[open..].find(')')? + open;
    let inner = &line[open + 1..close];
    let parts: Vec<&str> = inner.splitn(3, ',').collect();
    if parts.len() != 3 {
        return None;
    }
    let a = parts[0].trim().parse::<usize>().ok()?;
    let b = parts[1].trim().parse::<usize>().ok()?;
    let label = parts[2].trim();
    if label.is_empty() {
        return None;
    }
    Some((a, b, label.to_string()))
}

/// Lines inside fenced ``` blocks; empty when the response has no fence.
fn fenced_lines(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut inside = false;
    for line in text.lines() {
        if line.trim_start().starts_with("```") {
            inside = !inside;
            continue;
        }
        if inside {
            out.push(line);
        }
    }
    out
}

/// Parse an LLM relation response into assertions of the requested family.
///
/// When the response carries a fenced block, only its lines are considered
/// (an empty block is a valid "no relations" reply). Without a fence, bare
/// triple lines anywhere are accepted. Triples with out-of-range indices,
/// self-loops, or labels outside the family are dropped silently; duplicates
/// collapse to the first occurrence. The error is reserved for responses
/// with no fence and no structurally valid triple, so callers can
/// distinguish "parsed but empty" from "nothing to parse" and retry the
/// latter.
pub fn parse_relation_response(
    text: &str,
    kind: RelationKind,
    valid_indices: &BTreeSet<usize>,
) -> Result<Vec<RelationAssertion>, WholeResponseUnparseable> {
    let has_fence = text.lines().any(|l| l.trim_start().starts_with("```"));
    let triples: Vec<(usize, usize, String)> = if has_fence {
        fenced_lines(text)
            .iter()
            .filter_map(|l| parse_triple_line(l))
            .collect()
    } else {
        let bare: Vec<_> = text.lines().filter_map(parse_triple_line).collect();
        if bare.is_empty() {
            return Err(WholeResponseUnparseable("no relation triple found"));
        }
        bare
    };

    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (a, b, label_text) in triples {
        if a == b || !valid_indices.contains(&a) || !valid_indices.contains(&b) {
            continue;
        }
        let label = match kind {
            RelationKind::Nn => match label_text.parse::<NNRelation>() {
                Ok(r) => RelationLabel::Nn(r),
                Err(_) => continue,
            },
            RelationKind::Ns => match label_text.parse::<NSRelation>() {
                Ok(r) => RelationLabel::Ns(r),
                Err(_) => continue,
            },
        };
        let (src, dst) = match &label {
            RelationLabel::Nn(r) if r.is_symmetric() && a > b => (b, a),
            _ => (a, b),
        };
        if seen.insert((src, dst, label.clone())) {
            out.push(RelationAssertion { src, dst, label });
        }
    }
    Ok(out)
}

/// Parse the `CORE:` index list from a nucleus-nucleus response.
/// Out-of-range indices are dropped; order is preserved, duplicates collapse.
pub fn parse_core_indices(
    text: &str,
    valid_indices: &BTreeSet<usize>,
) -> Result<Vec<usize>, WholeResponseUnparseable> {
    for line in text.lines() {
        let trimmed = line.trim();
        let Some(rest) = strip_prefix_ci(trimmed, "core:") else {
            continue;
        };
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for token in rest.split(|c: char| !c.is_ascii_digit()) {
            if token.is_empty() {
                continue;
            }
            if let Ok(idx) = token.parse::<usize>() {
                if valid_indices.contains(&idx) && seen.insert(idx) {
                    out.push(idx);
                }
            }
        }
        return Ok(out);
    }
    Err(WholeResponseUnparseable("no CORE index line found"))
}

fn strip_prefix_ci<'a>(s: &'a str, prefix: &str) -> Option<&'a str> {
    if s.len() >= prefix.len() && s[..prefix.len()].eq_ignore_ascii_case(prefix) {
        Some(&s[prefix.len()..])
    } else {
        None
    }
}
