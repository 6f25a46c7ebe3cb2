//! Knowledge-intensive programs and their structured header.
//!
//! Every program opens with one comment block in a fixed labelled layout:
//!
//! ```text
//! # Source: Article 13 of the Measures for the Payment of Litigation Costs
//! # Inputs:
//! #   case_amount (decimal, yuan): total value of the property in dispute
//! # Outputs:
//! #   total_fee (decimal, yuan): minimum total litigation fee
//! ```
//!
//! The block may use contiguous line comments (`#`, `//`) or a block comment
//! (`"""`, `'''`, `/* */`). Param lines read `name (type, unit): definition`;
//! a missing unit or empty definition makes the parameter fuzzy.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetadataError {
    #[error("source text is empty")]
    EmptySource,
    #[error("program has no leading header comment")]
    NoHeaderComment,
    #[error("header has no `Source:` field")]
    MissingSource,
    #[error("header line {line}: {message}")]
    MalformedParamLine { line: usize, message: String },
    #[error("header line {line}: unexpected text {text:?}")]
    UnexpectedLine { line: usize, text: String },
    #[error("header line {line}: field {field:?} appears twice")]
    DuplicateField { line: usize, field: String },
    #[error("header line {line}: parameter {name:?} declared twice")]
    DuplicateParam { line: usize, name: String },
    #[error("header declares no outputs")]
    NoOutputs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SemanticType {
    #[serde(rename = "integer")]
    Integer,
    #[serde(rename = "decimal")]
    Decimal,
    #[serde(rename = "boolean")]
    Boolean,
    #[serde(rename = "string")]
    String,
    #[serde(rename = "list-of-decimal")]
    DecimalList,
}

impl SemanticType {
    pub const ALL: [SemanticType; 5] = [
        SemanticType::Integer,
        SemanticType::Decimal,
        SemanticType::Boolean,
        SemanticType::String,
        SemanticType::DecimalList,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SemanticType::Integer => "integer",
            SemanticType::Decimal => "decimal",
            SemanticType::Boolean => "boolean",
            SemanticType::String => "string",
            SemanticType::DecimalList => "list-of-decimal",
        }
    }
}

impl fmt::Display for SemanticType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SemanticType {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SemanticType::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| format!("unknown type {s:?}"))
    }
}

/// One declared input or output argument.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub semantic_type: SemanticType,
    /// `None` when the header line gives no unit. Unitless quantities use
    /// the explicit token `dimensionless`.
    pub unit: Option<String>,
    pub definition: String,
}

impl ParamSpec {
    pub fn is_well_defined(&self) -> bool {
        self.unit.as_deref().is_some_and(|u| !u.trim().is_empty())
            && !self.definition.trim().is_empty()
    }

    fn render(&self) -> String {
        let mut s = format!("{} ({}", self.name, self.semantic_type);
        if let Some(u) = &self.unit {
            s.push_str(", ");
            s.push_str(u);
        }
        s.push_str("):");
        if !self.definition.is_empty() {
            s.push(' ');
            s.push_str(&self.definition);
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProgramMetadata {
    pub knowledge_source: String,
    pub inputs: Vec<ParamSpec>,
    pub outputs: Vec<ParamSpec>,
}

impl ProgramMetadata {
    pub fn input(&self, name: &str) -> Option<&ParamSpec> {
        self.inputs.iter().find(|p| p.name == name)
    }

    pub fn output(&self, name: &str) -> Option<&ParamSpec> {
        self.outputs.iter().find(|p| p.name == name)
    }

    pub fn params(&self) -> impl Iterator<Item = &ParamSpec> {
        self.inputs.iter().chain(&self.outputs)
    }
}

/// Renders `metadata` as a `#` line-comment header block.
pub fn render_header(metadata: &ProgramMetadata) -> String {
    let mut out = format!("# Source: {}\n# Inputs:\n", metadata.knowledge_source);
    for p in &metadata.inputs {
        out.push_str(&format!("#   {}\n", p.render()));
    }
    out.push_str("# Outputs:\n");
    for p in &metadata.outputs {
        out.push_str(&format!("#   {}\n", p.render()));
    }
    out
}

/// The leading comment block: its content lines with 1-based line numbers.
#[derive(Debug, Clone)]
struct HeaderBlock {
    lines: Vec<(usize, String)>,
}

fn find_header(source: &str) -> Option<HeaderBlock> {
    let lines: Vec<&str> = source.lines().collect();
    let mut i = 0;
    while i < lines.len() && (lines[i].trim().is_empty() || lines[i].starts_with("#!")) {
        i += 1;
    }
    let first = lines.get(i)?.trim_start();
    let mut out = Vec::new();

    for delim in ["\"\"\"", "'''"] {
        let Some(rest) = first.strip_prefix(delim) else {
            continue;
        };
        if let Some(end) = rest.find(delim) {
            out.push((i + 1, rest[..end].to_string()));
            return Some(HeaderBlock { lines: out });
        }
        out.push((i + 1, rest.to_string()));
        for (j, line) in lines.iter().enumerate().skip(i + 1) {
            if let Some(end) = line.find(delim) {
                out.push((j + 1, line[..end].to_string()));
                return Some(HeaderBlock { lines: out });
            }
            out.push((j + 1, line.to_string()));
        }
        return None;
    }

    if let Some(rest) = first.strip_prefix("/*") {
        let strip = |s: &str| -> String {
            let t = s.trim_start();
            t.strip_prefix('*').unwrap_or(t).to_string()
        };
        if let Some(end) = rest.find("*/") {
            out.push((i + 1, rest[..end].to_string()));
            return Some(HeaderBlock { lines: out });
        }
        out.push((i + 1, rest.to_string()));
        for (j, line) in lines.iter().enumerate().skip(i + 1) {
            if let Some(end) = line.find("*/") {
                out.push((j + 1, strip(&line[..end])));
                return Some(HeaderBlock { lines: out });
            }
            out.push((j + 1, strip(line)));
        }
        return None;
    }

    for marker in ["//", "#"] {
        if !first.starts_with(marker) {
            continue;
        }
        for (j, line) in lines.iter().enumerate().skip(i) {
            match line.trim_start().strip_prefix(marker) {
                Some(rest) => out.push((j + 1, rest.to_string())),
                None => break,
            }
        }
        return Some(HeaderBlock { lines: out });
    }
    None
}

fn param_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"^([A-Za-z_][A-Za-z0-9_]*)\s*\(\s*([^,()]+?)\s*(?:,\s*([^()]*?)\s*)?\)\s*:\s*(.*?)\s*$",
        )
        .unwrap()
    })
}

fn parse_param(line: usize, text: &str) -> Result<ParamSpec, MetadataError> {
    let body = text
        .trim()
        .trim_start_matches(['-', '*'])
        .trim_start();
    let caps = param_pattern()
        .captures(body)
        .ok_or_else(|| MetadataError::MalformedParamLine {
            line,
            message: format!("expected `name (type, unit): definition`, got {body:?}"),
        })?;
    let semantic_type = caps[2]
        .parse::<SemanticType>()
        .map_err(|message| MetadataError::MalformedParamLine { line, message })?;
    let unit = caps
        .get(3)
        .map(|m| m.as_str().trim().to_string())
        .filter(|u| !u.is_empty());
    Ok(ParamSpec {
        name: caps[1].to_string(),
        semantic_type,
        unit,
        definition: caps[4].to_string(),
    })
}

#[derive(Clone, Copy, PartialEq)]
enum Section {
    Preamble,
    Source,
    Inputs,
    Outputs,
}

fn label<'a>(text: &'a str, name: &str) -> Option<&'a str> {
    let t = text.trim();
    let rest = t.strip_prefix(name)?;
    rest.strip_prefix(':').map(str::trim)
}

/// Parses the structured header of a program.
pub fn parse_metadata(source_text: &str) -> Result<ProgramMetadata, MetadataError> {
    if source_text.trim().is_empty() {
        return Err(MetadataError::EmptySource);
    }
    let header = find_header(source_text).ok_or(MetadataError::NoHeaderComment)?;

    let mut section = Section::Preamble;
    let mut source: Option<String> = None;
    let mut seen_inputs = false;
    let mut seen_outputs = false;
    let mut inputs: Vec<ParamSpec> = Vec::new();
    let mut outputs: Vec<ParamSpec> = Vec::new();

    let push_param = |list: &mut Vec<ParamSpec>, line: usize, p: ParamSpec| {
        if list.iter().any(|q| q.name == p.name) {
            return Err(MetadataError::DuplicateParam { line, name: p.name });
        }
        list.push(p);
        Ok(())
    };
    let is_none = |s: &str| s.is_empty() || s.eq_ignore_ascii_case("none");

    for (line, text) in &header.lines {
        let line = *line;
        let trimmed = text.trim();
        if trimmed.is_empty() {
            continue;
        }
        if let Some(rest) = label(trimmed, "Source") {
            if source.is_some() {
                return Err(MetadataError::DuplicateField {
                    line,
                    field: "Source".into(),
                });
            }
            source = Some(rest.to_string());
            section = Section::Source;
        } else if let Some(rest) = label(trimmed, "Inputs") {
            if std::mem::replace(&mut seen_inputs, true) {
                return Err(MetadataError::DuplicateField {
                    line,
                    field: "Inputs".into(),
                });
            }
            section = Section::Inputs;
            if !is_none(rest) {
                push_param(&mut inputs, line, parse_param(line, rest)?)?;
            }
        } else if let Some(rest) = label(trimmed, "Outputs") {
            if std::mem::replace(&mut seen_outputs, true) {
                return Err(MetadataError::DuplicateField {
                    line,
                    field: "Outputs".into(),
                });
            }
            section = Section::Outputs;
            if !is_none(rest) {
                push_param(&mut outputs, line, parse_param(line, rest)?)?;
            }
        } else {
            match section {
                Section::Preamble => {
                    return Err(MetadataError::UnexpectedLine {
                        line,
                        text: trimmed.to_string(),
                    })
                }
                Section::Source => {
                    let s = source.get_or_insert_with(String::new);
                    if !s.is_empty() {
                        s.push(' ');
                    }
                    s.push_str(trimmed);
                }
                Section::Inputs => push_param(&mut inputs, line, parse_param(line, trimmed)?)?,
                Section::Outputs => push_param(&mut outputs, line, parse_param(line, trimmed)?)?,
            }
        }
    }

    let knowledge_source = source
        .filter(|s| !s.trim().is_empty())
        .ok_or(MetadataError::MissingSource)?;
    if outputs.is_empty() {
        return Err(MetadataError::NoOutputs);
    }
    Ok(ProgramMetadata {
        knowledge_source,
        inputs,
        outputs,
    })
}

/// Classifies each line as code (`true`) or blank/comment (`false`).
fn code_lines(source_text: &str) -> Vec<bool> {
    let mut out = Vec::new();
    let mut open_block: Option<&'static str> = None;
    for line in source_text.lines() {
        let t = line.trim();
        if let Some(close) = open_block {
            if t.contains(close) {
                open_block = None;
            }
            out.push(false);
            continue;
        }
        if t.is_empty() || t.starts_with('#') || t.starts_with("//") {
            out.push(false);
            continue;
        }
        let mut is_comment = false;
        for (open, close) in [("\"\"\"", "\"\"\""), ("'''", "'''"), ("/*", "*/")] {
            if let Some(rest) = t.strip_prefix(open) {
                is_comment = true;
                if !rest.contains(close) {
                    open_block = Some(close);
                }
                break;
            }
        }
        out.push(!is_comment);
    }
    out
}

/// Lines that are neither blank nor pure comment.
pub fn count_logic_lines(source_text: &str) -> usize {
    code_lines(source_text).into_iter().filter(|c| *c).count()
}

/// A generated program paired with its parsed header.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct KnowledgeIntensiveProgram {
    pub id: String,
    pub document_id: String,
    pub source_text: String,
    pub metadata: ProgramMetadata,
    pub logic_line_count: usize,
}

impl KnowledgeIntensiveProgram {
    pub fn new(
        id: impl Into<String>,
        document_id: impl Into<String>,
        source_text: impl Into<String>,
    ) -> Result<Self, MetadataError> {
        let source_text = source_text.into();
        let metadata = parse_metadata(&source_text)?;
        let logic_line_count = count_logic_lines(&source_text);
        Ok(KnowledgeIntensiveProgram {
            id: id.into(),
            document_id: document_id.into(),
            source_text,
            metadata,
            logic_line_count,
        })
    }
}

impl<'de> Deserialize<'de> for KnowledgeIntensiveProgram {
    /// Re-derives the metadata and line count from the source, so a stored
    /// record can never disagree with its own program text.
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            id: String,
            document_id: String,
            source_text: String,
            #[serde(default)]
            metadata: Option<ProgramMetadata>,
        }
        let raw = Raw::deserialize(d)?;
        let prog = KnowledgeIntensiveProgram::new(raw.id, raw.document_id, raw.source_text)
            .map_err(serde::de::Error::custom)?;
        if raw.metadata.is_some_and(|m| m != prog.metadata) {
            return Err(serde::de::Error::custom(format!(
                "program {}: stored metadata disagrees with its source header",
                prog.id
            )));
        }
        Ok(prog)
    }
}

/// Keywords and markers driving [`lint_program`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LintConfig {
    pub hallucination_lexicon: Vec<String>,
    pub citation_markers: Vec<String>,
}

impl Default for LintConfig {
    fn default() -> Self {
        LintConfig {
            hallucination_lexicon: ["assuming", "assume", "suppose", "假设"]
                .map(String::from)
                .to_vec(),
            citation_markers: ["The law states", "According to"].map(String::from).to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HallucinationHit {
    pub line: usize,
    pub keyword: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LintReport {
    pub fuzzy_params: Vec<String>,
    pub hallucination_hits: Vec<HallucinationHit>,
    pub missing_citation_comments: bool,
    pub is_clean: bool,
}

impl LintReport {
    /// True when the program trips the fuzzy-parameter or hallucination rule.
    pub fn is_negative(&self) -> bool {
        !self.fuzzy_params.is_empty() || !self.hallucination_hits.is_empty()
    }
}

/// Occurrences of `keyword` that begin a word, so `assume` catches `assumed`
/// but `suppose` does not catch `presuppose`.
fn keyword_hits(line: &str, keyword: &str) -> usize {
    let hay = line.to_lowercase();
    let needle = keyword.to_lowercase();
    if needle.is_empty() {
        return 0;
    }
    let ascii_word = needle.chars().next().is_some_and(|c| c.is_ascii_alphanumeric());
    hay.match_indices(&needle)
        .filter(|(pos, _)| {
            !ascii_word
                || hay[..*pos]
                    .chars()
                    .next_back()
                    .is_none_or(|c| !(c.is_alphanumeric() || c == '_'))
        })
        .count()
}

/// Comment text of a line: a pure comment line or a trailing `#`/`//` comment.
fn comment_text(line: &str) -> Option<&str> {
    let t = line.trim_start();
    if let Some(rest) = t.strip_prefix('#').or_else(|| t.strip_prefix("//")) {
        return Some(rest.trim());
    }
    for marker in [" #", " //"] {
        if let Some(pos) = line.find(marker) {
            let before = &line[..pos];
            if before.matches('"').count().is_multiple_of(2) && before.matches('\'').count().is_multiple_of(2) {
                return Some(line[pos + marker.len()..].trim());
            }
        }
    }
    None
}

pub fn lint_program(program: &KnowledgeIntensiveProgram, config: &LintConfig) -> LintReport {
    let fuzzy_params: Vec<String> = program
        .metadata
        .params()
        .filter(|p| !p.is_well_defined())
        .map(|p| p.name.clone())
        .collect();

    let header_lines: BTreeSet<usize> = find_header(&program.source_text)
        .map(|h| h.lines.iter().map(|(l, _)| *l).collect())
        .unwrap_or_default();
    let source_line = find_header(&program.source_text).and_then(|h| {
        h.lines
            .iter()
            .find(|(_, t)| label(t, "Source").is_some())
            .map(|(l, _)| *l)
    });

    let mut hallucination_hits = Vec::new();
    let mut cited = false;
    for (idx, line) in program.source_text.lines().enumerate() {
        let line_no = idx + 1;
        if Some(line_no) != source_line {
            for kw in &config.hallucination_lexicon {
                for _ in 0..keyword_hits(line, kw) {
                    hallucination_hits.push(HallucinationHit {
                        line: line_no,
                        keyword: kw.clone(),
                    });
                }
            }
        }
        if !header_lines.contains(&line_no) {
            if let Some(c) = comment_text(line) {
                let c = c.to_lowercase();
                cited |= config
                    .citation_markers
                    .iter()
                    .any(|m| c.starts_with(&m.to_lowercase()));
            }
        }
    }

    let missing_citation_comments = !cited;
    let is_clean =
        fuzzy_params.is_empty() && hallucination_hits.is_empty() && !missing_citation_comments;
    LintReport {
        fuzzy_params,
        hallucination_hits,
        missing_citation_comments,
        is_clean,
    }
}
