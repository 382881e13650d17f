//! Prompt templates: a small placeholder grammar, prompt pools, and rendering of
//! raw examples into prompt-formatted input text and per-label target texts.
//!
//! Grammar:
//! - `{name}` substitutes the example field `name`;
//! - `{choice}` (target templates only) substitutes the verbalizer of the
//!   candidate label;
//! - `{{` and `}}` are literal braces.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Placeholder name reserved for the verbalizer inside target templates.
pub const CHOICE: &str = "choice";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TemplateError {
    #[error("unbalanced brace at byte {0}")]
    UnbalancedBrace(usize),
    #[error("empty placeholder at byte {0}")]
    EmptyPlaceholder(usize),
    #[error("{{choice}} is only allowed in target templates")]
    ChoiceInInput,
    #[error("unknown field \"{0}\"")]
    UnknownField(String),
    #[error("label index {index} out of range for {count} labels")]
    LabelOutOfRange { index: usize, count: usize },
    #[error("invalid label set: {0}")]
    LabelSet(String),
    #[error("invalid prompt pool: {0}")]
    Pool(String),
    #[error("{0}")]
    Io(String),
}

/// Where a template is used; decides whether `{choice}` is legal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TemplateKind {
    Input,
    Target,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Segment {
    Literal(String),
    Field(String),
    Choice,
}

/// Parse tree of a template source string.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    segments: Vec<Segment>,
}

impl Template {
    pub fn parse(source: &str, kind: TemplateKind) -> Result<Self, TemplateError> {
        let bytes = source.as_bytes();
        let mut segments = Vec::new();
        let mut literal = String::new();
        let mut i = 0;
        while i < bytes.len() {
            match bytes[i] {
                b'{' if bytes.get(i + 1) == Some(&b'{') => {
                    literal.push('{');
                    i += 2;
                }
                b'}' if bytes.get(i + 1) == Some(&b'}') => {
                    literal.push('}');
                    i += 2;
                }
                b'{' => {
                    let start = i;
                    let close = source[i + 1..]
                        .find(['{', '}'])
                        .map(|off| i + 1 + off)
                        .filter(|&pos| bytes[pos] == b'}')
                        .ok_or(TemplateError::UnbalancedBrace(start))?;
                    let name = &source[i + 1..close];
                    if name.is_empty() {
                        return Err(TemplateError::EmptyPlaceholder(start));
                    }
                    if !literal.is_empty() {
                        segments.push(Segment::Literal(std::mem::take(&mut literal)));
                    }
                    if name == CHOICE {
                        if kind == TemplateKind::Input {
                            return Err(TemplateError::ChoiceInInput);
                        }
                        segments.push(Segment::Choice);
                    } else {
                        segments.push(Segment::Field(name.to_string()));
                    }
                    i = close + 1;
                }
                b'}' => return Err(TemplateError::UnbalancedBrace(i)),
                _ => {
                    // Copy the whole UTF-8 character.
                    let ch = source[i..].chars().next().expect("in bounds");
                    literal.push(ch);
                    i += ch.len_utf8();
                }
            }
        }
        if !literal.is_empty() {
            segments.push(Segment::Literal(literal));
        }
        Ok(Template { segments })
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    /// Field names referenced by this template, in order of first appearance.
    pub fn fields(&self) -> impl Iterator<Item = &str> {
        self.segments.iter().filter_map(|s| match s {
            Segment::Field(name) => Some(name.as_str()),
            _ => None,
        })
    }

    pub fn render(
        &self,
        fields: &BTreeMap<String, String>,
        choice: Option<&str>,
    ) -> Result<String, TemplateError> {
        let mut out = String::new();
        for segment in &self.segments {
            match segment {
                Segment::Literal(text) => out.push_str(text),
                Segment::Field(name) => out.push_str(
                    fields
                        .get(name)
                        .ok_or_else(|| TemplateError::UnknownField(name.clone()))?,
                ),
                Segment::Choice => {
                    out.push_str(choice.ok_or_else(|| TemplateError::UnknownField(CHOICE.into()))?)
                }
            }
        }
        Ok(out)
    }
}

/// Serializes back to source form; literal braces are re-escaped.
impl fmt::Display for Template {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for segment in &self.segments {
            match segment {
                Segment::Literal(text) => {
                    write!(f, "{}", text.replace('{', "{{").replace('}', "}}"))?
                }
                Segment::Field(name) => write!(f, "{{{name}}}")?,
                Segment::Choice => write!(f, "{{{CHOICE}}}")?,
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct LabelSet {
    labels: Vec<String>,
}

impl LabelSet {
    pub fn new(labels: Vec<String>) -> Result<Self, TemplateError> {
        if labels.is_empty() {
            return Err(TemplateError::LabelSet("no labels".into()));
        }
        let unique: BTreeSet<&String> = labels.iter().collect();
        if unique.len() != labels.len() {
            return Err(TemplateError::LabelSet("duplicate label identifiers".into()));
        }
        Ok(LabelSet { labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }
}

impl TryFrom<Vec<String>> for LabelSet {
    type Error = TemplateError;
    fn try_from(labels: Vec<String>) -> Result<Self, Self::Error> {
        LabelSet::new(labels)
    }
}

impl From<LabelSet> for Vec<String> {
    fn from(set: LabelSet) -> Self {
        set.labels
    }
}

/// On-disk form of one prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub name: String,
    pub input_template: String,
    pub choices: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_template: Option<String>,
}

/// A prompt with its templates parsed. Label identity is by index: `choices[j]`
/// verbalizes label `j`, and different prompts may use different verbalizers.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptTemplate {
    pub name: String,
    pub input: Template,
    pub choices: Vec<String>,
    pub target: Option<Template>,
}

impl PromptTemplate {
    pub fn from_spec(spec: &PromptSpec) -> Result<Self, TemplateError> {
        Ok(PromptTemplate {
            name: spec.name.clone(),
            input: Template::parse(&spec.input_template, TemplateKind::Input)?,
            choices: spec.choices.clone(),
            target: spec
                .target_template
                .as_deref()
                .map(|s| Template::parse(s, TemplateKind::Target))
                .transpose()?,
        })
    }

    pub fn new(name: &str, input_template: &str, choices: &[&str]) -> Result<Self, TemplateError> {
        Self::from_spec(&PromptSpec {
            name: name.into(),
            input_template: input_template.into(),
            choices: choices.iter().map(|c| c.to_string()).collect(),
            target_template: None,
        })
    }

    pub fn to_spec(&self) -> PromptSpec {
        PromptSpec {
            name: self.name.clone(),
            input_template: self.input.to_string(),
            choices: self.choices.clone(),
            target_template: self.target.as_ref().map(|t| t.to_string()),
        }
    }

    pub fn render_input(&self, example: &Example) -> Result<String, TemplateError> {
        self.input.render(&example.fields, None)
    }

    /// One target text per candidate label; `choices[j]` verbatim when there is
    /// no target template.
    pub fn render_targets(&self, example: &Example) -> Result<Vec<String>, TemplateError> {
        match &self.target {
            None => Ok(self.choices.clone()),
            Some(t) => self
                .choices
                .iter()
                .map(|c| t.render(&example.fields, Some(c)))
                .collect(),
        }
    }

    pub fn render(&self, example: &Example) -> Result<RenderedExample, TemplateError> {
        Ok(RenderedExample {
            input_text: self.render_input(example)?,
            target_texts: self.render_targets(example)?,
        })
    }

    fn referenced_fields(&self) -> impl Iterator<Item = &str> {
        self.input
            .fields()
            .chain(self.target.iter().flat_map(|t| t.fields()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedExample {
    pub input_text: String,
    pub target_texts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub fields: BTreeMap<String, String>,
    #[serde(default)]
    pub label: Option<usize>,
}

impl Example {
    pub fn new<K: Into<String>, V: Into<String>>(
        fields: impl IntoIterator<Item = (K, V)>,
        label: Option<usize>,
    ) -> Self {
        Example {
            fields: fields
                .into_iter()
                .map(|(k, v)| (k.into(), v.into()))
                .collect(),
            label,
        }
    }

    pub fn unlabeled(&self) -> Example {
        Example {
            fields: self.fields.clone(),
            label: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptPool {
    pub task_name: String,
    pub label_set: LabelSet,
    pub templates: Vec<PromptTemplate>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolFile {
    pub task_name: String,
    pub labels: Vec<String>,
    pub templates: Vec<PromptSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Violation {
    ChoicesArity {
        template: String,
        expected: usize,
        found: usize,
    },
    DuplicateName {
        template: String,
    },
    EmptyVerbalizer {
        template: String,
        label: usize,
    },
    EmptyPool,
    TooFewLabels {
        found: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub prompt_count: usize,
    pub label_count: usize,
    pub fields: BTreeSet<String>,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl PromptPool {
    pub fn new(
        task_name: &str,
        label_set: LabelSet,
        templates: Vec<PromptTemplate>,
    ) -> Self {
        PromptPool {
            task_name: task_name.into(),
            label_set,
            templates,
        }
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn num_labels(&self) -> usize {
        self.label_set.len()
    }

    /// Collects every violation instead of stopping at the first one.
    pub fn validate(&self) -> ValidationReport {
        let j = self.label_set.len();
        let mut violations = Vec::new();
        if self.templates.is_empty() {
            violations.push(Violation::EmptyPool);
        }
        if j < 2 {
            violations.push(Violation::TooFewLabels { found: j });
        }
        let mut seen = BTreeSet::new();
        let mut fields = BTreeSet::new();
        for t in &self.templates {
            if !seen.insert(t.name.as_str()) {
                violations.push(Violation::DuplicateName {
                    template: t.name.clone(),
                });
            }
            if t.choices.len() != j {
                violations.push(Violation::ChoicesArity {
                    template: t.name.clone(),
                    expected: j,
                    found: t.choices.len(),
                });
            }
            for (label, c) in t.choices.iter().enumerate() {
                if c.is_empty() {
                    violations.push(Violation::EmptyVerbalizer {
                        template: t.name.clone(),
                        label,
                    });
                }
            }
            fields.extend(t.referenced_fields().map(str::to_string));
        }
        ValidationReport {
            prompt_count: self.templates.len(),
            label_count: j,
            fields,
            violations,
        }
    }

    /// Keeps the first `k` prompts.
    pub fn subset(&self, k: usize) -> PromptPool {
        PromptPool {
            task_name: self.task_name.clone(),
            label_set: self.label_set.clone(),
            templates: self.templates.iter().take(k).cloned().collect(),
        }
    }

    pub fn from_file_repr(file: &PoolFile) -> Result<Self, TemplateError> {
        let label_set = LabelSet::new(file.labels.clone())?;
        let templates = file
            .templates
            .iter()
            .map(PromptTemplate::from_spec)
            .collect::<Result<Vec<_>, _>>()?;
        Ok(PromptPool::new(&file.task_name, label_set, templates))
    }

    pub fn to_file_repr(&self) -> PoolFile {
        PoolFile {
            task_name: self.task_name.clone(),
            labels: self.label_set.labels().to_vec(),
            templates: self.templates.iter().map(PromptTemplate::to_spec).collect(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, TemplateError> {
        let file: PoolFile =
            serde_json::from_str(text).map_err(|e| TemplateError::Pool(e.to_string()))?;
        Self::from_file_repr(&file)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file_repr()).expect("pool serializes")
    }

    pub fn load(path: &Path) -> Result<Self, TemplateError> {
        let text = fs::read_to_string(path)
            .map_err(|e| TemplateError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<(), TemplateError> {
        fs::write(path, self.to_json() + "\n")
            .map_err(|e| TemplateError::Io(format!("{}: {e}", path.display())))
    }
}

/// Reads a JSON-lines dataset (`{"fields": {...}, "label": int|null}` per line).
pub fn read_dataset(path: &Path) -> Result<Vec<Example>, TemplateError> {
    let file =
        fs::File::open(path).map_err(|e| TemplateError::Io(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| TemplateError::Io(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: Example = serde_json::from_str(&line)
            .map_err(|e| TemplateError::Io(format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.push(ex);
    }
    Ok(out)
}

pub fn write_dataset(path: &Path, examples: &[Example]) -> Result<(), TemplateError> {
    let mut file = std::io::BufWriter::new(
        fs::File::create(path)
            .map_err(|e| TemplateError::Io(format!("{}: {e}", path.display())))?,
    );
    for ex in examples {
        let line = serde_json::to_string(ex).expect("example serializes");
        writeln!(file, "{line}").map_err(|e| TemplateError::Io(e.to_string()))?;
    }
    file.flush().map_err(|e| TemplateError::Io(e.to_string()))
}
