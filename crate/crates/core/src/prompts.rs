//! Prompt templates with `{placeholder}` substitution.
//!
//! A template body may contain `{question}`, `{reference}`, `{choices}`,
//! `{answer}`, `{candidates}` and `{critique}`; `{{` and `}}` produce literal
//! braces. Each template kind declares which placeholders it requires and
//! which it accepts, and bodies are checked against that at load time.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::types::{Candidate, ChoiceLabel, QuestionRecord, NOTA_TEXT};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Placeholder {
    Question,
    Reference,
    Choices,
    Answer,
    Candidates,
    Critique,
}

impl Placeholder {
    const ALL: [Placeholder; 6] = [
        Placeholder::Question,
        Placeholder::Reference,
        Placeholder::Choices,
        Placeholder::Answer,
        Placeholder::Candidates,
        Placeholder::Critique,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Placeholder::Question => "question",
            Placeholder::Reference => "reference",
            Placeholder::Choices => "choices",
            Placeholder::Answer => "answer",
            Placeholder::Candidates => "candidates",
            Placeholder::Critique => "critique",
        }
    }

    fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateKind {
    Sample,
    MultiChoice,
    PointwiseEval,
    PointwiseEvalWithCandidates,
    Critique,
    Revise,
}

impl TemplateKind {
    pub const ALL: [TemplateKind; 6] = [
        TemplateKind::Sample,
        TemplateKind::MultiChoice,
        TemplateKind::PointwiseEval,
        TemplateKind::PointwiseEvalWithCandidates,
        TemplateKind::Critique,
        TemplateKind::Revise,
    ];

    /// Asset file name inside a templates directory.
    pub fn file_name(self) -> &'static str {
        match self {
            TemplateKind::Sample => "sample.txt",
            TemplateKind::MultiChoice => "multichoice.txt",
            TemplateKind::PointwiseEval => "pointwise_eval.txt",
            TemplateKind::PointwiseEvalWithCandidates => "pointwise_eval_with_candidates.txt",
            TemplateKind::Critique => "critique.txt",
            TemplateKind::Revise => "revise.txt",
        }
    }

    fn required(self) -> &'static [Placeholder] {
        use Placeholder::*;
        match self {
            TemplateKind::Sample => &[Question],
            TemplateKind::MultiChoice => &[Question, Choices],
            TemplateKind::PointwiseEval => &[Question, Answer],
            TemplateKind::PointwiseEvalWithCandidates => &[Question, Answer, Candidates],
            TemplateKind::Critique => &[Question, Answer],
            TemplateKind::Revise => &[Question, Answer, Critique],
        }
    }

    fn allowed(self, p: Placeholder) -> bool {
        p == Placeholder::Reference || self.required().contains(&p)
    }
}

impl fmt::Display for TemplateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = self.file_name().trim_end_matches(".txt");
        f.write_str(name)
    }
}

#[derive(Debug, Clone)]
enum Segment {
    Literal(String),
    Slot(Placeholder),
}

#[derive(Debug, Clone)]
pub struct PromptTemplate {
    kind: TemplateKind,
    body: String,
    segments: Vec<Segment>,
}

impl PromptTemplate {
    pub fn new(kind: TemplateKind, body: impl Into<String>) -> Result<Self> {
        let body = body.into();
        let invalid = |reason: String| Error::Template {
            name: kind.to_string(),
            reason,
        };
        let segments = parse_body(&body).map_err(invalid)?;
        for seg in &segments {
            if let Segment::Slot(p) = seg {
                if !kind.allowed(*p) {
                    return Err(invalid(format!("placeholder {{{}}} not allowed", p.name())));
                }
            }
        }
        for req in kind.required() {
            let present = segments
                .iter()
                .any(|s| matches!(s, Segment::Slot(p) if p == req));
            if !present {
                return Err(invalid(format!("missing placeholder {{{}}}", req.name())));
            }
        }
        Ok(PromptTemplate {
            kind,
            body,
            segments,
        })
    }

    pub fn from_file(kind: TemplateKind, path: &Path) -> Result<Self> {
        let body = std::fs::read_to_string(path)?;
        Self::new(kind, body)
    }

    pub fn kind(&self) -> TemplateKind {
        self.kind
    }

    pub fn body(&self) -> &str {
        &self.body
    }

    /// Hex SHA-256 of the body.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.body.as_bytes()))
    }

    fn uses(&self, placeholder: Placeholder) -> bool {
        self.segments
            .iter()
            .any(|s| matches!(s, Segment::Slot(p) if *p == placeholder))
    }

    fn render(&self, values: &Values<'_>) -> Result<String> {
        let mut out = String::with_capacity(self.body.len() + 64);
        for seg in &self.segments {
            match seg {
                Segment::Literal(s) => out.push_str(s),
                Segment::Slot(p) => {
                    let v = values
                        .get(*p)
                        .ok_or_else(|| Error::MissingPlaceholder(p.name().to_string()))?;
                    out.push_str(v);
                }
            }
        }
        Ok(out)
    }

    fn expect_kind(&self, expected: &[TemplateKind]) -> Result<()> {
        if expected.contains(&self.kind) {
            Ok(())
        } else {
            Err(Error::Template {
                name: self.kind.to_string(),
                reason: format!("cannot be used as {:?}", expected),
            })
        }
    }
}

fn parse_body(body: &str) -> std::result::Result<Vec<Segment>, String> {
    let mut segments = Vec::new();
    let mut literal = String::new();
    let mut chars = body.chars().peekable();
    while let Some(c) = chars.next() {
        match c {
            '{' if chars.peek() == Some(&'{') => {
                chars.next();
                literal.push('{');
            }
            '}' if chars.peek() == Some(&'}') => {
                chars.next();
                literal.push('}');
            }
            '{' => {
                let mut name = String::new();
                loop {
                    match chars.next() {
                        Some('}') => break,
                        Some(ch) => name.push(ch),
                        None => return Err(format!("unterminated placeholder {{{name}")),
                    }
                }
                let p = Placeholder::from_name(&name)
                    .ok_or_else(|| format!("unknown placeholder {{{name}}}"))?;
                if !literal.is_empty() {
                    segments.push(Segment::Literal(std::mem::take(&mut literal)));
                }
                segments.push(Segment::Slot(p));
            }
            '}' => return Err("unmatched '}'".to_string()),
            other => literal.push(other),
        }
    }
    if !literal.is_empty() {
        segments.push(Segment::Literal(literal));
    }
    Ok(segments)
}

#[derive(Default)]
struct Values<'a> {
    question: Option<&'a str>,
    reference: Option<&'a str>,
    choices: Option<&'a str>,
    answer: Option<&'a str>,
    candidates: Option<&'a str>,
    critique: Option<&'a str>,
}

impl<'a> Values<'a> {
    fn for_question(q: &'a QuestionRecord) -> Self {
        Values {
            question: Some(&q.question),
            reference: q.reference.as_deref(),
            ..Default::default()
        }
    }

    fn get(&self, p: Placeholder) -> Option<&'a str> {
        match p {
            Placeholder::Question => self.question,
            Placeholder::Reference => self.reference,
            Placeholder::Choices => self.choices,
            Placeholder::Answer => self.answer,
            Placeholder::Candidates => self.candidates,
            Placeholder::Critique => self.critique,
        }
    }
}

fn display_text(candidate: &Candidate) -> &str {
    candidate.text.trim()
}

fn nonempty<'a>(s: &'a str, what: &'static str) -> Result<&'a str> {
    if s.trim().is_empty() {
        Err(Error::EmptyInput(what))
    } else {
        Ok(s)
    }
}

pub fn render_sample(template: &PromptTemplate, question: &QuestionRecord) -> Result<String> {
    template.expect_kind(&[TemplateKind::Sample])?;
    template.render(&Values::for_question(question))
}

/// Renders a multiple-choice prompt. Candidates are listed as `A) text`,
/// `B) text`, ... in the given order, followed by `None of the above` when
/// `include_nota` is set. Returns the prompt and the labels used.
pub fn render_multichoice(
    template: &PromptTemplate,
    question: &QuestionRecord,
    candidates: &[Candidate],
    include_nota: bool,
) -> Result<(String, Vec<ChoiceLabel>)> {
    template.expect_kind(&[TemplateKind::MultiChoice])?;
    if candidates.is_empty() {
        return Err(Error::NoCandidates);
    }
    let total = candidates.len() + usize::from(include_nota);
    if total > ChoiceLabel::MAX_LABELS {
        return Err(Error::LabelSpaceExhausted(candidates.len()));
    }
    let texts = candidates
        .iter()
        .map(display_text)
        .chain(include_nota.then_some(NOTA_TEXT));
    let mut labels = Vec::with_capacity(total);
    let mut block = String::new();
    for (i, text) in texts.enumerate() {
        let label = ChoiceLabel::from_index(i).expect("checked above");
        if i > 0 {
            block.push('\n');
        }
        block.push_str(&format!("{label}) {text}"));
        labels.push(label);
    }
    let values = Values {
        choices: Some(&block),
        ..Values::for_question(question)
    };
    Ok((template.render(&values)?, labels))
}

/// Renders a Yes/No evaluation prompt for `answer`. With `other_candidates`,
/// the template must be the with-candidates kind and lists them as `- text`
/// lines ahead of the answer.
pub fn render_pointwise(
    template: &PromptTemplate,
    question: &QuestionRecord,
    answer: &Candidate,
    other_candidates: Option<&[Candidate]>,
) -> Result<String> {
    template.expect_kind(&[
        TemplateKind::PointwiseEval,
        TemplateKind::PointwiseEvalWithCandidates,
    ])?;
    let answer_text = nonempty(display_text(answer), "answer")?;
    let block = other_candidates.map(|others| {
        others
            .iter()
            .map(|c| format!("- {}", display_text(c)))
            .collect::<Vec<_>>()
            .join("\n")
    });
    if block.is_some() && !template.uses(Placeholder::Candidates) {
        return Err(Error::Template {
            name: template.kind.to_string(),
            reason: "candidates given but template has no {candidates} placeholder".into(),
        });
    }
    let values = Values {
        answer: Some(answer_text),
        candidates: block.as_deref(),
        ..Values::for_question(question)
    };
    template.render(&values)
}

pub fn render_critique(
    template: &PromptTemplate,
    question: &QuestionRecord,
    answer: &Candidate,
) -> Result<String> {
    template.expect_kind(&[TemplateKind::Critique])?;
    let values = Values {
        answer: Some(nonempty(display_text(answer), "answer")?),
        ..Values::for_question(question)
    };
    template.render(&values)
}

pub fn render_revise(
    template: &PromptTemplate,
    question: &QuestionRecord,
    answer: &Candidate,
    critique: &str,
) -> Result<String> {
    template.expect_kind(&[TemplateKind::Revise])?;
    let values = Values {
        answer: Some(nonempty(display_text(answer), "answer")?),
        critique: Some(nonempty(critique.trim(), "critique")?),
        ..Values::for_question(question)
    };
    template.render(&values)
}

/// Which built-in template family to start from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    #[default]
    Qa,
    Summarization,
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "qa" => Ok(Task::Qa),
            "summarization" => Ok(Task::Summarization),
            other => Err(Error::Config(format!("unknown task {other:?}"))),
        }
    }
}

fn builtin_body(task: Task, kind: TemplateKind) -> &'static str {
    use TemplateKind::*;
    match (task, kind) {
        (Task::Qa, Sample) => include_str!("../templates/qa/sample.txt"),
        (Task::Qa, MultiChoice) => include_str!("../templates/qa/multichoice.txt"),
        (Task::Qa, PointwiseEval) => include_str!("../templates/qa/pointwise_eval.txt"),
        (Task::Qa, PointwiseEvalWithCandidates) => {
            include_str!("../templates/qa/pointwise_eval_with_candidates.txt")
        }
        (Task::Qa, Critique) => include_str!("../templates/qa/critique.txt"),
        (Task::Qa, Revise) => include_str!("../templates/qa/revise.txt"),
        (Task::Summarization, Sample) => include_str!("../templates/summarization/sample.txt"),
        (Task::Summarization, MultiChoice) => {
            include_str!("../templates/summarization/multichoice.txt")
        }
        (Task::Summarization, PointwiseEval) => {
            include_str!("../templates/summarization/pointwise_eval.txt")
        }
        (Task::Summarization, PointwiseEvalWithCandidates) => {
            include_str!("../templates/summarization/pointwise_eval_with_candidates.txt")
        }
        (Task::Summarization, Critique) => include_str!("../templates/summarization/critique.txt"),
        (Task::Summarization, Revise) => include_str!("../templates/summarization/revise.txt"),
    }
}

/// Built-in judge prompt (pointwise kind) for the given task.
pub fn builtin_judge(task: Task) -> PromptTemplate {
    let body = match task {
        Task::Qa => include_str!("../templates/qa/judge.txt"),
        Task::Summarization => include_str!("../templates/summarization/judge.txt"),
    };
    PromptTemplate::new(TemplateKind::PointwiseEval, body).expect("built-in judge template is valid")
}

/// One template per kind.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    templates: BTreeMap<TemplateKind, PromptTemplate>,
}

impl TemplateSet {
    pub fn builtin(task: Task) -> Self {
        let templates = TemplateKind::ALL
            .into_iter()
            .map(|k| {
                let t = PromptTemplate::new(k, builtin_body(task, k))
                    .expect("built-in templates are valid");
                (k, t)
            })
            .collect();
        TemplateSet { templates }
    }

    /// Loads `<kind>.txt` files from `dir`; kinds without a file keep the
    /// built-in template of `task`.
    pub fn load_dir(dir: &Path, task: Task) -> Result<Self> {
        if !dir.is_dir() {
            return Err(Error::Config(format!(
                "templates directory {} does not exist",
                dir.display()
            )));
        }
        let mut set = Self::builtin(task);
        for kind in TemplateKind::ALL {
            let path = dir.join(kind.file_name());
            if path.is_file() {
                set.templates.insert(kind, PromptTemplate::from_file(kind, &path)?);
            }
        }
        Ok(set)
    }

    pub fn get(&self, kind: TemplateKind) -> &PromptTemplate {
        &self.templates[&kind]
    }

    pub fn sample(&self) -> &PromptTemplate {
        self.get(TemplateKind::Sample)
    }

    pub fn multichoice(&self) -> &PromptTemplate {
        self.get(TemplateKind::MultiChoice)
    }

    pub fn pointwise(&self) -> &PromptTemplate {
        self.get(TemplateKind::PointwiseEval)
    }

    pub fn pointwise_with_candidates(&self) -> &PromptTemplate {
        self.get(TemplateKind::PointwiseEvalWithCandidates)
    }

    pub fn critique(&self) -> &PromptTemplate {
        self.get(TemplateKind::Critique)
    }

    pub fn revise(&self) -> &PromptTemplate {
        self.get(TemplateKind::Revise)
    }

    /// Template name to body hash.
    pub fn hashes(&self) -> BTreeMap<String, String> {
        self.templates
            .iter()
            .map(|(k, t)| (k.to_string(), t.hash()))
            .collect()
    }
}
