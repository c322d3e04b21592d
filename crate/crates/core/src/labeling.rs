//! Correctness labels: loaded from a labels file or produced by a prompted
//! Yes/No judge through any [`Backend`].

use std::collections::HashMap;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::Deserialize;

use crate::backend::Backend;
use crate::error::{Error, Result};
use crate::pipeline::query_p_yes;
use crate::prompts::{render_pointwise, PromptTemplate};
use crate::types::{normalize_text, Candidate, CorrectnessLabel, QuestionRecord};

pub const DEFAULT_JUDGE_THRESHOLD: f64 = 0.5;

/// Immutable lookup from (question id, normalized answer text) to correctness.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabelStore {
    entries: HashMap<(String, String), bool>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLabel {
    id: String,
    answer_text: String,
    label: i64,
}

impl LabelStore {
    /// Duplicate (id, answer) pairs are accepted when they agree.
    pub fn from_labels(labels: impl IntoIterator<Item = CorrectnessLabel>) -> Result<Self> {
        let mut store = LabelStore::default();
        for l in labels {
            store.insert(l)?;
        }
        Ok(store)
    }

    fn insert(&mut self, label: CorrectnessLabel) -> Result<()> {
        let correct = match label.label {
            0 => false,
            1 => true,
            _ => return Err(Error::OutOfRange("label must be 0/1".into())),
        };
        let key = (label.id, normalize_text(&label.answer_text));
        match self.entries.get(&key) {
            Some(&prev) if prev != correct => Err(Error::LabelConflict {
                id: key.0,
                answer: label.answer_text,
            }),
            Some(_) => Ok(()),
            None => {
                self.entries.insert(key, correct);
                Ok(())
            }
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let mut store = LabelStore::default();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parse_error = |message: String| Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                message,
            };
            let raw: RawLabel = serde_json::from_str(&line).map_err(|e| parse_error(e.to_string()))?;
            let label = match raw.label {
                0 | 1 => raw.label as u8,
                _ => return Err(parse_error("label must be 0/1".into())),
            };
            store
                .insert(CorrectnessLabel {
                    id: raw.id,
                    answer_text: raw.answer_text,
                    label,
                })
                .map_err(|e| parse_error(e.to_string()))?;
        }
        Ok(store)
    }

    pub fn get(&self, id: &str, answer_text: &str) -> Option<bool> {
        self.entries
            .get(&(id.to_string(), normalize_text(answer_text)))
            .copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Prompted binary judge: label 1 iff the judge's renormalized p(Yes) is at
/// least `threshold`.
#[derive(Clone)]
pub struct LlmJudge<'a> {
    backend: &'a dyn Backend,
    template: &'a PromptTemplate,
    threshold: f64,
}

impl<'a> LlmJudge<'a> {
    pub fn new(backend: &'a dyn Backend, template: &'a PromptTemplate) -> Self {
        LlmJudge {
            backend,
            template,
            threshold: DEFAULT_JUDGE_THRESHOLD,
        }
    }

    pub fn with_threshold(mut self, threshold: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&threshold) {
            return Err(Error::OutOfRange(format!("judge threshold {threshold}")));
        }
        self.threshold = threshold;
        Ok(self)
    }

    pub fn prompt(&self, question: &QuestionRecord, answer: &str) -> Result<String> {
        let candidate = Candidate {
            text: answer.to_string(),
            token_logprobs: Vec::new(),
        };
        render_pointwise(self.template, question, &candidate, None)
    }

    pub fn p_yes(&self, question: &QuestionRecord, answer: &str) -> Result<f64> {
        let prompt = self.prompt(question, answer)?;
        Ok(query_p_yes(self.backend, &prompt)?.p_yes())
    }

    pub fn judge(&self, question: &QuestionRecord, answer: &str) -> Result<u8> {
        Ok(u8::from(self.p_yes(question, answer)? >= self.threshold))
    }

    pub fn label(&self, question: &QuestionRecord, answer: &str) -> Result<CorrectnessLabel> {
        Ok(CorrectnessLabel {
            id: question.id.clone(),
            answer_text: answer.to_string(),
            label: self.judge(question, answer)?,
        })
    }
}

/// Judges `answer` with the default threshold.
pub fn llm_judge(
    question: &QuestionRecord,
    answer: &str,
    template: &PromptTemplate,
    backend: &dyn Backend,
) -> Result<u8> {
    LlmJudge::new(backend, template).judge(question, answer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{Fixture, MockBackend};
    use crate::prompts::{builtin_judge, Task};

    fn write(lines: &str) -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.jsonl");
        std::fs::write(&path, lines).unwrap();
        (dir, path)
    }

    #[test]
    fn loads_well_formed_file() {
        let (_d, path) = write(concat!(
            r#"{"id": "q1", "answer_text": "Paris", "label": 1}"#, "\n",
            r#"{"id": "q1", "answer_text": "Lyon", "label": 0}"#, "\n",
            "\n",
            r#"{"id": "q2", "answer_text": "Four", "label": 1}"#, "\n",
        ));
        let store = LabelStore::load(&path).unwrap();
        assert_eq!(store.len(), 3);
        assert_eq!(store.get("q1", "  paris "), Some(true));
        assert_eq!(store.get("q1", "Lyon"), Some(false));
        assert_eq!(store.get("q2", "Five"), None);
    }

    #[test]
    fn rejects_bad_files() {
        let (_d, path) = write(concat!(
            r#"{"id": "q1", "answer_text": "Paris", "label": 1}"#, "\n",
            r#"{"id": "q1", "answer_text": "paris", "label": 0}"#, "\n",
        ));
        let err = LabelStore::load(&path).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        assert!(err.to_string().contains("conflicting"));

        let (_d, path) = write(r#"{"id": "q1", "answer_text": "Paris", "label": 2}"#);
        let err = LabelStore::load(&path).unwrap_err();
        assert!(err.to_string().contains("label must be 0/1"), "{err}");

        let (_d, path) = write("{\"id\": \"q1\", \"answer_text\": \"x\", \"label\": 1}\nnot json\n");
        assert!(matches!(LabelStore::load(&path), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn agreeing_duplicates_are_fine() {
        let l = |label| CorrectnessLabel { id: "q".into(), answer_text: "A".into(), label };
        assert_eq!(LabelStore::from_labels([l(1), l(1)]).unwrap().len(), 1);
        assert!(LabelStore::from_labels([l(1), l(0)]).is_err());
        assert!(LabelStore::from_labels([l(3)]).is_err());
    }

    fn judge_backend(template: &PromptTemplate, q: &QuestionRecord, answer: &str, yes: f64) -> MockBackend {
        let prompt = LlmJudge::new(&MockBackend::new(Fixture::new()), template)
            .prompt(q, answer)
            .unwrap();
        let mut f = Fixture::new();
        f.add_logprobs(prompt, [("Yes", yes.ln()), ("No", (1.0 - yes).ln())]);
        MockBackend::new(f)
    }

    #[test]
    fn judge_threshold() {
        let template = builtin_judge(Task::Qa);
        let q = QuestionRecord::new("q1", "Capital of France?");
        let mock = judge_backend(&template, &q, "Paris", 0.9);
        assert_eq!(llm_judge(&q, "Paris", &template, &mock).unwrap(), 1);
        let mock = judge_backend(&template, &q, "Paris", 0.5);
        assert_eq!(llm_judge(&q, "Paris", &template, &mock).unwrap(), 1);
        let mock = judge_backend(&template, &q, "Paris", 0.3);
        assert_eq!(llm_judge(&q, "Paris", &template, &mock).unwrap(), 0);
        let strict = LlmJudge::new(&mock, &template).with_threshold(0.2).unwrap();
        assert_eq!(strict.judge(&q, "Paris").unwrap(), 1);
        assert!(LlmJudge::new(&mock, &template).with_threshold(1.5).is_err());
    }

    #[test]
    fn judge_tokens_unavailable() {
        let template = builtin_judge(Task::Qa);
        let q = QuestionRecord::new("q1", "Capital of France?");
        let prompt = LlmJudge::new(&MockBackend::new(Fixture::new()), &template)
            .prompt(&q, "Paris")
            .unwrap();
        let mut f = Fixture::new();
        f.add_logprobs(prompt, [("Yes", -0.1)]);
        let mock = MockBackend::new(f);
        assert!(matches!(
            llm_judge(&q, "Paris", &template, &mock),
            Err(Error::TokensUnavailable(_))
        ));
        let empty = MockBackend::new(Fixture::new());
        assert!(llm_judge(&q, "Paris", &template, &empty).is_err());
    }
}
