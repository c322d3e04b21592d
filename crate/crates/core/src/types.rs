//! Domain types shared by every stage: dataset records, sampled candidates,
//! choice distributions, scored selections and correctness labels.

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use serde::de::{self, Deserializer, Visitor};
use serde::ser::Serializer;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The exact text of the appended "none of the above" option.
pub const NOTA_TEXT: &str = "None of the above";

/// Tolerance for the probability-sum invariant of [`ChoiceDistribution`].
pub const PROB_SUM_TOLERANCE: f64 = 1e-9;

/// Normalized form of answer text used for dedup and label joins: trimmed,
/// internal whitespace runs collapsed to one space, lowercased.
pub fn normalize_text(text: &str) -> String {
    text.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionRecord {
    pub id: String,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
}

impl QuestionRecord {
    pub fn new(id: impl Into<String>, question: impl Into<String>) -> Self {
        QuestionRecord {
            id: id.into(),
            question: question.into(),
            reference: None,
        }
    }

    pub fn with_reference(mut self, reference: impl Into<String>) -> Self {
        self.reference = Some(reference.into());
        self
    }

    fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::Dataset("empty id".into()));
        }
        if self.question.is_empty() {
            return Err(Error::Dataset(format!("empty question for id {}", self.id)));
        }
        Ok(())
    }
}

/// An ordered list of questions with unique ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    records: Vec<QuestionRecord>,
}

impl Dataset {
    pub fn new(records: Vec<QuestionRecord>) -> Result<Self> {
        let mut seen = HashSet::new();
        for record in &records {
            record.validate()?;
            if !seen.insert(record.id.as_str()) {
                return Err(Error::Dataset(format!("duplicate id {}", record.id)));
            }
        }
        Ok(Dataset { records })
    }

    pub fn records(&self) -> &[QuestionRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn load_jsonl(path: &Path) -> Result<Self> {
        let records = read_jsonl::<QuestionRecord>(path)?;
        Dataset::new(records)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        write_jsonl(path, &self.records)
    }
}

/// One sampled answer with the backend's per-token log-probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub text: String,
    pub token_logprobs: Vec<f64>,
}

impl Candidate {
    pub fn new(text: impl Into<String>, token_logprobs: Vec<f64>) -> Result<Self> {
        let candidate = Candidate {
            text: text.into(),
            token_logprobs,
        };
        candidate.validate()?;
        Ok(candidate)
    }

    pub fn validate(&self) -> Result<()> {
        for &lp in &self.token_logprobs {
            if lp.is_nan() || lp > 0.0 {
                return Err(Error::OutOfRange(format!(
                    "token logprob {lp} in candidate {:?} must be <= 0",
                    self.text
                )));
            }
        }
        Ok(())
    }

    pub fn token_count(&self) -> usize {
        self.token_logprobs.len()
    }

    pub fn normalized_text(&self) -> String {
        normalize_text(&self.text)
    }
}

/// A single uppercase choice letter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ChoiceLabel(char);

impl ChoiceLabel {
    pub const MAX_LABELS: usize = 26;

    pub fn from_index(index: usize) -> Option<Self> {
        (index < Self::MAX_LABELS).then(|| ChoiceLabel((b'A' + index as u8) as char))
    }

    pub fn index(self) -> usize {
        (self.0 as u8 - b'A') as usize
    }

    pub fn letter(self) -> char {
        self.0
    }

    pub fn as_string(self) -> String {
        self.0.to_string()
    }
}

impl fmt::Display for ChoiceLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl FromStr for ChoiceLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut chars = s.chars();
        match (chars.next(), chars.next()) {
            (Some(c @ 'A'..='Z'), None) => Ok(ChoiceLabel(c)),
            _ => Err(Error::OutOfRange(format!("not a choice label: {s:?}"))),
        }
    }
}

/// Probability over choice labels, renormalized over the labels only.
#[derive(Debug, Clone, PartialEq)]
pub struct ChoiceDistribution {
    probs: Vec<f64>,
    labels: Vec<ChoiceLabel>,
    nota_index: Option<usize>,
}

impl ChoiceDistribution {
    /// Labels are assigned `A, B, ...` in order; the NOTA entry, if any, is last.
    pub fn new(probs: Vec<f64>, has_nota: bool) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::EmptyInput("choice distribution"));
        }
        if probs.len() > ChoiceLabel::MAX_LABELS {
            return Err(Error::LabelSpaceExhausted(probs.len()));
        }
        for &p in &probs {
            if !p.is_finite() {
                return Err(Error::NonFinite(format!("probability {p}")));
            }
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::OutOfRange(format!("probability {p}")));
            }
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > PROB_SUM_TOLERANCE {
            return Err(Error::OutOfRange(format!("probabilities sum to {sum}")));
        }
        let labels = (0..probs.len())
            .map(|i| ChoiceLabel::from_index(i).expect("bounded above"))
            .collect();
        let nota_index = has_nota.then(|| probs.len() - 1);
        Ok(ChoiceDistribution {
            probs,
            labels,
            nota_index,
        })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn labels(&self) -> &[ChoiceLabel] {
        &self.labels
    }

    pub fn nota_index(&self) -> Option<usize> {
        self.nota_index
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn nota_prob(&self) -> Option<f64> {
        self.nota_index.map(|i| self.probs[i])
    }

    /// Probabilities of the real (non-NOTA) answers.
    pub fn answer_probs(&self) -> &[f64] {
        match self.nota_index {
            Some(i) => &self.probs[..i],
            None => &self.probs,
        }
    }
}

/// Every confidence-scoring method, in report order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    SeqLik,
    LenNormSeqLik,
    SampleSelect,
    SampleSelectNota,
    SampleEval,
    SampleEvalCand,
    Hybrid,
    HybridNota,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::SeqLik,
        Method::LenNormSeqLik,
        Method::SampleSelect,
        Method::SampleSelectNota,
        Method::SampleEval,
        Method::SampleEvalCand,
        Method::Hybrid,
        Method::HybridNota,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::SeqLik => "seq_lik",
            Method::LenNormSeqLik => "len_norm_seq_lik",
            Method::SampleSelect => "sample_select",
            Method::SampleSelectNota => "sample_select_nota",
            Method::SampleEval => "sample_eval",
            Method::SampleEvalCand => "sample_eval_cand",
            Method::Hybrid => "hybrid",
            Method::HybridNota => "hybrid_nota",
        }
    }

    /// Row name in the summary table.
    pub fn display_name(self) -> &'static str {
        match self {
            Method::SeqLik => "Sequence likelihood",
            Method::LenNormSeqLik => "Len-norm sequence likelihood",
            Method::SampleSelect => "Sample and Select",
            Method::SampleSelectNota => "Sample and Select w/ nota",
            Method::SampleEval => "Sample and Eval",
            Method::SampleEvalCand => "Sample and Eval w/ candidates",
            Method::Hybrid => "Hybrid",
            Method::HybridNota => "Hybrid w/ nota",
        }
    }

    pub fn includes_nota(self) -> bool {
        matches!(self, Method::SampleSelectNota | Method::HybridNota)
    }

    /// The same method with the NOTA option added, if it has such a variant.
    pub fn with_nota(self) -> Option<Method> {
        match self {
            Method::SampleSelect | Method::SampleSelectNota => Some(Method::SampleSelectNota),
            Method::Hybrid | Method::HybridNota => Some(Method::HybridNota),
            _ => None,
        }
    }

    pub fn uses_multichoice(self) -> bool {
        matches!(
            self,
            Method::SampleSelect | Method::SampleSelectNota | Method::Hybrid | Method::HybridNota
        )
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                let known: Vec<_> = Method::ALL.iter().map(|m| m.as_str()).collect();
                Error::Config(format!("unknown method {s:?} (known: {})", known.join(", ")))
            })
    }
}

/// Output of one scoring method on one question.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSelection {
    pub question_id: String,
    pub method: Method,
    pub selected_index: usize,
    pub score: f64,
    pub per_candidate_scores: Option<Vec<f64>>,
}

/// A 64-bit score whose JSON form also carries infinities, written as the
/// strings `"-inf"` and `"inf"`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Score(pub f64);

impl Serialize for Score {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let v = self.0;
        if v.is_finite() {
            serializer.serialize_f64(v)
        } else if v == f64::NEG_INFINITY {
            serializer.serialize_str("-inf")
        } else if v == f64::INFINITY {
            serializer.serialize_str("inf")
        } else {
            Err(serde::ser::Error::custom("NaN score"))
        }
    }
}

impl<'de> Deserialize<'de> for Score {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct ScoreVisitor;

        impl Visitor<'_> for ScoreVisitor {
            type Value = Score;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a number, \"-inf\" or \"inf\"")
            }

            fn visit_f64<E: de::Error>(self, v: f64) -> std::result::Result<Score, E> {
                Ok(Score(v))
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<Score, E> {
                Ok(Score(v as f64))
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<Score, E> {
                Ok(Score(v as f64))
            }

            fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<Score, E> {
                match v {
                    "-inf" => Ok(Score(f64::NEG_INFINITY)),
                    "inf" => Ok(Score(f64::INFINITY)),
                    other => Err(E::custom(format!("invalid score string {other:?}"))),
                }
            }
        }

        deserializer.deserialize_any(ScoreVisitor)
    }
}

/// One line of the results file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub id: String,
    pub method: Method,
    pub selected_text: String,
    pub selected_index: usize,
    pub score: Score,
    pub per_candidate_scores: Option<Vec<Score>>,
    pub n_candidates_after_dedup: usize,
}

impl ResultRecord {
    pub fn from_selection(selection: &ScoredSelection, candidates: &[Candidate]) -> Self {
        ResultRecord {
            id: selection.question_id.clone(),
            method: selection.method,
            selected_text: candidates[selection.selected_index].text.clone(),
            selected_index: selection.selected_index,
            score: Score(selection.score),
            per_candidate_scores: selection
                .per_candidate_scores
                .as_ref()
                .map(|v| v.iter().copied().map(Score).collect()),
            n_candidates_after_dedup: candidates.len(),
        }
    }
}

/// Ground-truth correctness of one answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorrectnessLabel {
    pub id: String,
    pub answer_text: String,
    pub label: u8,
}

/// Accuracy, Calibration-AUC and Selective-AUC for one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: Method,
    pub accuracy: f64,
    /// `None` when all selections share one correctness value.
    pub calibration_auc: Option<f64>,
    pub selective_auc: f64,
    #[serde(skip)]
    pub curve: Vec<CurvePoint>,
}

/// One point of the selective generation curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub abstention_rate: f64,
    pub accuracy: f64,
}

pub(crate) fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(value);
    }
    Ok(out)
}

pub(crate) fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, item)?;
        buf.push(b'\n');
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRecord>> {
    read_jsonl(path)
}

pub fn write_results(path: &Path, results: &[ResultRecord]) -> Result<()> {
    write_jsonl(path, results)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn normalization_rule() {
        assert_eq!(normalize_text("  Paris \t is\n\nnice "), "paris is nice");
        assert_eq!(normalize_text("paris "), normalize_text("Paris"));
    }

    #[test]
    fn dataset_rejects_duplicate_and_empty_ids() {
        let dup = vec![QuestionRecord::new("q1", "a?"), QuestionRecord::new("q1", "b?")];
        assert!(Dataset::new(dup).is_err());
        assert!(Dataset::new(vec![QuestionRecord::new("", "a?")]).is_err());
        assert!(Dataset::new(vec![QuestionRecord::new("q", "")]).is_err());
    }

    #[test]
    fn candidate_rejects_positive_logprob() {
        assert!(Candidate::new("x", vec![-0.1, 0.2]).is_err());
        assert!(Candidate::new("x", vec![0.0]).is_ok());
    }

    #[test]
    fn distribution_invariants() {
        assert!(ChoiceDistribution::new(vec![0.5, 0.6], false).is_err());
        let d = ChoiceDistribution::new(vec![0.2, 0.3, 0.5], true).unwrap();
        assert_eq!(d.nota_index(), Some(2));
        assert_eq!(d.answer_probs(), &[0.2, 0.3]);
        assert_eq!(d.labels()[2].to_string(), "C");
    }

    #[test]
    fn labels_round_trip() {
        for i in 0..26 {
            let l = ChoiceLabel::from_index(i).unwrap();
            assert_eq!(l.index(), i);
            assert_eq!(l.to_string().parse::<ChoiceLabel>().unwrap(), l);
        }
        assert!(ChoiceLabel::from_index(26).is_none());
    }

    #[test]
    fn method_names_parse() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{m}\""));
        }
        assert!("bogus".parse::<Method>().is_err());
    }

    #[test]
    fn infinite_scores_serialize_as_strings() {
        let s = serde_json::to_string(&Score(f64::NEG_INFINITY)).unwrap();
        assert_eq!(s, "\"-inf\"");
        let back: Score = serde_json::from_str(&s).unwrap();
        assert_eq!(back.0, f64::NEG_INFINITY);
        assert!(serde_json::to_string(&Score(f64::NAN)).is_err());
    }

    #[test]
    fn dataset_jsonl_reference_optional() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        std::fs::write(
            &path,
            "{\"id\":\"a\",\"question\":\"Q1\"}\n{\"id\":\"b\",\"question\":\"Q2\",\"reference\":\"doc\"}\n",
        )
        .unwrap();
        let d = Dataset::load_jsonl(&path).unwrap();
        assert_eq!(d.records()[0].reference, None);
        assert_eq!(d.records()[1].reference.as_deref(), Some("doc"));
        std::fs::write(&path, "{\"id\":\"a\"}\n").unwrap();
        match Dataset::load_jsonl(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    fn score_strategy() -> impl Strategy<Value = f64> {
        prop_oneof![
            8 => -1e6f64..1e6,
            1 => Just(f64::NEG_INFINITY),
            1 => Just(0.0),
        ]
    }

    proptest! {
        #[test]
        fn result_record_round_trips(
            id in "[a-z0-9]{1,8}",
            text in "\\PC{0,20}",
            idx in 0usize..5,
            score in score_strategy(),
            per in proptest::option::of(proptest::collection::vec(score_strategy(), 0..5)),
            n in 1usize..6,
            m in 0usize..8,
        ) {
            let record = ResultRecord {
                id,
                method: Method::ALL[m],
                selected_text: text,
                selected_index: idx,
                score: Score(score),
                per_candidate_scores: per.map(|v| v.into_iter().map(Score).collect()),
                n_candidates_after_dedup: n,
            };
            let line = serde_json::to_string(&record).unwrap();
            let back: ResultRecord = serde_json::from_str(&line).unwrap();
            prop_assert_eq!(back, record);
        }

        #[test]
        fn question_record_round_trips(
            id in "[a-z0-9]{1,8}",
            question in "\\PC{1,30}",
            reference in proptest::option::of("\\PC{0,30}"),
        ) {
            let record = QuestionRecord { id, question, reference };
            let back: QuestionRecord =
                serde_json::from_str(&serde_json::to_string(&record).unwrap()).unwrap();
            prop_assert_eq!(back, record);
        }
    }
}
