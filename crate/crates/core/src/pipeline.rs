//! Per-question orchestration: sample, dedup, optionally critique and revise,
//! then score the surviving candidates under each requested method.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::Backend;
use crate::error::{Error, Result};
use crate::prompts::{
    render_critique, render_multichoice, render_pointwise, render_revise, render_sample, TemplateSet,
};
use crate::scoring::{
    choice_distribution_with_gaps, eval_probability, hybrid_score, length_normalized_log_likelihood,
    nota_confidence_score, sample_select_score, select_answer, sequence_log_likelihood,
    EvalProbability,
};
use crate::types::{Candidate, ChoiceDistribution, Dataset, Method, QuestionRecord, ResultRecord, ScoredSelection};

/// Hard ceiling on candidates for exhaustive permutation (6! = 720 renders).
pub const MAX_FULL_PERMUTATION_CANDIDATES: usize = 6;

pub const YES_TOKEN: &str = "Yes";
pub const NO_TOKEN: &str = "No";

/// Renormalized Yes probability at the next position of `prompt`.
pub fn query_p_yes(backend: &dyn Backend, prompt: &str) -> Result<EvalProbability> {
    let reported = backend.next_token_logprobs(prompt, &[YES_TOKEN, NO_TOKEN])?;
    match (reported.get(YES_TOKEN), reported.get(NO_TOKEN)) {
        (Some(yes), Some(no)) => eval_probability(yes, no),
        _ => Err(Error::TokensUnavailable(format!(
            "need both {YES_TOKEN:?} and {NO_TOKEN:?}"
        ))),
    }
}

/// How multiple-choice scores are corrected for position bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DebiasMode {
    #[default]
    Off,
    /// Average over every ordering of the candidates.
    FullPermutations,
    /// Average over the identity plus `k - 1` seeded uniform shuffles.
    SampledK(usize),
}

impl FromStr for DebiasMode {
    type Err = Error;

    /// Accepts `off`, `full` and `sampled:<k>`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(DebiasMode::Off),
            "full" | "full_permutations" => Ok(DebiasMode::FullPermutations),
            other => match other.strip_prefix("sampled:") {
                Some(k) => k
                    .parse()
                    .map(DebiasMode::SampledK)
                    .map_err(|_| Error::Config(format!("invalid sample count in {other:?}"))),
                None => Err(Error::Config(format!(
                    "unknown debias mode {other:?} (use off, full or sampled:<k>)"
                ))),
            },
        }
    }
}

impl fmt::Display for DebiasMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DebiasMode::Off => f.write_str("off"),
            DebiasMode::FullPermutations => f.write_str("full"),
            DebiasMode::SampledK(k) => write!(f, "sampled:{k}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub methods: BTreeSet<Method>,
    pub n_samples: usize,
    pub temperature: f64,
    pub critique_revise: bool,
    pub debias: DebiasMode,
    /// Maximum renders per selection in full-permutation mode.
    pub permutation_budget: usize,
    pub random_seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            methods: Method::ALL.into_iter().collect(),
            n_samples: 4,
            temperature: 1.0,
            critique_revise: false,
            debias: DebiasMode::Off,
            permutation_budget: 24,
            random_seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::Config("no methods requested".into()));
        }
        if self.n_samples == 0 {
            return Err(Error::Config("n_samples must be at least 1".into()));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("invalid temperature {}", self.temperature)));
        }
        if self.debias == DebiasMode::SampledK(0) {
            return Err(Error::Config("sampled_k must be at least 1".into()));
        }
        if self.permutation_budget == 0 {
            return Err(Error::Config("permutation_budget must be at least 1".into()));
        }
        Ok(())
    }
}

/// Drops later candidates whose normalized text repeats an earlier one.
pub fn dedup(candidates: Vec<Candidate>) -> Result<Vec<Candidate>> {
    if candidates.is_empty() {
        return Err(Error::NoCandidates);
    }
    let mut seen = HashSet::new();
    Ok(candidates
        .into_iter()
        .filter(|c| seen.insert(c.normalized_text()))
        .collect())
}

pub(crate) fn factorial(n: usize) -> usize {
    (1..=n).product()
}

/// Advances `perm` to the next lexicographic permutation; false at the last.
pub(crate) fn next_permutation(perm: &mut [usize]) -> bool {
    let Some(i) = perm.windows(2).rposition(|w| w[0] < w[1]) else {
        return false;
    };
    let j = perm.iter().rposition(|&x| x > perm[i]).expect("exists past pivot");
    perm.swap(i, j);
    perm[i + 1..].reverse();
    true
}

/// 64-bit FNV-1a of the question id, mixed into the run seed.
fn question_seed(seed: u64, id: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in id.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x100000001b3);
    }
    seed ^ h
}

/// Result of scoring one question under every configured method.
#[derive(Debug, Clone)]
pub struct QuestionOutcome {
    pub candidates: Vec<Candidate>,
    pub selections: Vec<ScoredSelection>,
}

impl QuestionOutcome {
    pub fn records(&self) -> Vec<ResultRecord> {
        self.selections
            .iter()
            .map(|s| ResultRecord::from_selection(s, &self.candidates))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionFailure {
    pub id: String,
    pub error: String,
}

/// Outputs of a dataset run, in dataset order.
#[derive(Debug, Clone, Default)]
pub struct RunOutput {
    pub records: Vec<ResultRecord>,
    pub failures: Vec<QuestionFailure>,
}

pub struct Pipeline<'a> {
    backend: &'a dyn Backend,
    templates: &'a TemplateSet,
    config: &'a PipelineConfig,
}

impl<'a> Pipeline<'a> {
    pub fn new(backend: &'a dyn Backend, templates: &'a TemplateSet, config: &'a PipelineConfig) -> Result<Self> {
        config.validate()?;
        Ok(Pipeline {
            backend,
            templates,
            config,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        self.config
    }

    /// Samples `n_samples` answers and dedups them, then runs critique and
    /// revision (deduping again) when configured.
    pub fn sample_candidates(&self, question: &QuestionRecord) -> Result<Vec<Candidate>> {
        let prompt = render_sample(self.templates.sample(), question)?;
        let sampled = self
            .backend
            .sample(&prompt, self.config.n_samples, self.config.temperature)?;
        let candidates = dedup(sampled)?;
        if self.config.critique_revise {
            dedup(self.critique_revise(question, &candidates)?)
        } else {
            Ok(candidates)
        }
    }

    /// One critique and one revision per candidate; the revisions replace
    /// the originals one for one.
    pub fn critique_revise(&self, question: &QuestionRecord, candidates: &[Candidate]) -> Result<Vec<Candidate>> {
        if candidates.is_empty() {
            return Err(Error::NoCandidates);
        }
        let temperature = self.config.temperature;
        candidates
            .iter()
            .map(|c| {
                let prompt = render_critique(self.templates.critique(), question, c)?;
                let critique = self.first_sample(&prompt, temperature)?;
                let prompt = render_revise(self.templates.revise(), question, c, &critique.text)?;
                self.first_sample(&prompt, temperature)
            })
            .collect()
    }

    fn first_sample(&self, prompt: &str, temperature: f64) -> Result<Candidate> {
        let mut out = self.backend.sample(prompt, 1, temperature)?;
        if out.is_empty() {
            return Err(Error::NoCandidates);
        }
        Ok(out.swap_remove(0))
    }

    /// Renders one multiple-choice prompt in the given order and returns the
    /// label distribution plus the raw letter logprobs.
    fn query_choices(
        &self,
        question: &QuestionRecord,
        ordered: &[Candidate],
        include_nota: bool,
    ) -> Result<(ChoiceDistribution, Vec<Option<f64>>)> {
        let (prompt, labels) = render_multichoice(self.templates.multichoice(), question, ordered, include_nota)?;
        let targets: Vec<String> = labels.iter().map(|l| l.as_string()).collect();
        let target_refs: Vec<&str> = targets.iter().map(String::as_str).collect();
        let reported = self.backend.next_token_logprobs(&prompt, &target_refs)?;
        let raw: Vec<Option<f64>> = targets.iter().map(|t| reported.get(t)).collect();
        if include_nota && raw.last().copied().flatten().is_none() {
            return Err(Error::NotaUnavailable);
        }
        let dist = choice_distribution_with_gaps(&raw, include_nota)?;
        Ok((dist, raw))
    }

    pub(crate) fn permutations(&self, question: &QuestionRecord, n: usize, mode: DebiasMode) -> Result<Vec<Vec<usize>>> {
        let identity: Vec<usize> = (0..n).collect();
        match mode {
            DebiasMode::Off => Ok(vec![identity]),
            DebiasMode::FullPermutations => {
                let renders = factorial(n.min(20));
                let budget = self
                    .config
                    .permutation_budget
                    .min(factorial(MAX_FULL_PERMUTATION_CANDIDATES));
                if renders > budget {
                    return Err(Error::PermutationBudget {
                        candidates: n,
                        renders,
                        budget,
                    });
                }
                let mut perm = identity;
                let mut all = vec![perm.clone()];
                while next_permutation(&mut perm) {
                    all.push(perm.clone());
                }
                Ok(all)
            }
            DebiasMode::SampledK(k) => {
                if k == 0 {
                    return Err(Error::Config("sampled_k must be at least 1".into()));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(question_seed(self.config.random_seed, &question.id));
                let mut all = vec![identity.clone()];
                for _ in 1..k {
                    let mut p = identity.clone();
                    p.shuffle(&mut rng);
                    all.push(p);
                }
                Ok(all)
            }
        }
    }

    /// Shuffle-and-average selection distribution. Each ordering is rendered,
    /// letter probabilities are mapped back to their candidates and averaged,
    /// and the means are renormalized. NOTA stays last in every ordering.
    pub fn debias_select(
        &self,
        question: &QuestionRecord,
        candidates: &[Candidate],
        include_nota: bool,
        mode: DebiasMode,
    ) -> Result<ChoiceDistribution> {
        Ok(self.debias_with_raw(question, candidates, include_nota, mode)?.0)
    }

    fn debias_with_raw(
        &self,
        question: &QuestionRecord,
        candidates: &[Candidate],
        include_nota: bool,
        mode: DebiasMode,
    ) -> Result<(ChoiceDistribution, Vec<f64>)> {
        if candidates.is_empty() {
            return Err(Error::NoCandidates);
        }
        let n = candidates.len();
        let perms = self.permutations(question, n, mode)?;
        if perms.len() == 1 && perms[0].iter().enumerate().all(|(i, &p)| i == p) {
            let (dist, raw) = self.query_choices(question, candidates, include_nota)?;
            let per_candidate = raw[..n].iter().map(|x| x.unwrap_or(f64::NEG_INFINITY)).collect();
            return Ok((dist, per_candidate));
        }
        let mut sums = vec![0.0; n + usize::from(include_nota)];
        for perm in &perms {
            let ordered: Vec<Candidate> = perm.iter().map(|&i| candidates[i].clone()).collect();
            let (dist, _) = self.query_choices(question, &ordered, include_nota)?;
            for (pos, &src) in perm.iter().enumerate() {
                sums[src] += dist.probs()[pos];
            }
            if let Some(p) = dist.nota_prob() {
                sums[n] += p;
            }
        }
        let count = perms.len() as f64;
        let means: Vec<f64> = sums.iter().map(|s| s / count).collect();
        let total: f64 = means.iter().sum();
        let probs: Vec<f64> = means.iter().map(|m| m / total).collect();
        let per_candidate = probs[..n].iter().map(|p| p.ln()).collect();
        Ok((ChoiceDistribution::new(probs, include_nota)?, per_candidate))
    }

    fn selection(
        &self,
        question: &QuestionRecord,
        candidates: &[Candidate],
        include_nota: bool,
    ) -> Result<(ChoiceDistribution, Vec<f64>)> {
        self.debias_with_raw(question, candidates, include_nota, self.config.debias)
    }

    fn p_yes(&self, prompt: &str) -> Result<EvalProbability> {
        query_p_yes(self.backend, prompt)
    }

    pub fn run_sample_and_select(
        &self,
        question: &QuestionRecord,
        candidates: &[Candidate],
        include_nota: bool,
    ) -> Result<ScoredSelection> {
        let (dist, per_candidate) = self.selection(question, candidates, include_nota)?;
        let selected = select_answer(&dist)?;
        let score = if include_nota {
            nota_confidence_score(&dist)?
        } else {
            sample_select_score(&dist, selected)?
        };
        Ok(ScoredSelection {
            question_id: question.id.clone(),
            method: if include_nota { Method::SampleSelectNota } else { Method::SampleSelect },
            selected_index: selected,
            score,
            per_candidate_scores: Some(per_candidate),
        })
    }

    pub fn run_sample_and_eval(
        &self,
        question: &QuestionRecord,
        candidates: &[Candidate],
        with_candidates: bool,
    ) -> Result<ScoredSelection> {
        if candidates.is_empty() {
            return Err(Error::NoCandidates);
        }
        let mut scores = Vec::with_capacity(candidates.len());
        for (i, candidate) in candidates.iter().enumerate() {
            let prompt = if with_candidates {
                let others: Vec<Candidate> = candidates
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != i)
                    .map(|(_, c)| c.clone())
                    .collect();
                render_pointwise(self.templates.pointwise_with_candidates(), question, candidate, Some(&others))?
            } else {
                render_pointwise(self.templates.pointwise(), question, candidate, None)?
            };
            scores.push(self.p_yes(&prompt)?.p_yes());
        }
        let selected = argmax_first(&scores);
        Ok(ScoredSelection {
            question_id: question.id.clone(),
            method: if with_candidates { Method::SampleEvalCand } else { Method::SampleEval },
            selected_index: selected,
            score: scores[selected],
            per_candidate_scores: Some(scores),
        })
    }

    /// Select with the multiple-choice prompt (never the NOTA entry), then
    /// score only the selected answer pointwise, subtracting the NOTA
    /// probability when NOTA is included.
    pub fn run_hybrid(
        &self,
        question: &QuestionRecord,
        candidates: &[Candidate],
        include_nota: bool,
    ) -> Result<ScoredSelection> {
        let (dist, _) = self.selection(question, candidates, include_nota)?;
        let selected = select_answer(&dist)?;
        let nota_prob = dist.nota_prob();
        let prompt = render_pointwise(self.templates.pointwise(), question, &candidates[selected], None)?;
        let p_yes = self.p_yes(&prompt)?.p_yes();
        Ok(ScoredSelection {
            question_id: question.id.clone(),
            method: if include_nota { Method::HybridNota } else { Method::Hybrid },
            selected_index: selected,
            score: hybrid_score(p_yes, nota_prob)?,
            per_candidate_scores: Some(dist.answer_probs().to_vec()),
        })
    }

    pub fn run_sequence_scores(
        &self,
        question: &QuestionRecord,
        candidates: &[Candidate],
        normalized: bool,
    ) -> Result<ScoredSelection> {
        if candidates.is_empty() {
            return Err(Error::NoCandidates);
        }
        let scores = candidates
            .iter()
            .map(|c| {
                if normalized {
                    length_normalized_log_likelihood(c)
                } else {
                    sequence_log_likelihood(c)
                }
            })
            .collect::<Result<Vec<f64>>>()?;
        let selected = argmax_first(&scores);
        Ok(ScoredSelection {
            question_id: question.id.clone(),
            method: if normalized { Method::LenNormSeqLik } else { Method::SeqLik },
            selected_index: selected,
            score: scores[selected],
            per_candidate_scores: Some(scores),
        })
    }

    pub fn run_method(&self, method: Method, question: &QuestionRecord, candidates: &[Candidate]) -> Result<ScoredSelection> {
        match method {
            Method::SeqLik => self.run_sequence_scores(question, candidates, false),
            Method::LenNormSeqLik => self.run_sequence_scores(question, candidates, true),
            Method::SampleSelect => self.run_sample_and_select(question, candidates, false),
            Method::SampleSelectNota => self.run_sample_and_select(question, candidates, true),
            Method::SampleEval => self.run_sample_and_eval(question, candidates, false),
            Method::SampleEvalCand => self.run_sample_and_eval(question, candidates, true),
            Method::Hybrid => self.run_hybrid(question, candidates, false),
            Method::HybridNota => self.run_hybrid(question, candidates, true),
        }
    }

    /// Samples candidates and runs every configured method, in method order.
    pub fn evaluate_question(&self, question: &QuestionRecord) -> Result<QuestionOutcome> {
        let candidates = self.sample_candidates(question)?;
        let selections = self
            .config
            .methods
            .iter()
            .map(|&m| self.run_method(m, question, &candidates))
            .collect::<Result<Vec<_>>>()?;
        Ok(QuestionOutcome {
            candidates,
            selections,
        })
    }

    /// Evaluates every question with at most `backend.max_in_flight()`
    /// questions in progress. A question with any failing method is reported
    /// as a failure and contributes no records.
    pub fn run_dataset(&self, dataset: &Dataset) -> RunOutput {
        self.map_questions(dataset, |q| self.evaluate_question(q).map(|o| o.records()))
    }

    /// Applies `work` to every question with bounded parallelism and collects
    /// the outputs in dataset order.
    pub fn map_questions<F>(&self, dataset: &Dataset, work: F) -> RunOutput
    where
        F: Fn(&QuestionRecord) -> Result<Vec<ResultRecord>> + Sync,
    {
        let questions = dataset.records();
        let workers = self.backend.max_in_flight().clamp(1, questions.len().max(1));
        let next = AtomicUsize::new(0);
        let slots: Mutex<Vec<Option<Result<Vec<ResultRecord>>>>> =
            Mutex::new((0..questions.len()).map(|_| None).collect());
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some(q) = questions.get(i) else { break };
                    let outcome = work(q);
                    slots.lock().expect("poisoned")[i] = Some(outcome);
                });
            }
        });
        let mut output = RunOutput::default();
        let slots = slots.into_inner().expect("poisoned");
        for (q, slot) in questions.iter().zip(slots) {
            match slot.expect("every question processed") {
                Ok(records) => output.records.extend(records),
                Err(e) => output.failures.push(QuestionFailure {
                    id: q.id.clone(),
                    error: e.to_string(),
                }),
            }
        }
        output
    }
}

/// Index of the maximum; the first one wins ties. `-inf` sorts below all
/// finite values.
fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{Fixture, MockBackend};
    use crate::prompts::Task;

    fn q() -> QuestionRecord {
        QuestionRecord::new("q1", "What happens if you crack your knuckles a lot?")
    }

    fn c(text: &str, lps: &[f64]) -> Candidate {
        Candidate::new(text, lps.to_vec()).unwrap()
    }

    fn texts(cands: &[Candidate]) -> Vec<&str> {
        cands.iter().map(|c| c.text.as_str()).collect()
    }

    struct Harness {
        templates: TemplateSet,
        fixture: Fixture,
    }

    impl Harness {
        fn new() -> Self {
            Harness {
                templates: TemplateSet::builtin(Task::Qa),
                fixture: Fixture::new(),
            }
        }

        fn letters(&mut self, cands: &[Candidate], nota: bool, lps: &[(&str, f64)]) {
            let (prompt, _) = render_multichoice(self.templates.multichoice(), &q(), cands, nota).unwrap();
            self.fixture.add_logprobs(prompt, lps.iter().copied());
        }

        fn yes_no(&mut self, cand: &Candidate, others: Option<&[Candidate]>, yes: f64, no: f64) {
            let t = if others.is_some() {
                self.templates.pointwise_with_candidates()
            } else {
                self.templates.pointwise()
            };
            let prompt = render_pointwise(t, &q(), cand, others).unwrap();
            self.fixture.add_logprobs(prompt, [("Yes", yes), ("No", no)]);
        }

        fn yes_prob(&mut self, cand: &Candidate, p: f64) {
            self.yes_no(cand, None, p.ln(), (1.0 - p).ln());
        }

        fn mock(&self) -> MockBackend {
            MockBackend::new(self.fixture.clone())
        }
    }

    fn softmax_oracle(xs: &[f64]) -> Vec<f64> {
        let total: f64 = xs.iter().map(|x| x.exp()).sum();
        xs.iter().map(|x| x.exp() / total).collect()
    }

    #[test]
    fn dedup_examples() {
        let out = dedup(vec![c("Paris", &[-1.0]), c("paris ", &[-2.0]), c("Rome", &[-1.0])]).unwrap();
        assert_eq!(texts(&out), ["Paris", "Rome"]);
        assert_eq!(out[0].token_logprobs, vec![-1.0]);
        let distinct = vec![c("a", &[-1.0]), c("b", &[-1.0])];
        assert_eq!(dedup(distinct.clone()).unwrap(), distinct);
        let same = vec![c("a", &[-1.0]), c("a", &[-1.0]), c("a", &[-1.0])];
        assert_eq!(texts(&dedup(same).unwrap()), ["a"]);
        assert!(dedup(vec![]).is_err());
    }

    #[test]
    fn lexicographic_permutations() {
        let mut p = vec![0, 1, 2];
        let mut seen = vec![p.clone()];
        while next_permutation(&mut p) {
            seen.push(p.clone());
        }
        assert_eq!(seen.len(), 6);
        assert_eq!(seen.last().unwrap(), &vec![2, 1, 0]);
    }

    #[test]
    fn sample_and_select_without_nota() {
        let cands = [c("a", &[-1.0]), c("b", &[-1.0]), c("c", &[-1.0])];
        let mut h = Harness::new();
        h.letters(&cands, false, &[("A", -0.2), ("B", -1.6), ("C", -2.3)]);
        let mock = h.mock();
        let config = PipelineConfig::default();
        let p = Pipeline::new(&mock, &h.templates, &config).unwrap();
        let s = p.run_sample_and_select(&q(), &cands, false).unwrap();
        assert_eq!(s.selected_index, 0);
        let oracle = softmax_oracle(&[-0.2, -1.6, -2.3])[0].ln();
        assert!((s.score - oracle).abs() < 1e-12);
        assert_eq!(s.per_candidate_scores.unwrap(), vec![-0.2, -1.6, -2.3]);
    }

    #[test]
    fn sample_and_select_with_nota() {
        let cands = [c("a", &[-1.0]), c("b", &[-1.0])];
        let mut h = Harness::new();
        // renormalized: A 0.1, B 0.2, NOTA 0.7
        h.letters(&cands, true, &[("A", 0.1f64.ln()), ("B", 0.2f64.ln()), ("C", 0.7f64.ln())]);
        let mock = h.mock();
        let config = PipelineConfig::default();
        let p = Pipeline::new(&mock, &h.templates, &config).unwrap();
        let s = p.run_sample_and_select(&q(), &cands, true).unwrap();
        assert_eq!(s.selected_index, 1);
        assert!((s.score + 0.7).abs() < 1e-12);
        assert_eq!(s.method, Method::SampleSelectNota);
    }

    #[test]
    fn single_candidate_is_certain() {
        let cands = [c("only", &[-1.0])];
        let mut h = Harness::new();
        h.letters(&cands, false, &[("A", -3.0)]);
        let mock = h.mock();
        let config = PipelineConfig::default();
        let p = Pipeline::new(&mock, &h.templates, &config).unwrap();
        let s = p.run_sample_and_select(&q(), &cands, false).unwrap();
        assert_eq!((s.selected_index, s.score), (0, 0.0));
    }

    #[test]
    fn missing_letters_and_nota() {
        let cands = [c("a", &[-1.0]), c("b", &[-1.0])];
        let mut h = Harness::new();
        h.letters(&cands, false, &[("A", -0.5)]);
        h.letters(&cands, true, &[("A", -0.5), ("B", -0.9)]);
        let mock = h.mock();
        let config = PipelineConfig::default();
        let p = Pipeline::new(&mock, &h.templates, &config).unwrap();
        let s = p.run_sample_and_select(&q(), &cands, false).unwrap();
        assert_eq!(s.selected_index, 0);
        assert_eq!(s.per_candidate_scores.unwrap()[1], f64::NEG_INFINITY);
        assert!(matches!(p.run_sample_and_select(&q(), &cands, true), Err(Error::NotaUnavailable)));

        let mut h = Harness::new();
        h.letters(&cands, false, &[("Z", -0.5)]);
        let mock = h.mock();
        let p = Pipeline::new(&mock, &h.templates, &config).unwrap();
        assert!(p.run_sample_and_select(&q(), &cands, false).is_err());
    }

    #[test]
    fn sample_and_eval_argmax_and_ties() {
        let cands = [c("a", &[-1.0]), c("b", &[-1.0]), c("c", &[-1.0])];
        let mut h = Harness::new();
        for (cand, p) in cands.iter().zip([0.3, 0.9, 0.5]) {
            h.yes_prob(cand, p);
        }
        let mock = h.mock();
        let config = PipelineConfig::default();
        let p = Pipeline::new(&mock, &h.templates, &config).unwrap();
        let s = p.run_sample_and_eval(&q(), &cands, false).unwrap();
        assert_eq!(s.selected_index, 1);
        assert!((s.score - 0.9).abs() < 1e-12);
        assert_eq!(s.per_candidate_scores.as_ref().unwrap().len(), 3);

        let tied = [c("x", &[-1.0]), c("y", &[-1.0])];
        let mut h = Harness::new();
        h.yes_prob(&tied[0], 0.5);
        h.yes_prob(&tied[1], 0.5);
        let mock = h.mock();
        let p = Pipeline::new(&mock, &h.templates, &config).unwrap();
        assert_eq!(p.run_sample_and_eval(&q(), &tied, false).unwrap().selected_index, 0);
    }

    #[test]
    fn sample_and_eval_with_candidates_lists_all_texts() {
        let cands = [c("alpha", &[-1.0]), c("beta", &[-1.0]), c("gamma", &[-1.0])];
        let mut h = Harness::new();
        for (i, cand) in cands.iter().enumerate() {
            let others: Vec<Candidate> = cands.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, c)| c.clone()).collect();
            h.yes_no(cand, Some(&others), -0.5 - i as f64, -1.0);
        }
        let mock = h.mock();
        let config = PipelineConfig::default();
        let p = Pipeline::new(&mock, &h.templates, &config).unwrap();
        let s = p.run_sample_and_eval(&q(), &cands, true).unwrap();
        assert_eq!(s.selected_index, 0);
        let prompts = mock.queried_prompts();
        assert_eq!(prompts.len(), 3);
        for prompt in prompts {
            for t in ["alpha", "beta", "gamma"] {
                assert!(prompt.contains(t));
            }
        }
    }

    #[test]
    fn hybrid_follows_selection_then_eval() {
        let cands = [c("a", &[-1.0]), c("b", &[-1.0]), c("c", &[-1.0])];
        let mut h = Harness::new();
        // renormalized: .1 .1 .5 nota .3
        h.letters(&cands, true, &[("A", 0.1f64.ln()), ("B", 0.1f64.ln()), ("C", 0.5f64.ln()), ("D", 0.3f64.ln())]);
        h.letters(&cands, false, &[("A", -2.0), ("B", -2.0), ("C", -0.1)]);
        h.yes_prob(&cands[2], 0.8);
        let mock = h.mock();
        let config = PipelineConfig::default();
        let p = Pipeline::new(&mock, &h.templates, &config).unwrap();
        let s = p.run_hybrid(&q(), &cands, true).unwrap();
        assert_eq!(s.selected_index, 2);
        assert!((s.score - 0.5).abs() < 1e-12);
        let s = p.run_hybrid(&q(), &cands, false).unwrap();
        assert!((s.score - 0.8).abs() < 1e-12);
        assert_eq!(s.method, Method::Hybrid);
    }

    #[test]
    fn hybrid_never_selects_dominant_nota() {
        let cands = [c("a", &[-1.0]), c("b", &[-1.0])];
        let mut h = Harness::new();
        h.letters(&cands, true, &[("A", 0.05f64.ln()), ("B", 0.15f64.ln()), ("C", 0.8f64.ln())]);
        h.yes_prob(&cands[1], 0.6);
        let mock = h.mock();
        let config = PipelineConfig::default();
        let p = Pipeline::new(&mock, &h.templates, &config).unwrap();
        let s = p.run_hybrid(&q(), &cands, true).unwrap();
        assert_eq!(s.selected_index, 1);
        assert!((s.score - (0.6 - 0.8)).abs() < 1e-12);
    }

    #[test]
    fn sequence_scores_and_normalization_flip() {
        let mock = MockBackend::new(Fixture::new());
        let templates = TemplateSet::builtin(Task::Qa);
        let config = PipelineConfig::default();
        let p = Pipeline::new(&mock, &templates, &config).unwrap();
        let cands = [c("a", &[-1.0, -2.0]), c("b", &[-1.0, -1.0])];
        assert_eq!(p.run_sequence_scores(&q(), &cands, false).unwrap().selected_index, 1);

        let long = c("long", &[-0.3; 10]);
        let short = c("short", &[-1.0, -1.0]);
        let cands = [long, short];
        let raw = p.run_sequence_scores(&q(), &cands, false).unwrap();
        assert_eq!(raw.selected_index, 1);
        let norm = p.run_sequence_scores(&q(), &cands, true).unwrap();
        assert_eq!(norm.selected_index, 0);
        assert!((norm.score + 0.3).abs() < 1e-12);

        assert_eq!(p.run_sequence_scores(&q(), &[c("x", &[-4.0])], false).unwrap().selected_index, 0);
        assert!(matches!(
            p.run_sequence_scores(&q(), &[Candidate { text: "e".into(), token_logprobs: vec![] }], false),
            Err(Error::EmptyCandidate)
        ));
    }

    #[test]
    fn debias_two_candidates_averages() {
        let y1 = c("y1", &[-1.0]);
        let y2 = c("y2", &[-1.0]);
        let mut h = Harness::new();
        h.letters(&[y1.clone(), y2.clone()], false, &[("A", 0.6f64.ln()), ("B", 0.4f64.ln())]);
        // reversed order: y2 first gets 0.6, y1 second 0.4
        h.letters(&[y2.clone(), y1.clone()], false, &[("A", 0.6f64.ln()), ("B", 0.4f64.ln())]);
        let mock = h.mock();
        let config = PipelineConfig::default();
        let p = Pipeline::new(&mock, &h.templates, &config).unwrap();
        let d = p.debias_select(&q(), &[y1, y2], false, DebiasMode::FullPermutations).unwrap();
        assert!((d.probs()[0] - 0.5).abs() < 1e-12);
        assert_eq!(mock.query_calls(), 2);
    }

    #[test]
    fn debias_budget_guard() {
        let cands: Vec<_> = (0..5).map(|i| c(&format!("c{i}"), &[-1.0])).collect();
        let mock = MockBackend::new(Fixture::new());
        let templates = TemplateSet::builtin(Task::Qa);
        let config = PipelineConfig::default();
        let p = Pipeline::new(&mock, &templates, &config).unwrap();
        let err = p.debias_select(&q(), &cands, false, DebiasMode::FullPermutations).unwrap_err();
        assert!(matches!(err, Error::PermutationBudget { renders: 120, .. }), "{err}");
        assert!(err.to_string().contains("sampled"));
        assert_eq!(mock.query_calls(), 0);

        let config = PipelineConfig {
            permutation_budget: 100_000,
            ..Default::default()
        };
        let p = Pipeline::new(&mock, &templates, &config).unwrap();
        let seven: Vec<_> = (0..7).map(|i| c(&format!("c{i}"), &[-1.0])).collect();
        assert!(matches!(
            p.debias_select(&q(), &seven, false, DebiasMode::FullPermutations),
            Err(Error::PermutationBudget { .. })
        ));
    }

    #[test]
    fn sampled_debias_includes_identity_and_is_seeded() {
        let mock = MockBackend::new(Fixture::new());
        let templates = TemplateSet::builtin(Task::Qa);
        let config = PipelineConfig {
            random_seed: 7,
            ..Default::default()
        };
        let p = Pipeline::new(&mock, &templates, &config).unwrap();
        let a = p.permutations(&q(), 5, DebiasMode::SampledK(6)).unwrap();
        let b = p.permutations(&q(), 5, DebiasMode::SampledK(6)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 6);
        assert_eq!(a[0], vec![0, 1, 2, 3, 4]);
        for perm in &a {
            let mut s = perm.clone();
            s.sort();
            assert_eq!(s, vec![0, 1, 2, 3, 4]);
        }
    }

    #[test]
    fn critique_revise_replaces_one_for_one() {
        let templates = TemplateSet::builtin(Task::Qa);
        let mut fixture = Fixture::new();
        let originals = [c("Nothing happens", &[-0.5]), c("You get arthritis", &[-0.7])];
        let revised = ["Nothing in particular happens", "Nothing happens, arthritis is a myth"];
        for (orig, rev) in originals.iter().zip(revised) {
            let cp = render_critique(templates.critique(), &q(), orig).unwrap();
            let critique = format!("Critique of {}", orig.text);
            fixture.add_completions(cp, vec![c(&critique, &[-0.1])]);
            let rp = render_revise(templates.revise(), &q(), orig, &critique).unwrap();
            fixture.add_completions(rp, vec![c(rev, &[-0.2, -0.3])]);
        }
        let mock = MockBackend::new(fixture);
        let config = PipelineConfig::default();
        let p = Pipeline::new(&mock, &templates, &config).unwrap();
        let out = p.critique_revise(&q(), &originals).unwrap();
        assert_eq!(texts(&out), revised);
        assert_eq!(out[1].token_logprobs, vec![-0.2, -0.3]);
        assert!(matches!(p.critique_revise(&q(), &[]), Err(Error::NoCandidates)));
    }

    #[test]
    fn revised_candidates_are_deduped() {
        let templates = TemplateSet::builtin(Task::Qa);
        let mut fixture = Fixture::new();
        let sample_prompt = render_sample(templates.sample(), &q()).unwrap();
        let originals = vec![c("one", &[-0.5]), c("two", &[-0.5])];
        fixture.add_completions(sample_prompt, originals.clone());
        for orig in &originals {
            let cp = render_critique(templates.critique(), &q(), orig).unwrap();
            fixture.add_completions(cp, vec![c("meh", &[-0.1])]);
            let rp = render_revise(templates.revise(), &q(), orig, "meh").unwrap();
            fixture.add_completions(rp, vec![c("Same answer", &[-0.2])]);
        }
        let mock = MockBackend::new(fixture);
        let config = PipelineConfig {
            n_samples: 2,
            critique_revise: true,
            ..Default::default()
        };
        let p = Pipeline::new(&mock, &templates, &config).unwrap();
        assert_eq!(texts(&p.sample_candidates(&q()).unwrap()), ["Same answer"]);
    }

    #[test]
    fn config_validation() {
        assert!(PipelineConfig { n_samples: 0, ..Default::default() }.validate().is_err());
        assert!(PipelineConfig { debias: DebiasMode::SampledK(0), ..Default::default() }.validate().is_err());
        assert!(PipelineConfig { methods: BTreeSet::new(), ..Default::default() }.validate().is_err());
        assert!(toml::from_str::<PipelineConfig>("n_sample = 3").is_err());
        let c: PipelineConfig = toml::from_str("n_samples = 3\ndebias = { sampled_k = 5 }").unwrap();
        assert_eq!(c.n_samples, 3);
        assert_eq!(c.debias, DebiasMode::SampledK(5));
    }

    #[test]
    fn debias_mode_parse() {
        assert_eq!("off".parse::<DebiasMode>().unwrap(), DebiasMode::Off);
        assert_eq!("full".parse::<DebiasMode>().unwrap(), DebiasMode::FullPermutations);
        assert_eq!("sampled:12".parse::<DebiasMode>().unwrap(), DebiasMode::SampledK(12));
        assert!("sampled:x".parse::<DebiasMode>().is_err());
        assert!("shuffle".parse::<DebiasMode>().is_err());
    }
}
