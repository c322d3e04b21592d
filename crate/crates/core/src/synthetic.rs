//! Seeded synthetic worlds: a dataset, a mock fixture answering every prompt
//! the pipeline will issue for it, and correctness labels for every answer.
//!
//! Each question has a hidden success rate `q ~ U(0, 1)`; each distinct
//! answer is correct with probability `q`. Pointwise Yes-logits and letter
//! logits can be tied to correctness independently, and a position prior can
//! be added to the first letter.

use std::collections::{BTreeSet, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backend::{Fixture, MockBackend};
use crate::error::{Error, Result};
use crate::pipeline::{dedup, DebiasMode, Pipeline, PipelineConfig, NO_TOKEN, YES_TOKEN};
use crate::prompts::{render_critique, render_multichoice, render_pointwise, render_revise, render_sample, TemplateSet};
use crate::types::{normalize_text, Candidate, CorrectnessLabel, Dataset, Method, QuestionRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticParams {
    pub seed: u64,
    pub n_questions: usize,
    /// Distinct answers available per question; samples draw from these.
    pub answers_per_question: usize,
    /// Pointwise Yes-logit shift for correct (+) versus wrong (-) answers.
    pub yes_signal: f64,
    /// Letter-logit bonus for correct answers.
    pub letter_signal: f64,
    /// Letter-logit bonus for whatever sits in position A.
    pub position_bias: f64,
    pub nota_logit: f64,
    /// Standard deviation of the Gaussian noise on every logit.
    pub noise: f64,
    /// Fraction of revisions that reproduce the original text.
    pub revision_keep_rate: f64,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        SyntheticParams {
            seed: 0,
            n_questions: 12,
            answers_per_question: 3,
            yes_signal: 1.5,
            letter_signal: 1.0,
            position_bias: 0.0,
            nota_logit: -1.0,
            noise: 1.0,
            revision_keep_rate: 0.5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    pub dataset: Dataset,
    pub fixture: Fixture,
    pub labels: Vec<CorrectnessLabel>,
}

struct Answer {
    text: String,
    correct: bool,
    affinity: f64,
    yes_logit: f64,
    yes_with_candidates: f64,
}

fn round6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| round6((l - lse).min(0.0))).collect()
}

fn token_logprobs(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let len = rng.random_range(1..=6);
    (0..len).map(|_| round6(-rng.random_range(0.01..3.0))).collect()
}

/// Builds the world for `config` and `templates`. Prompts are rendered
/// exactly as the pipeline renders them, including critique and revision
/// and the orderings required by `config.debias` and by vanilla selection.
pub fn generate(params: &SyntheticParams, config: &PipelineConfig, templates: &TemplateSet) -> Result<SyntheticWorld> {
    config.validate()?;
    if params.n_questions == 0 || params.answers_per_question == 0 {
        return Err(Error::Config("synthetic world needs questions and answers".into()));
    }
    if !(params.noise >= 0.0 && params.noise.is_finite()) {
        return Err(Error::Config(format!("invalid noise {}", params.noise)));
    }
    let noise = Normal::new(0.0, params.noise).expect("checked above");
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut fixture = Fixture::new();
    let mut labels = Vec::new();
    let mut records = Vec::new();

    let empty = MockBackend::new(Fixture::new());
    let planner = Pipeline::new(&empty, templates, config)?;
    let wants_select = config.methods.iter().any(|m| m.uses_multichoice());
    let nota_modes: BTreeSet<bool> = config
        .methods
        .iter()
        .filter(|m| m.uses_multichoice())
        .map(|m| m.includes_nota())
        .collect();

    for qi in 0..params.n_questions {
        let question = QuestionRecord::new(format!("q{qi:03}"), format!("Synthetic question number {qi}?"))
            .with_reference(format!("Synthetic source passage number {qi}."));
        let q: f64 = rng.random();
        let mut pool: Vec<Answer> = (0..params.answers_per_question)
            .map(|j| {
                let correct = rng.random::<f64>() < q;
                let sign = if correct { 1.0 } else { -1.0 };
                Answer {
                    text: format!("Answer {j} to question {qi}"),
                    correct,
                    affinity: noise.sample(&mut rng),
                    yes_logit: sign * params.yes_signal + noise.sample(&mut rng),
                    yes_with_candidates: sign * params.yes_signal + noise.sample(&mut rng),
                }
            })
            .collect();

        let sampled: Vec<Candidate> = (0..config.n_samples)
            .map(|_| {
                let j = rng.random_range(0..pool.len());
                Candidate {
                    text: pool[j].text.clone(),
                    token_logprobs: token_logprobs(&mut rng),
                }
            })
            .collect();
        let prompt = render_sample(templates.sample(), &question)?;
        fixture.add_completions(prompt, sampled.clone());
        let mut candidates = dedup(sampled)?;

        if config.critique_revise {
            let mut revised = Vec::with_capacity(candidates.len());
            for (ci, c) in candidates.iter().enumerate() {
                let critique = Candidate {
                    text: format!("Critique {ci} of the answer."),
                    token_logprobs: token_logprobs(&mut rng),
                };
                let prompt = render_critique(templates.critique(), &question, c)?;
                fixture.add_completions(prompt, vec![critique.clone()]);
                let origin = pool.iter().position(|a| a.text == c.text).expect("sampled from pool");
                let text = if rng.random::<f64>() < params.revision_keep_rate {
                    c.text.clone()
                } else {
                    format!("{} (revised)", c.text)
                };
                if !pool.iter().any(|a| a.text == text) {
                    let sign = if pool[origin].correct { 1.0 } else { -1.0 };
                    pool.push(Answer {
                        text: text.clone(),
                        correct: pool[origin].correct,
                        affinity: noise.sample(&mut rng),
                        yes_logit: sign * params.yes_signal + noise.sample(&mut rng),
                        yes_with_candidates: sign * params.yes_signal + noise.sample(&mut rng),
                    });
                }
                let revision = Candidate {
                    text,
                    token_logprobs: token_logprobs(&mut rng),
                };
                let prompt = render_revise(templates.revise(), &question, c, &critique.text)?;
                fixture.add_completions(prompt, vec![revision.clone()]);
                revised.push(revision);
            }
            candidates = dedup(revised)?;
        }

        let by_text: HashMap<String, &Answer> = pool.iter().map(|a| (normalize_text(&a.text), a)).collect();
        let answers: Vec<&Answer> = candidates
            .iter()
            .map(|c| by_text[&normalize_text(&c.text)])
            .collect();

        for (i, c) in candidates.iter().enumerate() {
            let pointwise = render_pointwise(templates.pointwise(), &question, c, None)?;
            let p = answers[i].yes_logit;
            fixture.add_logprobs(pointwise, [(YES_TOKEN, round6(log_sigmoid(p))), (NO_TOKEN, round6(log_sigmoid(-p)))]);
            if config.methods.contains(&Method::SampleEvalCand) {
                let others: Vec<Candidate> = candidates
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != i)
                    .map(|(_, c)| c.clone())
                    .collect();
                let prompt = render_pointwise(templates.pointwise_with_candidates(), &question, c, Some(&others))?;
                let p = answers[i].yes_with_candidates;
                fixture.add_logprobs(prompt, [(YES_TOKEN, round6(log_sigmoid(p))), (NO_TOKEN, round6(log_sigmoid(-p)))]);
            }
        }

        if wants_select {
            let mut orderings = vec![(0..candidates.len()).collect::<Vec<_>>()];
            if config.debias != DebiasMode::Off {
                if let Ok(perms) = planner.permutations(&question, candidates.len(), config.debias) {
                    orderings.extend(perms);
                }
            }
            for &include_nota in &nota_modes {
                for order in &orderings {
                    let ordered: Vec<Candidate> = order.iter().map(|&i| candidates[i].clone()).collect();
                    let (prompt, letters) = render_multichoice(templates.multichoice(), &question, &ordered, include_nota)?;
                    let mut logits: Vec<f64> = order
                        .iter()
                        .map(|&i| answers[i].affinity + params.letter_signal * f64::from(u8::from(answers[i].correct)))
                        .collect();
                    logits[0] += params.position_bias;
                    if include_nota {
                        logits.push(params.nota_logit);
                    }
                    let lps = log_softmax(&logits);
                    let names: Vec<String> = letters.iter().map(|l| l.as_string()).collect();
                    fixture.add_logprobs(prompt, names.iter().map(String::as_str).zip(lps));
                }
            }
        }

        for a in &pool {
            labels.push(CorrectnessLabel {
                id: question.id.clone(),
                answer_text: a.text.clone(),
                label: u8::from(a.correct),
            });
        }
        records.push(question);
    }

    Ok(SyntheticWorld {
        dataset: Dataset::new(records)?,
        fixture,
        labels,
    })
}
