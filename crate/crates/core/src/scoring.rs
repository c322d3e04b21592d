//! Confidence score functions over token-level backend outputs.

use crate::error::{Error, Result};
use crate::types::{Candidate, ChoiceDistribution};

/// Renormalized probability of the "Yes" token against "No".
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct EvalProbability(f64);

impl EvalProbability {
    pub fn new(p_yes: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p_yes) {
            return Err(Error::OutOfRange(format!("p_yes {p_yes}")));
        }
        Ok(EvalProbability(p_yes))
    }

    pub fn p_yes(self) -> f64 {
        self.0
    }
}

/// Sum of token log-probabilities.
pub fn sequence_log_likelihood(candidate: &Candidate) -> Result<f64> {
    if candidate.token_logprobs.is_empty() {
        return Err(Error::EmptyCandidate);
    }
    Ok(candidate.token_logprobs.iter().sum())
}

/// Mean token log-probability.
pub fn length_normalized_log_likelihood(candidate: &Candidate) -> Result<f64> {
    let total = sequence_log_likelihood(candidate)?;
    Ok(total / candidate.token_count() as f64)
}

/// Max-shifted softmax. Entries of `-inf` get probability zero; at least one
/// entry must be finite.
pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    debug_assert!(max.is_finite());
    let exps: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Softmax over exactly the provided choice labels, in label order `A, B, ...`.
/// With `nota_present`, the final entry is the NOTA option.
pub fn choice_distribution(letter_logprobs: &[f64], nota_present: bool) -> Result<ChoiceDistribution> {
    if letter_logprobs.len() < 2 {
        return Err(Error::TooFewLabels(letter_logprobs.len()));
    }
    if let Some(bad) = letter_logprobs.iter().find(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("letter logprob {bad}")));
    }
    ChoiceDistribution::new(softmax(letter_logprobs), nota_present)
}

/// Like [`choice_distribution`], but `None` entries (omitted by a truncated
/// top-k response) receive probability zero. A single label yields certainty.
pub fn choice_distribution_with_gaps(
    letter_logprobs: &[Option<f64>],
    nota_present: bool,
) -> Result<ChoiceDistribution> {
    if letter_logprobs.is_empty() {
        return Err(Error::TooFewLabels(0));
    }
    if let Some(bad) = letter_logprobs.iter().flatten().find(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("letter logprob {bad}")));
    }
    if letter_logprobs.iter().all(Option::is_none) {
        return Err(Error::EmptyInput("no available letter logprobs"));
    }
    let logits: Vec<f64> = letter_logprobs
        .iter()
        .map(|x| x.unwrap_or(f64::NEG_INFINITY))
        .collect();
    ChoiceDistribution::new(softmax(&logits), nota_present)
}

/// Argmax over non-NOTA entries; lowest index wins ties.
pub fn select_answer(dist: &ChoiceDistribution) -> Result<usize> {
    let answers = dist.answer_probs();
    if answers.is_empty() {
        return Err(Error::AllNota);
    }
    let mut best = 0;
    for (i, &p) in answers.iter().enumerate().skip(1) {
        if p > answers[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Log of the renormalized probability of the selected label. A zero
/// probability gives negative infinity.
pub fn sample_select_score(dist: &ChoiceDistribution, selected: usize) -> Result<f64> {
    if Some(selected) == dist.nota_index() {
        return Err(Error::OutOfRange("selected index is the NOTA entry".into()));
    }
    let p = dist
        .probs()
        .get(selected)
        .ok_or_else(|| Error::OutOfRange(format!("selected index {selected}")))?;
    Ok(p.ln())
}

/// Negated NOTA probability; higher means more confident.
pub fn nota_confidence_score(dist: &ChoiceDistribution) -> Result<f64> {
    let p = dist.nota_prob().ok_or(Error::NoNota)?;
    // 0.0 - p keeps +0.0 at the boundary
    Ok(0.0 - p)
}

/// Two-way softmax of the Yes/No token logprobs.
pub fn eval_probability(yes_logprob: f64, no_logprob: f64) -> Result<EvalProbability> {
    if !yes_logprob.is_finite() || !no_logprob.is_finite() {
        return Err(Error::NonFinite(format!(
            "yes/no logprobs {yes_logprob}, {no_logprob}"
        )));
    }
    let probs = softmax(&[yes_logprob, no_logprob]);
    EvalProbability::new(probs[0])
}

/// `p_yes`, penalized by the NOTA probability when one is given.
pub fn hybrid_score(p_yes: f64, nota_prob: Option<f64>) -> Result<f64> {
    if !(0.0..=1.0).contains(&p_yes) {
        return Err(Error::OutOfRange(format!("p_yes {p_yes}")));
    }
    match nota_prob {
        None => Ok(p_yes),
        Some(p) if (0.0..=1.0).contains(&p) => Ok(p_yes - p),
        Some(p) => Err(Error::OutOfRange(format!("nota probability {p}"))),
    }
}
