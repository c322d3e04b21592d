//! Language model backends: sampling completions with token logprobs and
//! querying next-token logprobs for specific target tokens.

mod http;
mod mock;

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::Candidate;

pub use http::{BackendRequestPolicy, HttpBackend, HttpConfig, DEFAULT_API_KEY_ENV};
pub use mock::{Fixture, FixtureEntry, MockBackend};

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("{context}: transport failure after {attempts} attempt(s): {message}")]
    Transport {
        context: String,
        attempts: u32,
        message: String,
    },

    #[error("{context}: HTTP status {status}: {body}")]
    Status {
        context: String,
        status: u16,
        body: String,
    },

    #[error("backend lacks logprob support")]
    MissingLogprobs,

    #[error("no scorable targets among {0:?}")]
    NoScorableTargets(Vec<String>),

    #[error("mock fixture has no entry for prompt {0:?}")]
    UnknownPrompt(String),

    #[error("mock fixture has {available} completion(s) for the prompt, {requested} requested")]
    NotEnoughCompletions { available: usize, requested: usize },

    #[error("invalid request: {0}")]
    InvalidRequest(String),

    #[error("malformed response: {0}")]
    Malformed(String),

    #[error("invalid backend configuration: {0}")]
    Config(String),
}

/// A language model that can sample completions and score next tokens.
///
/// Implementations must tolerate up to [`Backend::max_in_flight`] concurrent
/// calls; callers are responsible for staying under that bound.
pub trait Backend: Send + Sync {
    /// Samples `n` completions, one request per completion.
    fn sample(&self, prompt: &str, n: usize, temperature: f64) -> Result<Vec<Candidate>, BackendError>;

    /// Log-probability of each target at the next position, resolved over the
    /// backend's token variant set.
    fn next_token_logprobs(&self, prompt: &str, targets: &[&str]) -> Result<TokenQueryResult, BackendError>;

    fn max_in_flight(&self) -> usize {
        1
    }
}

impl<B: Backend + ?Sized> Backend for Arc<B> {
    fn sample(&self, prompt: &str, n: usize, temperature: f64) -> Result<Vec<Candidate>, BackendError> {
        (**self).sample(prompt, n, temperature)
    }

    fn next_token_logprobs(&self, prompt: &str, targets: &[&str]) -> Result<TokenQueryResult, BackendError> {
        (**self).next_token_logprobs(prompt, targets)
    }

    fn max_in_flight(&self) -> usize {
        (**self).max_in_flight()
    }
}

impl<B: Backend + ?Sized> Backend for Box<B> {
    fn sample(&self, prompt: &str, n: usize, temperature: f64) -> Result<Vec<Candidate>, BackendError> {
        (**self).sample(prompt, n, temperature)
    }

    fn next_token_logprobs(&self, prompt: &str, targets: &[&str]) -> Result<TokenQueryResult, BackendError> {
        (**self).next_token_logprobs(prompt, targets)
    }

    fn max_in_flight(&self) -> usize {
        (**self).max_in_flight()
    }
}

/// Per-target logprobs; `None` marks a target the backend did not report.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenQueryResult {
    entries: Vec<(String, Option<f64>)>,
}

impl TokenQueryResult {
    pub fn new(entries: Vec<(String, Option<f64>)>) -> Result<Self, BackendError> {
        for (token, lp) in &entries {
            if let Some(v) = lp {
                if !v.is_finite() || *v > 0.0 {
                    return Err(BackendError::Malformed(format!(
                        "logprob {v} for token {token:?}"
                    )));
                }
            }
        }
        Ok(TokenQueryResult { entries })
    }

    pub fn get(&self, target: &str) -> Option<f64> {
        self.entries
            .iter()
            .find(|(t, _)| t == target)
            .and_then(|(_, lp)| *lp)
    }

    pub fn entries(&self) -> &[(String, Option<f64>)] {
        &self.entries
    }

    pub fn is_available(&self, target: &str) -> bool {
        self.get(target).is_some()
    }
}

/// Token spellings that count as the same target, e.g. `A` and ` A`.
/// Each pattern has `{token}` replaced by the target.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VariantSet(Vec<String>);

impl VariantSet {
    pub fn new(patterns: Vec<String>) -> Result<Self, BackendError> {
        if patterns.is_empty() || patterns.iter().any(|p| !p.contains("{token}")) {
            return Err(BackendError::Config(
                "variant patterns must be nonempty and contain {token}".into(),
            ));
        }
        Ok(VariantSet(patterns))
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        VariantSet::new(self.0.clone()).map(|_| ())
    }

    pub fn spellings(&self, target: &str) -> Vec<String> {
        self.0.iter().map(|p| p.replace("{token}", target)).collect()
    }
}

impl Default for VariantSet {
    fn default() -> Self {
        VariantSet(vec!["{token}".into(), " {token}".into()])
    }
}

/// Resolves each target to the maximum logprob over its spellings found in
/// `reported`. Fails when no target is available at all.
pub fn resolve_targets(
    reported: &HashMap<String, f64>,
    targets: &[&str],
    variants: &VariantSet,
) -> Result<TokenQueryResult, BackendError> {
    if targets.is_empty() {
        return Err(BackendError::InvalidRequest("empty target list".into()));
    }
    let entries: Vec<(String, Option<f64>)> = targets
        .iter()
        .map(|t| {
            let best = variants
                .spellings(t)
                .iter()
                .filter_map(|s| reported.get(s).copied())
                .reduce(f64::max);
            (t.to_string(), best)
        })
        .collect();
    if entries.iter().all(|(_, lp)| lp.is_none()) {
        return Err(BackendError::NoScorableTargets(
            targets.iter().map(|t| t.to_string()).collect(),
        ));
    }
    TokenQueryResult::new(entries)
}

pub(crate) fn check_sample_args(n: usize, temperature: f64) -> Result<(), BackendError> {
    if n == 0 {
        return Err(BackendError::InvalidRequest("n must be at least 1".into()));
    }
    if !(temperature >= 0.0 && temperature.is_finite()) {
        return Err(BackendError::InvalidRequest(format!(
            "temperature must be finite and >= 0, got {temperature}"
        )));
    }
    Ok(())
}

/// Opens a backend from a `mock:<fixture-path>` or `http:<config-path>` spec.
pub fn open_backend(spec: &str) -> Result<Box<dyn Backend>, BackendError> {
    match spec.split_once(':') {
        Some(("mock", path)) => Ok(Box::new(MockBackend::from_path(Path::new(path))?)),
        Some(("http", path)) => {
            let config = HttpConfig::from_path(Path::new(path))?;
            Ok(Box::new(HttpBackend::new(config)?))
        }
        _ => Err(BackendError::Config(format!(
            "backend spec {spec:?} must be mock:<fixture-path> or http:<config-path>"
        ))),
    }
}
