use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{check_sample_args, resolve_targets, Backend, BackendError, TokenQueryResult, VariantSet};
use crate::types::Candidate;

/// Canned responses for one exact prompt string.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FixtureEntry {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub completions: Vec<Candidate>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub next_token_logprobs: BTreeMap<String, f64>,
}

/// Exact prompt string to canned responses.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Fixture(pub BTreeMap<String, FixtureEntry>);

impl Fixture {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_path(path: &Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            BackendError::Config(format!("cannot read fixture {}: {e}", path.display()))
        })?;
        let fixture: Fixture = serde_json::from_str(&text).map_err(|e| {
            BackendError::Config(format!("invalid fixture {}: {e}", path.display()))
        })?;
        fixture.validate()?;
        Ok(fixture)
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("fixture serializes");
        text.push('\n');
        std::fs::write(path, text)
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        for (prompt, entry) in &self.0 {
            for c in &entry.completions {
                c.validate()
                    .map_err(|e| BackendError::Config(format!("prompt {prompt:?}: {e}")))?;
            }
            for (token, &lp) in &entry.next_token_logprobs {
                if !lp.is_finite() || lp > 0.0 {
                    return Err(BackendError::Config(format!(
                        "prompt {prompt:?}: logprob {lp} for token {token:?}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn entry_mut(&mut self, prompt: impl Into<String>) -> &mut FixtureEntry {
        self.0.entry(prompt.into()).or_default()
    }

    pub fn add_completions(&mut self, prompt: impl Into<String>, completions: Vec<Candidate>) {
        self.entry_mut(prompt).completions.extend(completions);
    }

    pub fn add_logprobs<'a>(
        &mut self,
        prompt: impl Into<String>,
        logprobs: impl IntoIterator<Item = (&'a str, f64)>,
    ) {
        let entry = self.entry_mut(prompt);
        for (token, lp) in logprobs {
            entry.next_token_logprobs.insert(token.to_string(), lp);
        }
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Deterministic backend answering from a [`Fixture`]. Unknown prompts are
/// errors. Counts calls so tests can check how many prompts were issued.
#[derive(Debug)]
pub struct MockBackend {
    fixture: Fixture,
    variants: VariantSet,
    max_in_flight: usize,
    sample_calls: AtomicUsize,
    query_calls: AtomicUsize,
    queried: Mutex<Vec<String>>,
}

impl MockBackend {
    pub fn new(fixture: Fixture) -> Self {
        MockBackend {
            fixture,
            variants: VariantSet::default(),
            max_in_flight: 4,
            sample_calls: AtomicUsize::new(0),
            query_calls: AtomicUsize::new(0),
            queried: Mutex::new(Vec::new()),
        }
    }

    pub fn from_path(path: &Path) -> Result<Self, BackendError> {
        Ok(Self::new(Fixture::from_path(path)?))
    }

    pub fn with_variants(mut self, variants: VariantSet) -> Self {
        self.variants = variants;
        self
    }

    pub fn with_max_in_flight(mut self, n: usize) -> Self {
        self.max_in_flight = n.max(1);
        self
    }

    pub fn fixture(&self) -> &Fixture {
        &self.fixture
    }

    pub fn sample_calls(&self) -> usize {
        self.sample_calls.load(Ordering::SeqCst)
    }

    /// Number of `next_token_logprobs` calls so far.
    pub fn query_calls(&self) -> usize {
        self.query_calls.load(Ordering::SeqCst)
    }

    /// Prompts passed to `next_token_logprobs`, in call order.
    pub fn queried_prompts(&self) -> Vec<String> {
        self.queried.lock().expect("poisoned").clone()
    }

    pub fn reset_counters(&self) {
        self.sample_calls.store(0, Ordering::SeqCst);
        self.query_calls.store(0, Ordering::SeqCst);
        self.queried.lock().expect("poisoned").clear();
    }

    fn lookup(&self, prompt: &str) -> Result<&FixtureEntry, BackendError> {
        self.fixture.0.get(prompt).ok_or_else(|| {
            let shown: String = prompt.chars().take(200).collect();
            BackendError::UnknownPrompt(shown)
        })
    }
}

impl Backend for MockBackend {
    fn sample(&self, prompt: &str, n: usize, temperature: f64) -> Result<Vec<Candidate>, BackendError> {
        check_sample_args(n, temperature)?;
        self.sample_calls.fetch_add(1, Ordering::SeqCst);
        let entry = self.lookup(prompt)?;
        if entry.completions.len() < n {
            return Err(BackendError::NotEnoughCompletions {
                available: entry.completions.len(),
                requested: n,
            });
        }
        let out = entry.completions[..n].to_vec();
        if out.iter().any(|c| c.token_logprobs.is_empty()) {
            return Err(BackendError::MissingLogprobs);
        }
        Ok(out)
    }

    fn next_token_logprobs(&self, prompt: &str, targets: &[&str]) -> Result<TokenQueryResult, BackendError> {
        if targets.is_empty() {
            return Err(BackendError::InvalidRequest("empty target list".into()));
        }
        self.query_calls.fetch_add(1, Ordering::SeqCst);
        self.queried.lock().expect("poisoned").push(prompt.to_string());
        let entry = self.lookup(prompt)?;
        let reported: HashMap<String, f64> = entry
            .next_token_logprobs
            .iter()
            .map(|(k, v)| (k.clone(), *v))
            .collect();
        resolve_targets(&reported, targets, &self.variants)
    }

    fn max_in_flight(&self) -> usize {
        self.max_in_flight
    }
}
