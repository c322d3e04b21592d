//! Completions-style HTTP backend (`POST {endpoint}` with a `logprobs`
//! parameter, OpenAI legacy completions response shape).

use std::collections::HashMap;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{check_sample_args, resolve_targets, Backend, BackendError, TokenQueryResult, VariantSet};
use crate::types::Candidate;

pub const DEFAULT_API_KEY_ENV: &str = "SELGEN_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackendRequestPolicy {
    pub max_in_flight: usize,
    pub retry_limit: u32,
    /// Delay before each retry; the last entry repeats.
    pub retry_backoff_ms: Vec<u64>,
    pub timeout_ms: u64,
}

impl Default for BackendRequestPolicy {
    fn default() -> Self {
        BackendRequestPolicy {
            max_in_flight: 4,
            retry_limit: 3,
            retry_backoff_ms: vec![500, 2000, 8000],
            timeout_ms: 60_000,
        }
    }
}

impl BackendRequestPolicy {
    pub fn validate(&self) -> Result<(), BackendError> {
        if self.max_in_flight == 0 {
            return Err(BackendError::Config("max_in_flight must be at least 1".into()));
        }
        if self.timeout_ms == 0 {
            return Err(BackendError::Config("timeout_ms must be positive".into()));
        }
        Ok(())
    }

    fn backoff(&self, retry: u32) -> Duration {
        let ms = match self.retry_backoff_ms.as_slice() {
            [] => 0,
            list => list[(retry as usize).min(list.len() - 1)],
        };
        Duration::from_millis(ms)
    }
}

fn default_api_key_env() -> String {
    DEFAULT_API_KEY_ENV.to_string()
}

fn default_top_logprobs() -> u32 {
    5
}

fn default_max_tokens() -> u32 {
    256
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HttpConfig {
    pub endpoint: String,
    pub model: String,
    #[serde(default = "default_api_key_env")]
    pub api_key_env: String,
    #[serde(default)]
    pub variants: VariantSet,
    /// Number of alternatives requested per position when scoring tokens.
    #[serde(default = "default_top_logprobs")]
    pub top_logprobs: u32,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default)]
    pub stop: Vec<String>,
    #[serde(default)]
    pub policy: BackendRequestPolicy,
}

impl HttpConfig {
    pub fn from_path(path: &Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            BackendError::Config(format!("cannot read {}: {e}", path.display()))
        })?;
        let config: HttpConfig = toml::from_str(&text)
            .map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))?;
        config.policy.validate()?;
        config.variants.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Deserialize)]
struct CompletionResponse {
    choices: Vec<CompletionChoice>,
}

#[derive(Debug, Deserialize)]
struct CompletionChoice {
    text: String,
    logprobs: Option<ChoiceLogprobs>,
}

#[derive(Debug, Deserialize)]
struct ChoiceLogprobs {
    #[serde(default)]
    token_logprobs: Option<Vec<Option<f64>>>,
    #[serde(default)]
    top_logprobs: Option<Vec<Option<HashMap<String, f64>>>>,
}

pub struct HttpBackend {
    config: HttpConfig,
    api_key: String,
    client: reqwest::blocking::Client,
}

impl std::fmt::Debug for HttpBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpBackend")
            .field("endpoint", &self.config.endpoint)
            .field("model", &self.config.model)
            .finish_non_exhaustive()
    }
}

impl HttpBackend {
    /// Reads the API key from the configured environment variable.
    pub fn new(config: HttpConfig) -> Result<Self, BackendError> {
        let api_key = std::env::var(&config.api_key_env).map_err(|_| {
            BackendError::Config(format!(
                "environment variable {} is not set",
                config.api_key_env
            ))
        })?;
        Self::with_api_key(config, api_key)
    }

    pub fn with_api_key(config: HttpConfig, api_key: String) -> Result<Self, BackendError> {
        config.policy.validate()?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(config.policy.timeout_ms))
            .build()
            .map_err(|e| BackendError::Config(format!("http client: {e}")))?;
        Ok(HttpBackend {
            config,
            api_key,
            client,
        })
    }

    fn complete(
        &self,
        prompt: &str,
        max_tokens: u32,
        temperature: f64,
        context: &str,
    ) -> Result<CompletionChoice, BackendError> {
        let mut body = json!({
            "model": self.config.model,
            "prompt": prompt,
            "max_tokens": max_tokens,
            "temperature": temperature,
            "n": 1,
            "logprobs": self.config.top_logprobs,
        });
        if !self.config.stop.is_empty() {
            body["stop"] = json!(self.config.stop);
        }
        let policy = &self.config.policy;
        let attempts = policy.retry_limit + 1;
        let mut last_failure = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                std::thread::sleep(policy.backoff(attempt - 1));
            }
            let sent = self
                .client
                .post(&self.config.endpoint)
                .bearer_auth(&self.api_key)
                .json(&body)
                .send();
            let response = match sent {
                Ok(r) => r,
                Err(e) => {
                    last_failure = e.to_string();
                    continue;
                }
            };
            let status = response.status();
            if status.is_success() {
                let parsed: CompletionResponse = response
                    .json()
                    .map_err(|e| BackendError::Malformed(format!("{context}: {e}")))?;
                return parsed
                    .choices
                    .into_iter()
                    .next()
                    .ok_or_else(|| BackendError::Malformed(format!("{context}: no choices")));
            }
            let text = response.text().unwrap_or_default();
            if status.as_u16() == 429 || status.is_server_error() {
                last_failure = format!("HTTP {status}: {text}");
                continue;
            }
            return Err(BackendError::Status {
                context: context.to_string(),
                status: status.as_u16(),
                body: text,
            });
        }
        Err(BackendError::Transport {
            context: context.to_string(),
            attempts,
            message: last_failure,
        })
    }
}

fn prompt_context(kind: &str, prompt: &str) -> String {
    let head: String = prompt.chars().take(60).collect();
    format!("{kind} request for prompt {head:?}")
}

impl Backend for HttpBackend {
    fn sample(&self, prompt: &str, n: usize, temperature: f64) -> Result<Vec<Candidate>, BackendError> {
        check_sample_args(n, temperature)?;
        let context = prompt_context("sample", prompt);
        (0..n)
            .map(|_| {
                let choice = self.complete(prompt, self.config.max_tokens, temperature, &context)?;
                let lps = choice
                    .logprobs
                    .and_then(|l| l.token_logprobs)
                    .ok_or(BackendError::MissingLogprobs)?;
                let token_logprobs = lps
                    .into_iter()
                    .collect::<Option<Vec<f64>>>()
                    .ok_or(BackendError::MissingLogprobs)?;
                Candidate::new(choice.text, token_logprobs)
                    .map_err(|e| BackendError::Malformed(format!("{context}: {e}")))
            })
            .collect()
    }

    fn next_token_logprobs(&self, prompt: &str, targets: &[&str]) -> Result<TokenQueryResult, BackendError> {
        if targets.is_empty() {
            return Err(BackendError::InvalidRequest("empty target list".into()));
        }
        let context = prompt_context("score", prompt);
        let choice = self.complete(prompt, 1, 0.0, &context)?;
        let top = choice
            .logprobs
            .and_then(|l| l.top_logprobs)
            .and_then(|positions| positions.into_iter().next().flatten())
            .ok_or(BackendError::MissingLogprobs)?;
        // providers occasionally report tiny positive rounding error
        let top: HashMap<String, f64> = top
            .into_iter()
            .map(|(k, v)| (k, if v > 0.0 && v < 1e-6 { 0.0 } else { v }))
            .collect();
        resolve_targets(&top, targets, &self.config.variants)
    }

    fn max_in_flight(&self) -> usize {
        self.config.policy.max_in_flight
    }
}
