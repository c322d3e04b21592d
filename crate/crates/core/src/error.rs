use thiserror::Error;

use crate::backend::BackendError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty candidate: no token logprobs")]
    EmptyCandidate,

    #[error("no candidates")]
    NoCandidates,

    #[error("choice distribution needs at least 2 labels, got {0}")]
    TooFewLabels(usize),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("every entry of the distribution is the NOTA option")]
    AllNota,

    #[error("distribution has no NOTA entry")]
    NoNota,

    #[error("the NOTA letter is not among the reported tokens")]
    NotaUnavailable,

    #[error("tokens unavailable for scoring: {0}")]
    TokensUnavailable(String),

    #[error("label space exhausted: {0} candidates exceed the single-letter labels")]
    LabelSpaceExhausted(usize),

    #[error("invalid template {name}: {reason}")]
    Template { name: String, reason: String },

    #[error("missing value for placeholder {{{0}}}")]
    MissingPlaceholder(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error(
        "permutation budget exceeded: {candidates} candidates need {renders} renders \
         (budget {budget}); use sampled debiasing or raise the budget"
    )]
    PermutationBudget {
        candidates: usize,
        renders: usize,
        budget: usize,
    },

    #[error("AUC undefined: labels contain a single class")]
    AucUndefined,

    #[error("unlabeled selections for ids: {}", .0.join(", "))]
    MissingLabels(Vec<String>),

    #[error("conflicting labels for id {id} answer {answer:?}")]
    LabelConflict { id: String, answer: String },

    #[error("duplicate result for id {id} method {method}")]
    DuplicateResult { id: String, method: String },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("invalid dataset: {0}")]
    Dataset(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error(transparent)]
    Backend(#[from] BackendError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
