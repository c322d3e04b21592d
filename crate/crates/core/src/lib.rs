//! Confidence scores for LLM generations and the metrics used to judge them
//! for selective generation.
//!
//! Scores: sequence likelihood (total and length-normalized), Sample and
//! Select (with an optional "None of the above" option), Sample and Eval
//! (optionally showing the other candidates), and a Hybrid that selects via
//! the multiple-choice prompt and scores via the pointwise prompt.

pub mod backend;
pub mod error;
pub mod labeling;
pub mod metrics;
pub mod pipeline;
pub mod prompts;
pub mod scoring;
pub mod synthetic;
pub mod types;

pub use backend::{Backend, BackendError, Fixture, HttpBackend, HttpConfig, MockBackend, TokenQueryResult};
pub use error::{Error, Result};
pub use labeling::{llm_judge, LabelStore, LlmJudge};
pub use metrics::{accuracy, calibration_auc, join_labels, selective_auc, selective_curve, LabeledSelection};
pub use pipeline::{DebiasMode, Pipeline, PipelineConfig, RunOutput};
pub use prompts::{PromptTemplate, Task, TemplateKind, TemplateSet};
pub use types::{
    Candidate, ChoiceDistribution, ChoiceLabel, CorrectnessLabel, CurvePoint, Dataset, Method, MetricsReport,
    QuestionRecord, ResultRecord, Score, ScoredSelection,
};
