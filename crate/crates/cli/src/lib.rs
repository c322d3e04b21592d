//! `selgen` command implementations. `main.rs` only parses and dispatches,
//! so every command is callable in-process.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use selgen_core::backend::open_backend;
use selgen_core::metrics::{compute_reports, summary_csv_with_rows, write_reports};
use selgen_core::pipeline::QuestionFailure;
use selgen_core::prompts::builtin_judge;
use selgen_core::synthetic::{generate, SyntheticParams};
use selgen_core::types::{read_results, write_results};
use selgen_core::{
    join_labels, Backend, Dataset, DebiasMode, LabelStore, LlmJudge, Method, MetricsReport, Pipeline,
    PipelineConfig, PromptTemplate, ResultRecord, Task, TemplateKind, TemplateSet,
};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "selgen", version, about = "Self-evaluation confidence scores for selective generation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Score every question under the requested methods
    Run(RunArgs),
    /// Join results with labels and compute the metric suite
    Metrics(MetricsArgs),
    /// Compare vanilla and de-biased Sample and Select on the same samples
    DebiasAblation(AblationArgs),
    /// Label the selected answers of a results file with a prompted judge
    Judge(JudgeArgs),
    /// Write a seeded synthetic dataset, mock fixture and labels
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Args)]
pub struct PipelineArgs {
    /// TOML file with pipeline settings; flags below override it
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma-separated method names (default: all eight)
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<Method>>,
    /// Samples per question
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Add the "None of the above" variant of each multiple-choice method
    #[arg(long)]
    pub nota: bool,
    #[arg(long)]
    pub critique_revise: bool,
    /// off, full or sampled:<k>
    #[arg(long)]
    pub debias: Option<DebiasMode>,
    /// Render budget for full-permutation debiasing
    #[arg(long)]
    pub permutations: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub templates_dir: Option<PathBuf>,
    /// qa or summarization
    #[arg(long, default_value = "qa")]
    pub task: Task,
}

impl PipelineArgs {
    pub fn pipeline_config(&self) -> Result<PipelineConfig> {
        let mut config = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))?
            }
            None => PipelineConfig::default(),
        };
        if let Some(methods) = &self.methods {
            config.methods = methods.iter().copied().collect();
        }
        if self.nota {
            let extra: Vec<Method> = config.methods.iter().filter_map(|m| m.with_nota()).collect();
            config.methods.extend(extra);
        }
        if let Some(n) = self.n {
            config.n_samples = n;
        }
        if let Some(t) = self.temperature {
            config.temperature = t;
        }
        if self.critique_revise {
            config.critique_revise = true;
        }
        if let Some(d) = self.debias {
            config.debias = d;
        }
        if let Some(p) = self.permutations {
            config.permutation_budget = p;
        }
        if let Some(s) = self.seed {
            config.random_seed = s;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn templates(&self) -> Result<TemplateSet> {
        Ok(match &self.templates_dir {
            Some(dir) => TemplateSet::load_dir(dir, self.task)?,
            None => TemplateSet::builtin(self.task),
        })
    }
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// mock:<fixture.json> or http:<config.toml>
    #[arg(long)]
    pub backend: String,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    /// Output directory for results.jsonl and manifest.json
    #[arg(long)]
    pub out: PathBuf,
    /// Write results for the questions that succeeded and list the rest
    #[arg(long)]
    pub skip_errors: bool,
}

#[derive(Debug, Clone, Args)]
pub struct MetricsArgs {
    #[arg(long)]
    pub results: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    /// Output directory for metrics.json, summary.csv and curve TSVs
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct AblationArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub labels: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct JudgeArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub results: PathBuf,
    #[arg(long)]
    pub backend: String,
    /// Pointwise template with {question} and {answer}; defaults to the built-in judge
    #[arg(long)]
    pub judge_template: Option<PathBuf>,
    #[arg(long, default_value = "qa")]
    pub task: Task,
    #[arg(long, default_value_t = selgen_core::labeling::DEFAULT_JUDGE_THRESHOLD)]
    pub threshold: f64,
    /// Labels JSONL to write
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    #[arg(long, default_value_t = 12)]
    pub questions: usize,
    #[arg(long, default_value_t = 3)]
    pub answers: usize,
    #[arg(long, default_value_t = 1.5)]
    pub yes_signal: f64,
    #[arg(long, default_value_t = 1.0)]
    pub letter_signal: f64,
    #[arg(long, default_value_t = 0.0)]
    pub position_bias: f64,
    #[arg(long, default_value_t = 1.0)]
    pub noise: f64,
    /// Seed for the synthetic world (distinct from the pipeline --seed)
    #[arg(long, default_value_t = 0)]
    pub world_seed: u64,
    /// Directory for dataset.jsonl, fixture.json and labels.jsonl
    #[arg(long)]
    pub out: PathBuf,
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(args) => cmd_run(&args),
        Command::Metrics(args) => cmd_metrics(&args).map(|_| ()),
        Command::DebiasAblation(args) => cmd_debias_ablation(&args).map(|_| ()),
        Command::Judge(args) => cmd_judge(&args),
        Command::Synth(args) => cmd_synth(&args),
    }
}

/// Writes via a sibling temporary file so a failed run never leaves a
/// truncated output behind.
fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, contents).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn write_results_atomic(path: &Path, records: &[ResultRecord]) -> Result<()> {
    let tmp = path.with_extension("partial");
    write_results(&tmp, records)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn pretty_json<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(bytes)
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    version: &'static str,
    dataset: String,
    backend: &'a str,
    task: Task,
    config: &'a PipelineConfig,
    templates: BTreeMap<String, String>,
    questions: usize,
    records: usize,
    skipped: &'a [QuestionFailure],
}

struct Prepared {
    config: PipelineConfig,
    templates: TemplateSet,
    dataset: Dataset,
    backend: Box<dyn Backend>,
}

/// Config and templates are validated before the backend is opened.
fn prepare(run: &RunArgs) -> Result<Prepared> {
    let config = run.pipeline.pipeline_config()?;
    let templates = run.pipeline.templates()?;
    let dataset = Dataset::load_jsonl(&run.dataset)?;
    let backend = open_backend(&run.backend)?;
    Ok(Prepared {
        config,
        templates,
        dataset,
        backend,
    })
}

fn failure_summary(failures: &[QuestionFailure]) -> String {
    failures
        .iter()
        .map(|f| format!("  {}: {}", f.id, f.error))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn cmd_run(args: &RunArgs) -> Result<()> {
    let p = prepare(args)?;
    let pipeline = Pipeline::new(p.backend.as_ref(), &p.templates, &p.config)?;
    let output = pipeline.run_dataset(&p.dataset);
    if !output.failures.is_empty() && !args.skip_errors {
        bail!(
            "{} of {} questions failed (rerun with --skip-errors to keep the rest):\n{}",
            output.failures.len(),
            p.dataset.len(),
            failure_summary(&output.failures)
        );
    }
    std::fs::create_dir_all(&args.out)?;
    write_results_atomic(&args.out.join("results.jsonl"), &output.records)?;
    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION"),
        dataset: args.dataset.display().to_string(),
        backend: &args.backend,
        task: args.pipeline.task,
        config: &p.config,
        templates: p.templates.hashes(),
        questions: p.dataset.len(),
        records: output.records.len(),
        skipped: &output.failures,
    };
    write_atomic(&args.out.join("manifest.json"), &pretty_json(&manifest)?)?;
    for f in &output.failures {
        eprintln!("skipped {}: {}", f.id, f.error);
    }
    Ok(())
}

pub fn cmd_metrics(args: &MetricsArgs) -> Result<Vec<MetricsReport>> {
    let results = read_results(&args.results)?;
    if results.is_empty() {
        bail!("results file {} is empty", args.results.display());
    }
    let labels = LabelStore::load(&args.labels)?;
    let joined = join_labels(&results, &labels)?;
    let reports = compute_reports(&joined)?;
    write_reports(&args.out, &reports)?;
    Ok(reports)
}

/// Vanilla and de-biased Sample and Select records for one dataset, both
/// scored on the same sampled candidates.
#[derive(Debug, Clone, Default)]
pub struct Ablation {
    pub vanilla: Vec<ResultRecord>,
    pub debiased: Vec<ResultRecord>,
    pub failures: Vec<QuestionFailure>,
}

/// The de-biased arm uses `config.debias`, or full permutations when that is off.
pub fn debias_ablation(
    backend: &dyn Backend,
    templates: &TemplateSet,
    config: &PipelineConfig,
    dataset: &Dataset,
    include_nota: bool,
) -> Result<Ablation> {
    let vanilla_config = PipelineConfig {
        debias: DebiasMode::Off,
        ..config.clone()
    };
    let debiased_config = PipelineConfig {
        debias: match config.debias {
            DebiasMode::Off => DebiasMode::FullPermutations,
            mode => mode,
        },
        ..config.clone()
    };
    let vanilla = Pipeline::new(backend, templates, &vanilla_config)?;
    let debiased = Pipeline::new(backend, templates, &debiased_config)?;
    let output = vanilla.map_questions(dataset, |q| {
        let candidates = vanilla.sample_candidates(q)?;
        let a = vanilla.run_sample_and_select(q, &candidates, include_nota)?;
        let b = debiased.run_sample_and_select(q, &candidates, include_nota)?;
        Ok(vec![
            ResultRecord::from_selection(&a, &candidates),
            ResultRecord::from_selection(&b, &candidates),
        ])
    });
    let mut ablation = Ablation {
        failures: output.failures,
        ..Default::default()
    };
    for pair in output.records.chunks(2) {
        ablation.vanilla.push(pair[0].clone());
        ablation.debiased.push(pair[1].clone());
    }
    Ok(ablation)
}

pub const ABLATION_ROWS: [&str; 2] = ["Sample and Select, vanilla", "Sample and Select, de-biased"];

pub fn ablation_csv(vanilla: &MetricsReport, debiased: &MetricsReport) -> String {
    summary_csv_with_rows(
        ABLATION_ROWS
            .iter()
            .map(|s| s.to_string())
            .zip([vanilla, debiased]),
    )
}

pub fn cmd_debias_ablation(args: &AblationArgs) -> Result<(MetricsReport, MetricsReport)> {
    let p = prepare(&args.run)?;
    let labels = LabelStore::load(&args.labels)?;
    let ablation = debias_ablation(p.backend.as_ref(), &p.templates, &p.config, &p.dataset, args.run.pipeline.nota)?;
    if !ablation.failures.is_empty() && !args.run.skip_errors {
        bail!(
            "{} questions failed:\n{}",
            ablation.failures.len(),
            failure_summary(&ablation.failures)
        );
    }
    let report = |records: &[ResultRecord]| -> Result<MetricsReport> {
        let joined = join_labels(records, &labels)?;
        let mut reports = compute_reports(&joined)?;
        Ok(reports.remove(0))
    };
    let vanilla = report(&ablation.vanilla)?;
    let debiased = report(&ablation.debiased)?;
    let out = &args.run.out;
    std::fs::create_dir_all(out)?;
    write_results_atomic(&out.join("results_vanilla.jsonl"), &ablation.vanilla)?;
    write_results_atomic(&out.join("results_debiased.jsonl"), &ablation.debiased)?;
    write_atomic(&out.join("ablation.csv"), ablation_csv(&vanilla, &debiased).as_bytes())?;
    Ok((vanilla, debiased))
}

pub fn cmd_judge(args: &JudgeArgs) -> Result<()> {
    let template = match &args.judge_template {
        Some(path) => PromptTemplate::from_file(TemplateKind::PointwiseEval, path)?,
        None => builtin_judge(args.task),
    };
    let dataset = Dataset::load_jsonl(&args.dataset)?;
    let results = read_results(&args.results)?;
    let backend = open_backend(&args.backend)?;
    let judge = LlmJudge::new(backend.as_ref(), &template).with_threshold(args.threshold)?;
    let questions: BTreeMap<&str, _> = dataset.records().iter().map(|q| (q.id.as_str(), q)).collect();
    let mut seen = BTreeSet::new();
    let mut labels = Vec::new();
    for r in &results {
        let key = (r.id.clone(), selgen_core::types::normalize_text(&r.selected_text));
        if !seen.insert(key) {
            continue;
        }
        let q = questions
            .get(r.id.as_str())
            .with_context(|| format!("result id {} is not in {}", r.id, args.dataset.display()))?;
        labels.push(judge.label(q, &r.selected_text)?);
    }
    let mut buf = Vec::new();
    for l in &labels {
        serde_json::to_writer(&mut buf, l)?;
        buf.push(b'\n');
    }
    write_atomic(&args.out, &buf)
}

pub fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let config = args.pipeline.pipeline_config()?;
    let templates = args.pipeline.templates()?;
    let params = SyntheticParams {
        seed: args.world_seed,
        n_questions: args.questions,
        answers_per_question: args.answers,
        yes_signal: args.yes_signal,
        letter_signal: args.letter_signal,
        position_bias: args.position_bias,
        noise: args.noise,
        ..Default::default()
    };
    let world = generate(&params, &config, &templates)?;
    std::fs::create_dir_all(&args.out)?;
    world.dataset.write_jsonl(&args.out.join("dataset.jsonl"))?;
    world.fixture.write(&args.out.join("fixture.json"))?;
    let mut buf = Vec::new();
    for l in &world.labels {
        serde_json::to_writer(&mut buf, l)?;
        buf.push(b'\n');
    }
    write_atomic(&args.out.join("labels.jsonl"), &buf)
}
