//! Command-line front end: run the optimization loop or the best-of-N
//! baseline, replay and audit logged runs, and compute coverage metrics.

use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use serde_json::json;

use vqqa::agents::AgentError;
use vqqa::analysis::{audit_ledger, coverage_metrics, expected_vlm_calls, CoverageInputs};
use vqqa::backend::http::{HttpBackend, HttpConfig};
use vqqa::model::{
    running_max, GenerationConditions, Question, QuestionCategory, StopPolicy, Trajectory,
};
use vqqa::orchestrator::{
    best_of_n, optimize, Backends, OrchestratorError, RunConfig, SelectionStrategy,
};
use vqqa::persistence::{load_run, EventLogWriter, PersistError};

const EXIT_CONFIG: i32 = 2;
const EXIT_BACKEND: i32 = 3;
const EXIT_PARSE: i32 = 4;

#[derive(Parser)]
#[command(name = "vqqa", version, about = "Closed-loop video prompt optimizer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full optimization loop for one prompt.
    Run(RunArgs),
    /// Run the best-of-N baseline for one prompt.
    Bon(BonArgs),
    /// Replay a logged run: ledger audit, score curve, stop reason.
    Analyze(AnalyzeArgs),
    /// Compute precision / Q-recall / E2E-recall from judged fixtures.
    Coverage(CoverageArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum StrategyArg {
    Global,
    Last,
    AvgQa,
}

impl From<StrategyArg> for SelectionStrategy {
    fn from(value: StrategyArg) -> Self {
        match value {
            StrategyArg::Global => SelectionStrategy::GlobalSelection,
            StrategyArg::Last => SelectionStrategy::LastIteration,
            StrategyArg::AvgQa => SelectionStrategy::AverageQa,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum BackendArg {
    Sim,
    Http,
}

#[derive(Args)]
struct RunArgs {
    /// The original prompt to optimize.
    #[arg(long)]
    prompt: String,
    /// Reference image (repeatable); presence switches to image-to-video.
    #[arg(long = "image")]
    images: Vec<String>,
    #[arg(long)]
    max_rounds: Option<u32>,
    #[arg(long)]
    gamma: Option<u8>,
    #[arg(long)]
    patience: Option<u32>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long, value_enum)]
    strategy: Option<StrategyArg>,
    /// Expose global scores to the refinement agent (off by default).
    #[arg(long)]
    gs_in_the_loop: bool,
    #[arg(long, value_enum)]
    backend: Option<BackendArg>,
    #[arg(long)]
    run_id: Option<String>,
    /// Directory for the JSONL event log.
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Sample index for multi-sample benchmarks (sets the initial seed).
    #[arg(long, default_value_t = 0)]
    sample_index: u32,
}

#[derive(Args)]
struct BonArgs {
    #[arg(long)]
    prompt: String,
    #[arg(long = "image")]
    images: Vec<String>,
    /// Number of candidates.
    #[arg(short = 'n', long = "n")]
    n: Option<usize>,
    #[arg(long, value_enum)]
    backend: Option<BackendArg>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    run_id: Option<String>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    sample_index: u32,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Event log produced by `run` or `bon`.
    #[arg(long)]
    run: PathBuf,
}

#[derive(Args)]
struct CoverageArgs {
    /// JSON list of {"problem", "question_indices"} objects.
    #[arg(long)]
    critiques: PathBuf,
    /// JSON list of {"text", "category"?, "is_relevant"} objects.
    #[arg(long)]
    questions: PathBuf,
    /// JSON list of integer QA scores aligned with the questions.
    #[arg(long)]
    scores: PathBuf,
    /// Detection threshold: a flaw counts only below this score.
    #[arg(long, default_value_t = 60)]
    threshold: u8,
}

/// Values a config file may supply; every flag wins over its file value.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    max_rounds: Option<u32>,
    gamma: Option<u8>,
    patience: Option<u32>,
    epsilon: Option<f64>,
    strategy: Option<String>,
    gs_in_the_loop: Option<bool>,
    backend: Option<String>,
    run_id: Option<String>,
    out: Option<PathBuf>,
    n: Option<usize>,
    rater_retries: Option<u32>,
    qa_highlight_threshold: Option<u8>,
}

struct CliError {
    code: i32,
    source: anyhow::Error,
}

impl CliError {
    fn config(source: anyhow::Error) -> Self {
        Self { code: EXIT_CONFIG, source }
    }
    fn parse(source: anyhow::Error) -> Self {
        Self { code: EXIT_PARSE, source }
    }
}

impl From<OrchestratorError> for CliError {
    fn from(error: OrchestratorError) -> Self {
        let code = match &error {
            OrchestratorError::Backend(_) => EXIT_BACKEND,
            OrchestratorError::Agent(AgentError::Backend(_)) => EXIT_BACKEND,
            OrchestratorError::Agent(_) | OrchestratorError::UnparsableRating { .. } => EXIT_PARSE,
            OrchestratorError::Model(_) | OrchestratorError::EmptyInput(_) => EXIT_CONFIG,
            OrchestratorError::MissingQaMeans => EXIT_CONFIG,
            OrchestratorError::Observer(_) => EXIT_BACKEND,
        };
        Self { code, source: anyhow!(error) }
    }
}

impl From<PersistError> for CliError {
    fn from(error: PersistError) -> Self {
        let code = match &error {
            PersistError::Io(_) => EXIT_BACKEND,
            _ => EXIT_PARSE,
        };
        Self { code, source: anyhow!(error) }
    }
}

fn main() {
    env_logger::init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Bon(args) => cmd_bon(args),
        Command::Analyze(args) => cmd_analyze(args),
        Command::Coverage(args) => cmd_coverage(args),
    };
    if let Err(error) = result {
        eprintln!("error: {:#}", error.source);
        std::process::exit(error.code);
    }
}

fn load_file_config(path: Option<&Path>) -> Result<FileConfig, CliError> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))
        .map_err(CliError::config)?;
    serde_json::from_str(&text)
        .with_context(|| format!("parsing config {}", path.display()))
        .map_err(CliError::config)
}

fn parse_strategy(name: &str) -> Result<SelectionStrategy, CliError> {
    match name {
        "global" => Ok(SelectionStrategy::GlobalSelection),
        "last" => Ok(SelectionStrategy::LastIteration),
        "avg-qa" => Ok(SelectionStrategy::AverageQa),
        other => Err(CliError::config(anyhow!("unknown strategy {other:?}"))),
    }
}

fn resolve_backends(choice: Option<BackendArg>, file: Option<&str>) -> Result<Backends, CliError> {
    let name = match (choice, file) {
        (Some(BackendArg::Sim), _) => "sim",
        (Some(BackendArg::Http), _) => "http",
        (None, Some(name)) => name,
        (None, None) => "sim",
    };
    match name {
        "sim" => Ok(Backends::sim()),
        "http" => {
            let require = |var: &str| {
                std::env::var(var)
                    .map_err(|_| CliError::config(anyhow!("{var} must be set for --backend http")))
            };
            let config = HttpConfig {
                base_url: require("VQQA_API_BASE")?,
                api_key: require("VQQA_API_KEY")?,
                model: require("VQQA_MODEL")?,
            };
            let backend =
                Arc::new(HttpBackend::new(config).map_err(|e| CliError::config(anyhow!(e)))?);
            Ok(Backends {
                video: backend.clone(),
                vlm: backend,
            })
        }
        other => Err(CliError::config(anyhow!("unknown backend {other:?}"))),
    }
}

fn conditions_from(
    prompt: &str,
    images: &[String],
    sample_index: u32,
) -> Result<GenerationConditions, CliError> {
    let conditions = if images.is_empty() {
        GenerationConditions::text_to_video(prompt, sample_index)
    } else {
        GenerationConditions::image_to_video(prompt, images.to_vec(), sample_index)
    };
    conditions.map_err(|e| CliError::config(anyhow!(e)))
}

fn default_run_id() -> String {
    let now = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    format!("run-{now}")
}

fn open_log(
    out: Option<PathBuf>,
    run_id: &str,
    sample_index: u32,
) -> Result<(EventLogWriter<std::io::BufWriter<File>>, PathBuf), CliError> {
    let dir = out.unwrap_or_else(|| PathBuf::from("runs"));
    fs::create_dir_all(&dir)
        .with_context(|| format!("creating {}", dir.display()))
        .map_err(CliError::config)?;
    let sample_id = format!("s{sample_index}");
    let path = dir.join(format!("{run_id}__{sample_id}.jsonl"));
    let writer = EventLogWriter::create(&path, run_id, &sample_id).map_err(CliError::from)?;
    Ok((writer, path))
}

fn print_summary(trajectory: &Trajectory, log_path: &Path) {
    let scores = trajectory.global_scores();
    let s_star = running_max(&scores).unwrap_or_default();
    let audit = audit_ledger(trajectory);
    let summary = json!({
        "records": trajectory.records.len(),
        "stop_reason": trajectory.stop_reason,
        "selected_index": trajectory.selected_index,
        "selected_score": trajectory.selected_index.map(|i| trajectory.records[i].global_score.score),
        "selected_prompt": trajectory.selected_index.map(|i| trajectory.records[i].prompt_used.clone()),
        "global_scores": scores,
        "running_max": s_star,
        "ledger": trajectory.ledger,
        "total_vlm_calls": trajectory.ledger.total(),
        "audit_deviations": audit.deviations,
        "log": log_path.display().to_string(),
    });
    println!(
        "{}",
        serde_json::to_string_pretty(&summary).expect("serializable summary")
    );
}

fn cmd_run(args: RunArgs) -> Result<(), CliError> {
    let file = load_file_config(args.config.as_deref())?;
    let strategy = match args.strategy {
        Some(s) => SelectionStrategy::from(s),
        None => match file.strategy.as_deref() {
            Some(name) => parse_strategy(name)?,
            None => SelectionStrategy::GlobalSelection,
        },
    };
    let defaults = StopPolicy::default();
    let stop_policy = StopPolicy {
        gamma: args.gamma.or(file.gamma).unwrap_or(defaults.gamma),
        patience: args.patience.or(file.patience).unwrap_or(defaults.patience),
        epsilon: args.epsilon.or(file.epsilon).unwrap_or(defaults.epsilon),
        max_rounds: args
            .max_rounds
            .or(file.max_rounds)
            .unwrap_or(defaults.max_rounds),
    };
    stop_policy
        .validate()
        .map_err(|e| CliError::config(anyhow!(e)))?;
    let backends = resolve_backends(args.backend, file.backend.as_deref())?;
    let run_id = args.run_id.or(file.run_id).unwrap_or_else(default_run_id);
    let config = RunConfig {
        stop_policy,
        selection_strategy: strategy,
        gs_in_the_loop: args.gs_in_the_loop || file.gs_in_the_loop.unwrap_or(false),
        qa_highlight_threshold: file.qa_highlight_threshold,
        rater_retries: file.rater_retries.unwrap_or(3),
        run_id: run_id.clone(),
        backends,
    };
    let conditions = conditions_from(&args.prompt, &args.images, args.sample_index)?;
    let (mut log, log_path) = open_log(args.out.or(file.out), &run_id, args.sample_index)?;
    let trajectory = optimize(&conditions, &config, &mut log)?;
    print_summary(&trajectory, &log_path);
    Ok(())
}

fn cmd_bon(args: BonArgs) -> Result<(), CliError> {
    let file = load_file_config(args.config.as_deref())?;
    let n = args.n.or(file.n).unwrap_or(5);
    let backends = resolve_backends(args.backend, file.backend.as_deref())?;
    let run_id = args.run_id.or(file.run_id).unwrap_or_else(default_run_id);
    let config = RunConfig {
        rater_retries: file.rater_retries.unwrap_or(3),
        ..RunConfig::new(run_id.clone(), backends)
    };
    let conditions = conditions_from(&args.prompt, &args.images, args.sample_index)?;
    let (mut log, log_path) = open_log(args.out.or(file.out), &run_id, args.sample_index)?;
    let trajectory = best_of_n(&conditions, n, &config, &mut log)?;
    print_summary(&trajectory, &log_path);
    Ok(())
}

fn cmd_analyze(args: AnalyzeArgs) -> Result<(), CliError> {
    let file = File::open(&args.run)
        .with_context(|| format!("opening {}", args.run.display()))
        .map_err(CliError::config)?;
    let loaded = load_run(file)?;
    let Some(trajectory) = loaded.trajectory else {
        println!(
            "{}",
            json!({ "empty_run": true, "lines": loaded.lines, "partial": loaded.partial })
        );
        return Ok(());
    };
    let scores = trajectory.global_scores();
    let s_star = running_max(&scores).unwrap_or_default();
    let audit = audit_ledger(&trajectory);
    let expected = expected_vlm_calls(audit.rounds as f64, audit.k_img as u32)
        .map_err(|e| CliError::parse(anyhow!(e)))?;
    let report = json!({
        "run_id": loaded.run_id,
        "sample_id": loaded.sample_id,
        "partial": loaded.partial,
        "truncated_tail": loaded.truncated_tail,
        "error": loaded.error_message,
        "records": trajectory.records.len(),
        "stop_reason": trajectory.stop_reason,
        "selected_index": trajectory.selected_index,
        "global_scores": scores,
        "running_max": s_star,
        "audit": audit,
        "expected_total_at_executed_rounds": expected,
    });
    println!(
        "{}",
        serde_json::to_string_pretty(&report).expect("serializable report")
    );
    Ok(())
}

#[derive(Debug, Deserialize)]
struct CritiqueEntry {
    problem: String,
    question_indices: Vec<usize>,
}

#[derive(Debug, Deserialize)]
struct QuestionEntry {
    text: String,
    #[serde(default)]
    category: Option<String>,
    #[serde(default)]
    source_image_index: Option<usize>,
    is_relevant: bool,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(CliError::config)?;
    serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", path.display()))
        .map_err(CliError::parse)
}

fn cmd_coverage(args: CoverageArgs) -> Result<(), CliError> {
    let critiques: Vec<CritiqueEntry> = read_json(&args.critiques)?;
    let question_entries: Vec<QuestionEntry> = read_json(&args.questions)?;
    let qa_scores: Vec<u8> = read_json(&args.scores)?;

    let mut questions = Vec::with_capacity(question_entries.len());
    let mut relevance_flags = Vec::with_capacity(question_entries.len());
    for entry in question_entries {
        let category = match entry.category.as_deref() {
            None | Some("alignment") => QuestionCategory::Alignment,
            Some("visual_quality") => QuestionCategory::VisualQuality,
            Some("condition_fidelity") => QuestionCategory::ConditionFidelity,
            Some(other) => {
                return Err(CliError::parse(anyhow!(
                    "unknown question category {other:?}"
                )))
            }
        };
        questions.push(Question {
            text: entry.text,
            category,
            source_image_index: entry.source_image_index,
        });
        relevance_flags.push(entry.is_relevant);
    }

    let inputs = CoverageInputs {
        gt_problems: critiques.iter().map(|c| c.problem.clone()).collect(),
        problem_to_question_indices: critiques.into_iter().map(|c| c.question_indices).collect(),
        questions,
        relevance_flags,
        qa_scores,
        threshold: args.threshold,
    };
    let report = coverage_metrics(&inputs).map_err(|e| CliError::parse(anyhow!(e)))?;
    println!(
        "{}",
        serde_json::to_string_pretty(&report).expect("serializable report")
    );
    Ok(())
}
