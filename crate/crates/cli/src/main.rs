//! Command line front end: one config file drives the pipeline, and every
//! flag overrides the matching config key (flags win over the file).

mod backends;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use memesense::classifier::{load_predictions, AblationConfig, IndexSet, TrainingSpec};
use memesense::corpus::{ingest_manifest, LabelSchema, TaskId};
use memesense::evalsuite;
use memesense::fusion::{load_index, make_provider, IndexMode};
use memesense::pipeline::{
    plan_stages, run_pipeline, stage_inputs, stage_outputs, RunConfig, RunPaths, Stage,
    StageStatus, ThresholdSettings, ThresholdSource,
};
use memesense::reasoner::ReasoningCache;

use backends::CliBackendFactory;

/// Overrides the directory holding the reasoning cache file.
const CACHE_DIR_ENV: &str = "MEMESENSE_CACHE_DIR";

#[derive(Parser)]
#[command(
    name = "memesense",
    version,
    about = "Mental-health meme classification pipeline",
    after_help = "Environment:\n  MEMESENSE_CACHE_DIR  overrides the reasoning cache directory\n  <reasoner.api_key_env>  names the variable holding the backend credential"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a corpus file and write the normalized manifest
    Ingest(StageArgs),
    /// Generate figurative reasoning for every meme
    Reason(StageArgs),
    /// Build the OCR, reasoning, and concatenated retrieval indexes
    Index(StageArgs),
    /// Train the classifier on the train split
    Train(StageArgs),
    /// Tune per-class decision thresholds on the validation split
    TuneThresholds(StageArgs),
    /// Score the test split and write predictions
    Predict(StageArgs),
    /// Score predictions against gold labels
    Evaluate(EvaluateArgs),
    /// Train and score all eight input configurations
    Ablate(AblateArgs),
    /// Render comparison tables from saved ablation reports
    Report(ReportArgs),
    /// Run the full pipeline, or a subset of stages
    Run(RunArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration file (TOML)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Print the resolved stage plan without executing
    #[arg(long)]
    dry_run: bool,
    /// Task: anxiety or depression
    #[arg(long)]
    task: Option<TaskId>,
    /// Raw corpus file for ingest
    #[arg(long)]
    source: Option<PathBuf>,
    /// Normalized corpus manifest
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Reasoning cache file
    #[arg(long)]
    cache: Option<PathBuf>,
    /// Directory holding the retrieval indexes
    #[arg(long)]
    index_dir: Option<PathBuf>,
    /// Directory holding the trained model
    #[arg(long)]
    model_dir: Option<PathBuf>,
    /// Directory for predictions and reports
    #[arg(long)]
    report_dir: Option<PathBuf>,
    /// Directory for run state, events, and the run manifest
    #[arg(long)]
    run_dir: Option<PathBuf>,
    /// Embedding provider id
    #[arg(long)]
    provider: Option<String>,
    /// Embedding dimension per segment
    #[arg(long)]
    dimension: Option<usize>,
    /// Exemplars retrieved per query
    #[arg(long)]
    k: Option<usize>,
    /// Normalize each embedding segment before concatenation
    #[arg(long)]
    segment_norm: Option<bool>,
    /// Input configuration, e.g. "ocr+fcs+fcs-rag"
    #[arg(long)]
    inputs: Option<String>,
    /// Where decision thresholds come from: default, tuned, or explicit
    #[arg(long)]
    thresholds_source: Option<String>,
    /// Explicit per-class thresholds (implies --thresholds-source explicit)
    #[arg(long, value_delimiter = ',')]
    thresholds: Option<Vec<f64>>,
    /// Training seed
    #[arg(long)]
    seed: Option<u64>,
    /// Training epochs
    #[arg(long)]
    epochs: Option<usize>,
    /// Reasoning backend: scripted or http
    #[arg(long)]
    backend: Option<String>,
    /// Scripted backend response file (JSON map of meme id to output)
    #[arg(long)]
    script: Option<PathBuf>,
    /// HTTP backend endpoint URL
    #[arg(long)]
    endpoint: Option<String>,
    /// HTTP backend model name
    #[arg(long)]
    model: Option<String>,
    /// Environment variable holding the backend credential
    #[arg(long)]
    api_key_env: Option<String>,
}

#[derive(Args)]
struct StageArgs {
    #[command(flatten)]
    common: ConfigArgs,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    common: ConfigArgs,
    /// Predictions file; with --manifest and --task, evaluates directly
    /// without a config
    #[arg(long)]
    pred: Option<PathBuf>,
    /// Directory to write eval_report.json and eval_report.txt (direct mode)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: ConfigArgs,
    /// Directory holding the three retrieval indexes (direct mode)
    #[arg(long)]
    indices: Option<PathBuf>,
    /// Training spec file, TOML or JSON (direct mode; defaults apply)
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Directory to write ablation.jsonl, ablation.txt, ablation.csv
    /// (direct mode)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run the eight configurations on worker threads. Results are
    /// identical to the sequential order
    #[arg(long)]
    parallel: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory containing ablation.jsonl, or run directories that do
    #[arg(long)]
    runs: Option<PathBuf>,
    /// Run configuration file; its report dir is used when --runs is absent
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: ConfigArgs,
    /// Comma-separated subset of stages to run (default: all)
    #[arg(long, value_delimiter = ',')]
    stages: Option<Vec<String>>,
}

fn main() -> ExitCode {
    // Die quietly when a downstream pipe closes (e.g. `memesense report | head`)
    // instead of panicking on EPIPE.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest(args) => stage_command(&args.common, &[Stage::Ingest]),
        Command::Reason(args) => stage_command(&args.common, &[Stage::Reason]),
        Command::Index(args) => stage_command(&args.common, &[Stage::Index]),
        Command::Train(args) => stage_command(&args.common, &[Stage::Train]),
        Command::TuneThresholds(args) => stage_command(&args.common, &[Stage::TuneThresholds]),
        Command::Predict(args) => stage_command(&args.common, &[Stage::Predict]),
        Command::Evaluate(args) => evaluate_command(args),
        Command::Ablate(args) => ablate_command(args),
        Command::Report(args) => report_command(args),
        Command::Run(args) => run_command(args),
    }
}

fn run_command(args: RunArgs) -> Result<()> {
    let stages = match &args.stages {
        None => Stage::ALL.to_vec(),
        Some(names) => names
            .iter()
            .map(|n| n.parse::<Stage>().map_err(|e| anyhow!("{e}")))
            .collect::<Result<Vec<_>>>()?,
    };
    stage_command(&args.common, &stages)
}

fn stage_command(common: &ConfigArgs, stages: &[Stage]) -> Result<()> {
    let config = resolve_config(common)?;
    if common.dry_run {
        print_plan(&config, stages)?;
        return Ok(());
    }
    let manifest = run_pipeline(&config, stages, &CliBackendFactory)?;
    for record in &manifest.stages {
        let status = match record.status {
            StageStatus::Done => "done",
            StageStatus::Skipped => "skipped",
            StageStatus::Failed => "failed",
        };
        if record.note.is_empty() {
            println!("{}: {status}", record.stage);
        } else {
            println!("{}: {status} ({})", record.stage, record.note);
        }
    }
    Ok(())
}

fn print_plan(config: &RunConfig, stages: &[Stage]) -> Result<()> {
    let ordered = plan_stages(config, stages)?;
    println!("plan (config fingerprint {})", config.fingerprint());
    let mut earlier: Vec<Stage> = Vec::new();
    for (i, stage) in ordered.iter().enumerate() {
        println!("{}. {stage}", i + 1);
        for (path, producer) in stage_inputs(*stage, config) {
            let origin = match producer {
                Some(p) if earlier.contains(&p) => format!("from {p}"),
                _ if path.exists() => "existing".to_string(),
                Some(p) => format!("from {p}, missing"),
                None => "missing".to_string(),
            };
            println!("     reads  {} ({origin})", path.display());
        }
        for path in stage_outputs(*stage, config) {
            println!("     writes {}", path.display());
        }
        earlier.push(*stage);
    }
    Ok(())
}

fn evaluate_command(args: EvaluateArgs) -> Result<()> {
    let Some(pred) = &args.pred else {
        return stage_command(&args.common, &[Stage::Evaluate]);
    };
    let manifest_path = args
        .common
        .manifest
        .as_ref()
        .ok_or_else(|| anyhow!("--pred needs --manifest"))?;
    let task = args
        .common
        .task
        .ok_or_else(|| anyhow!("--pred needs --task"))?;
    let schema = LabelSchema::for_task(task);
    let corpus = ingest_manifest(manifest_path, &schema)
        .with_context(|| format!("reading {}", manifest_path.display()))?;
    let (header, predictions) =
        load_predictions(pred).with_context(|| format!("reading {}", pred.display()))?;
    if header.task_id != task {
        bail!(
            "predictions were made for task {}, not {task}",
            header.task_id
        );
    }
    let report = evalsuite::score(
        &predictions,
        &corpus,
        header.config,
        &header.model_fingerprint,
    )?;
    let text = evalsuite::render_report(&report);
    print!("{text}");
    if let Some(dir) = &args.out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(
            dir.join("eval_report.json"),
            serde_json::to_string_pretty(&report)?,
        )?;
        std::fs::write(dir.join("eval_report.txt"), text)?;
        println!("wrote {}", dir.join("eval_report.json").display());
    }
    Ok(())
}

fn ablate_command(args: AblateArgs) -> Result<()> {
    let Some(out) = &args.out else {
        if args.indices.is_some() || args.spec.is_some() {
            bail!("--indices and --spec apply to direct mode, which needs --out");
        }
        return stage_command(&args.common, &[Stage::Ablate]);
    };
    let common = &args.common;
    let task = common.task.ok_or_else(|| anyhow!("--out needs --task"))?;
    let manifest_path = common
        .manifest
        .as_ref()
        .ok_or_else(|| anyhow!("--out needs --manifest"))?;
    let cache_path = common
        .cache
        .as_ref()
        .ok_or_else(|| anyhow!("--out needs --cache"))?;
    let indices_dir = args
        .indices
        .as_ref()
        .ok_or_else(|| anyhow!("--out needs --indices"))?;

    let schema = LabelSchema::for_task(task);
    let corpus = ingest_manifest(manifest_path, &schema)
        .with_context(|| format!("reading {}", manifest_path.display()))?;
    if !cache_path.exists() {
        bail!("reasoning cache {} does not exist", cache_path.display());
    }
    let cache = ReasoningCache::open(cache_path)?;
    let provider_id = common.provider.as_deref().unwrap_or("tokenhash");
    let dimension = common.dimension.unwrap_or(64);
    let provider = make_provider(provider_id, dimension)?;
    let mut indices = IndexSet::default();
    for mode in [IndexMode::Ocr, IndexMode::Fcs, IndexMode::Concat] {
        let path = indices_dir.join(format!("{mode}.idx"));
        indices.insert(load_index(&path).with_context(|| format!("loading {}", path.display()))?);
    }
    let spec = match &args.spec {
        Some(path) => load_training_spec(path)?,
        None => TrainingSpec::default(),
    };
    let k = common.k.unwrap_or(2);

    let reports = evalsuite::run_ablation(
        &corpus,
        &cache,
        &indices,
        provider.as_ref(),
        &spec,
        k,
        args.parallel,
    )?;
    std::fs::create_dir_all(out)?;
    evalsuite::save_reports(&reports, &out.join("ablation.jsonl"))?;
    let table = evalsuite::render_comparison(&reports);
    std::fs::write(out.join("ablation.txt"), &table)?;
    std::fs::write(out.join("ablation.csv"), evalsuite::comparison_csv(&reports))?;
    print!("{table}");
    println!("wrote {}", out.join("ablation.jsonl").display());
    Ok(())
}

fn load_training_spec(path: &Path) -> Result<TrainingSpec> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let spec = if path.extension().is_some_and(|e| e == "toml") {
        toml::from_str(&text)?
    } else {
        serde_json::from_str(&text)?
    };
    Ok(spec)
}

fn report_command(args: ReportArgs) -> Result<()> {
    let runs = match (&args.runs, &args.config) {
        (Some(dir), _) => dir.clone(),
        (None, Some(config_path)) => RunConfig::load(config_path)?.paths.report_dir,
        (None, None) => bail!("report needs --runs or --config"),
    };
    let mut found = Vec::new();
    let direct = runs.join("ablation.jsonl");
    if direct.exists() {
        found.push(direct);
    }
    for entry in std::fs::read_dir(&runs)
        .with_context(|| format!("reading {}", runs.display()))?
    {
        let candidate = entry?.path().join("ablation.jsonl");
        if candidate.exists() {
            found.push(candidate);
        }
    }
    found.sort();
    if found.is_empty() {
        bail!("no ablation.jsonl under {}", runs.display());
    }
    for path in found {
        let reports = evalsuite::load_reports(&path)?;
        println!("{}", path.display());
        print!("{}", evalsuite::render_comparison(&reports));
        let csv_path = path.with_file_name("comparison.csv");
        std::fs::write(&csv_path, evalsuite::comparison_csv(&reports))?;
        println!("wrote {}\n", csv_path.display());
    }
    Ok(())
}

fn resolve_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut config = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            toml::from_str::<RunConfig>(&text)
                .with_context(|| format!("parsing {}", path.display()))?
        }
        None => {
            let task = args
                .task
                .ok_or_else(|| anyhow!("either --config or --task is required"))?;
            default_config(task)
        }
    };
    // Precedence: flags beat the environment, which beats the file.
    if let Ok(dir) = std::env::var(CACHE_DIR_ENV) {
        if !dir.is_empty() {
            let name = config
                .paths
                .cache
                .file_name()
                .map(|n| n.to_os_string())
                .unwrap_or_else(|| "reasoning_cache.jsonl".into());
            config.paths.cache = PathBuf::from(dir).join(name);
        }
    }
    apply_overrides(&mut config, args)?;
    config.validate()?;
    Ok(config)
}

fn default_config(task: TaskId) -> RunConfig {
    RunConfig {
        task,
        paths: RunPaths {
            source: None,
            manifest: PathBuf::from("manifest.jsonl"),
            cache: PathBuf::from("reasoning_cache.jsonl"),
            index_dir: PathBuf::from("indexes"),
            model_dir: PathBuf::from("model"),
            report_dir: PathBuf::from("reports"),
            run_dir: PathBuf::from("run"),
        },
        reasoner: Default::default(),
        embedding: Default::default(),
        retrieval: Default::default(),
        inputs: AblationConfig::full(),
        thresholds: Default::default(),
        training: TrainingSpec::default(),
    }
}

fn apply_overrides(config: &mut RunConfig, args: &ConfigArgs) -> Result<()> {
    if let Some(task) = args.task {
        config.task = task;
    }
    if let Some(v) = &args.source {
        config.paths.source = Some(v.clone());
    }
    if let Some(v) = &args.manifest {
        config.paths.manifest = v.clone();
    }
    if let Some(v) = &args.cache {
        config.paths.cache = v.clone();
    }
    if let Some(v) = &args.index_dir {
        config.paths.index_dir = v.clone();
    }
    if let Some(v) = &args.model_dir {
        config.paths.model_dir = v.clone();
    }
    if let Some(v) = &args.report_dir {
        config.paths.report_dir = v.clone();
    }
    if let Some(v) = &args.run_dir {
        config.paths.run_dir = v.clone();
    }
    if let Some(v) = &args.provider {
        config.embedding.provider = v.clone();
    }
    if let Some(v) = args.dimension {
        config.embedding.dimension = v;
    }
    if let Some(v) = args.k {
        config.retrieval.k = v;
    }
    if let Some(v) = args.segment_norm {
        config.retrieval.segment_norm = v;
    }
    if let Some(v) = &args.inputs {
        config.inputs = v.parse::<AblationConfig>().map_err(|e| anyhow!("{e}"))?;
    }
    if let Some(v) = &args.thresholds_source {
        config.thresholds.source = match v.as_str() {
            "default" => ThresholdSource::Default,
            "tuned" => ThresholdSource::Tuned,
            "explicit" => ThresholdSource::Explicit,
            other => bail!("unknown thresholds source {other:?}"),
        };
    }
    if let Some(v) = &args.thresholds {
        config.thresholds = ThresholdSettings {
            source: ThresholdSource::Explicit,
            values: Some(v.clone()),
        };
    }
    if let Some(v) = args.seed {
        config.training.seed = v;
    }
    if let Some(v) = args.epochs {
        config.training.epochs = v;
    }
    if let Some(v) = &args.backend {
        config.reasoner.backend = v.clone();
    }
    if let Some(v) = &args.script {
        config.reasoner.script = Some(v.clone());
    }
    if let Some(v) = &args.endpoint {
        config.reasoner.endpoint = Some(v.clone());
    }
    if let Some(v) = &args.model {
        config.reasoner.model = Some(v.clone());
    }
    if let Some(v) = &args.api_key_env {
        config.reasoner.api_key_env = Some(v.clone());
    }
    Ok(())
}
