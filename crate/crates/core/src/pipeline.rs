//! Run orchestration: one config file drives ingest through ablation.
//!
//! Stages form a fixed dependency chain. Each stage declares its input
//! and output artifacts; before anything executes, the runner checks that
//! every input either exists on disk or is produced by an earlier
//! requested stage. A stage whose inputs, config, and outputs all match
//! its recorded state is skipped. Outputs a failed stage created are
//! renamed with a quarantine suffix so later runs never consume them.
//!
//! The event log carries sequence numbers only; wall-clock times live in
//! the run manifest alone, keeping every other artifact byte-stable
//! across identical runs.

use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::classifier::{
    self, load_artifact, load_predictions, predict, save_artifact, save_predictions,
    tune_thresholds_from_val, update_thresholds, AblationConfig, IndexSet, PredictionHeader,
    TrainingSpec,
};
use crate::corpus::{ingest_manifest, save_manifest, CorpusManifest, DecisionMode, LabelSchema, Split, TaskId};
use crate::evalsuite;
use crate::fusion::{build_index, load_index, make_provider, save_index, IndexMode};
use crate::reasoner::{Reasoner, ReasonerConfig, ReasoningBackend, ReasoningCache, TemplateId};
use crate::text::fingerprint;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Ingest,
    Reason,
    Index,
    Train,
    TuneThresholds,
    Predict,
    Evaluate,
    Ablate,
}

impl Stage {
    /// Canonical execution order.
    pub const ALL: [Stage; 8] = [
        Stage::Ingest,
        Stage::Reason,
        Stage::Index,
        Stage::Train,
        Stage::TuneThresholds,
        Stage::Predict,
        Stage::Evaluate,
        Stage::Ablate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Reason => "reason",
            Stage::Index => "index",
            Stage::Train => "train",
            Stage::TuneThresholds => "tune-thresholds",
            Stage::Predict => "predict",
            Stage::Evaluate => "evaluate",
            Stage::Ablate => "ablate",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Stage {
    type Err = PipelineError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|stage| stage.name() == s)
            .ok_or_else(|| PipelineError::ConfigInvalid(format!("unknown stage {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunPaths {
    /// Raw record lines to ingest. Optional when the manifest already
    /// exists.
    pub source: Option<PathBuf>,
    pub manifest: PathBuf,
    pub cache: PathBuf,
    pub index_dir: PathBuf,
    pub model_dir: PathBuf,
    pub report_dir: PathBuf,
    pub run_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReasonerSettings {
    /// Backend kind, resolved by the backend factory ("scripted", "http").
    pub backend: String,
    /// Reasoning template; defaults to the task's template.
    pub template: Option<TemplateId>,
    pub max_in_flight: usize,
    pub max_retries: usize,
    pub timeout_secs: u64,
    /// Scripted backend: JSON map of meme id to raw output.
    pub script: Option<PathBuf>,
    /// HTTP backend: endpoint URL and model name.
    pub endpoint: Option<String>,
    pub model: Option<String>,
    /// Name of the environment variable holding the API credential. The
    /// value is read at request time and never written to any artifact.
    pub api_key_env: Option<String>,
}

impl Default for ReasonerSettings {
    fn default() -> Self {
        ReasonerSettings {
            backend: "scripted".to_string(),
            template: None,
            max_in_flight: 1,
            max_retries: 2,
            timeout_secs: 60,
            script: None,
            endpoint: None,
            model: None,
            api_key_env: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbeddingSettings {
    pub provider: String,
    pub dimension: usize,
}

impl Default for EmbeddingSettings {
    fn default() -> Self {
        EmbeddingSettings {
            provider: "tokenhash".to_string(),
            dimension: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalSettings {
    pub k: usize,
    pub segment_norm: bool,
}

impl Default for RetrievalSettings {
    fn default() -> Self {
        RetrievalSettings {
            k: 2,
            segment_norm: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdSource {
    Default,
    Tuned,
    Explicit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ThresholdSettings {
    pub source: ThresholdSource,
    pub values: Option<Vec<f64>>,
}

impl Default for ThresholdSettings {
    fn default() -> Self {
        ThresholdSettings {
            source: ThresholdSource::Tuned,
            values: None,
        }
    }
}

fn default_inputs() -> AblationConfig {
    AblationConfig::full()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub task: TaskId,
    pub paths: RunPaths,
    #[serde(default)]
    pub reasoner: ReasonerSettings,
    #[serde(default)]
    pub embedding: EmbeddingSettings,
    #[serde(default)]
    pub retrieval: RetrievalSettings,
    /// Input sources for the train and predict stages.
    #[serde(default = "default_inputs")]
    pub inputs: AblationConfig,
    #[serde(default)]
    pub thresholds: ThresholdSettings,
    #[serde(default)]
    pub training: TrainingSpec,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            PipelineError::ConfigInvalid(format!("cannot read {}: {e}", path.display()))
        })?;
        let config: RunConfig = toml::from_str(&text)
            .map_err(|e| PipelineError::ConfigInvalid(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Stable hash of the fully resolved config.
    pub fn fingerprint(&self) -> String {
        fingerprint(&[&self.to_toml()])
    }

    pub fn schema(&self) -> LabelSchema {
        LabelSchema::for_task(self.task)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.inputs
            .validate()
            .map_err(|e| PipelineError::ConfigInvalid(e.to_string()))?;
        if self.retrieval.k == 0 {
            return Err(PipelineError::ConfigInvalid(
                "retrieval k must be at least 1".to_string(),
            ));
        }
        if self.embedding.dimension == 0 {
            return Err(PipelineError::ConfigInvalid(
                "embedding dimension must be positive".to_string(),
            ));
        }
        make_provider(&self.embedding.provider, self.embedding.dimension)
            .map_err(|e| PipelineError::ConfigInvalid(e.to_string()))?;
        let t = &self.training;
        if t.epochs == 0 || t.batch_size == 0 || t.encoder_dim == 0 || t.encoder_vocab == 0 {
            return Err(PipelineError::ConfigInvalid(
                "training epochs, batch size, encoder dim, and vocab must be positive"
                    .to_string(),
            ));
        }
        let schema = self.schema();
        match self.thresholds.source {
            ThresholdSource::Explicit => {
                if schema.decision_mode != DecisionMode::Multilabel {
                    return Err(PipelineError::ConfigInvalid(
                        "explicit thresholds apply to multilabel tasks only".to_string(),
                    ));
                }
                let values = self.thresholds.values.as_deref().unwrap_or(&[]);
                if values.len() != schema.label_count() {
                    return Err(PipelineError::ConfigInvalid(format!(
                        "expected {} explicit thresholds, got {}",
                        schema.label_count(),
                        values.len()
                    )));
                }
                if values.iter().any(|&v| !(v > 0.0 && v < 1.0)) {
                    return Err(PipelineError::ConfigInvalid(
                        "explicit thresholds must lie strictly inside (0,1)".to_string(),
                    ));
                }
            }
            ThresholdSource::Default | ThresholdSource::Tuned => {}
        }
        if let Some(template) = self.reasoner.template {
            if template.task() != self.task {
                return Err(PipelineError::ConfigInvalid(format!(
                    "template {template} does not belong to task {}",
                    self.task
                )));
            }
        }
        Ok(())
    }

    fn index_path(&self, mode: IndexMode) -> PathBuf {
        self.paths.index_dir.join(format!("{mode}.idx"))
    }

    fn predictions_path(&self) -> PathBuf {
        self.paths.report_dir.join("predictions.jsonl")
    }
}

/// Builds reasoning backends from settings. Keeps transports out of this
/// crate: callers supply HTTP or test doubles.
pub trait BackendFactory {
    fn create(
        &self,
        settings: &ReasonerSettings,
    ) -> Result<Box<dyn ReasoningBackend>, PipelineError>;
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config invalid: {0}")]
    ConfigInvalid(String),
    #[error("stage {stage} must run first")]
    StageInputMissing { stage: &'static str },
    #[error("stage {stage} failed")]
    StageFailed {
        stage: &'static str,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

fn stage_failed(
    stage: Stage,
    err: impl std::error::Error + Send + Sync + 'static,
) -> PipelineError {
    PipelineError::StageFailed {
        stage: stage.name(),
        source: Box::new(err),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Done,
    Skipped,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub status: StageStatus,
    pub outputs: Vec<String>,
    pub fingerprint: String,
    #[serde(default)]
    pub note: String,
}

/// Written to the run directory after every run. The only artifact that
/// carries wall-clock times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_fingerprint: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub stages: Vec<StageRecord>,
}

/// Line-delimited run log. Lines carry a sequence number, never a
/// timestamp, so log diffs between identical runs stay meaningful.
struct EventLog {
    file: std::fs::File,
    seq: u64,
    redact_env: Option<String>,
}

#[derive(Serialize)]
struct EventLine<'a> {
    seq: u64,
    stage: &'a str,
    event: &'a str,
    detail: &'a str,
}

impl EventLog {
    fn create(run_dir: &Path, redact_env: Option<String>) -> Result<Self, std::io::Error> {
        std::fs::create_dir_all(run_dir)?;
        let file = std::fs::File::create(run_dir.join("events.jsonl"))?;
        Ok(EventLog {
            file,
            seq: 0,
            redact_env,
        })
    }

    fn emit(&mut self, stage: &str, event: &str, detail: &str) {
        self.seq += 1;
        let sanitized = self.redact(detail);
        let line = EventLine {
            seq: self.seq,
            stage,
            event,
            detail: &sanitized,
        };
        if let Ok(json) = serde_json::to_string(&line) {
            let _ = writeln!(self.file, "{json}");
        }
    }

    /// Strips the credential value from any detail string, should a
    /// wrapped error ever embed it.
    fn redact(&self, detail: &str) -> String {
        if let Some(var) = &self.redact_env {
            if let Ok(secret) = std::env::var(var) {
                if !secret.is_empty() && detail.contains(&secret) {
                    return detail.replace(&secret, "[redacted]");
                }
            }
        }
        detail.to_string()
    }
}

/// (artifact, producing stage). A `None` producer marks an external input
/// that must simply exist.
pub fn stage_inputs(stage: Stage, config: &RunConfig) -> Vec<(PathBuf, Option<Stage>)> {
    let manifest = (config.paths.manifest.clone(), Some(Stage::Ingest));
    let cache = (config.paths.cache.clone(), Some(Stage::Reason));
    let weights = (
        config.paths.model_dir.join("weights.json"),
        Some(Stage::Train),
    );
    let all_indexes = || {
        [IndexMode::Ocr, IndexMode::Fcs, IndexMode::Concat]
            .into_iter()
            .map(|m| (config.index_path(m), Some(Stage::Index)))
    };
    let assembly_extras = |out: &mut Vec<(PathBuf, Option<Stage>)>| {
        if config.inputs.use_fcs {
            out.push(cache.clone());
        }
        if let Some(mode) = config.inputs.retrieval_mode() {
            out.push((config.index_path(mode), Some(Stage::Index)));
        }
    };
    match stage {
        Stage::Ingest => config
            .paths
            .source
            .iter()
            .map(|p| (p.clone(), None))
            .collect(),
        Stage::Reason => vec![manifest],
        Stage::Index => vec![manifest, cache],
        Stage::Train => {
            let mut v = vec![manifest];
            assembly_extras(&mut v);
            v
        }
        Stage::TuneThresholds => {
            let mut v = vec![manifest, weights];
            assembly_extras(&mut v);
            v
        }
        Stage::Predict => {
            let mut v = vec![manifest, weights];
            assembly_extras(&mut v);
            v
        }
        Stage::Evaluate => vec![manifest, (config.predictions_path(), Some(Stage::Predict))],
        Stage::Ablate => {
            let mut v = vec![manifest, cache];
            v.extend(all_indexes());
            v
        }
    }
}

pub fn stage_outputs(stage: Stage, config: &RunConfig) -> Vec<PathBuf> {
    match stage {
        Stage::Ingest => vec![config.paths.manifest.clone()],
        Stage::Reason => vec![config.paths.cache.clone()],
        Stage::Index => [IndexMode::Ocr, IndexMode::Fcs, IndexMode::Concat]
            .into_iter()
            .map(|m| config.index_path(m))
            .collect(),
        Stage::Train => [
            "weights.json",
            "schema.json",
            "config.json",
            "thresholds.json",
            "fingerprint.txt",
            "training_log.jsonl",
        ]
        .iter()
        .map(|f| config.paths.model_dir.join(f))
        .collect(),
        Stage::TuneThresholds => vec![config.paths.model_dir.join("thresholds.json")],
        Stage::Predict => vec![config.predictions_path()],
        Stage::Evaluate => vec![
            config.paths.report_dir.join("eval_report.json"),
            config.paths.report_dir.join("eval_report.txt"),
        ],
        Stage::Ablate => vec![
            config.paths.report_dir.join("ablation.jsonl"),
            config.paths.report_dir.join("ablation.txt"),
            config.paths.report_dir.join("ablation.csv"),
        ],
    }
}

fn hash_file(path: &Path) -> Result<String, std::io::Error> {
    let bytes = std::fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hex::encode(hasher.finalize()))
}

fn quarantine_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".quarantined");
    path.with_file_name(name)
}

/// Orders and validates the requested stages against the artifacts on
/// disk. Returns the stages in execution order without running anything.
pub fn plan_stages(
    config: &RunConfig,
    requested: &[Stage],
) -> Result<Vec<Stage>, PipelineError> {
    config.validate()?;
    let requested: BTreeSet<Stage> = requested.iter().copied().collect();
    let ordered: Vec<Stage> = Stage::ALL
        .into_iter()
        .filter(|s| requested.contains(s))
        .collect();
    let mut will_produce: BTreeSet<Stage> = BTreeSet::new();
    for &stage in &ordered {
        for (path, producer) in stage_inputs(stage, config) {
            if path.exists() {
                continue;
            }
            match producer {
                Some(p) if will_produce.contains(&p) => {}
                Some(p) => {
                    return Err(PipelineError::StageInputMissing { stage: p.name() })
                }
                None => {
                    return Err(PipelineError::ConfigInvalid(format!(
                        "input {} does not exist",
                        path.display()
                    )))
                }
            }
        }
        if stage == Stage::Ingest
            && config.paths.source.is_none()
            && !config.paths.manifest.exists()
        {
            return Err(PipelineError::ConfigInvalid(
                "ingest needs either a source path or an existing manifest".to_string(),
            ));
        }
        will_produce.insert(stage);
    }
    Ok(ordered)
}

/// Executes the requested stages in dependency order. See the module docs
/// for skip and quarantine behavior.
pub fn run_pipeline(
    config: &RunConfig,
    requested: &[Stage],
    factory: &dyn BackendFactory,
) -> Result<RunManifest, PipelineError> {
    let ordered = plan_stages(config, requested)?;
    let config_fp = config.fingerprint();
    std::fs::create_dir_all(&config.paths.run_dir)?;
    std::fs::write(
        config.paths.run_dir.join("fingerprint.txt"),
        &config_fp,
    )?;
    let state_dir = config.paths.run_dir.join("state");
    std::fs::create_dir_all(&state_dir)?;
    let mut events = EventLog::create(
        &config.paths.run_dir,
        config.reasoner.api_key_env.clone(),
    )?;

    let mut manifest = RunManifest {
        config_fingerprint: config_fp.clone(),
        started_unix: now_unix(),
        finished_unix: 0,
        stages: Vec::new(),
    };

    for stage in ordered {
        let outputs = stage_outputs(stage, config);
        let stage_fp = stage_fingerprint(stage, config, &config_fp)?;
        let state_path = state_dir.join(format!("{}.json", stage.name()));
        if let Some(previous) = read_state(&state_path) {
            if previous == stage_fp && outputs.iter().all(|p| p.exists()) {
                events.emit(stage.name(), "skipped", "outputs current");
                manifest.stages.push(StageRecord {
                    stage,
                    status: StageStatus::Skipped,
                    outputs: paths_to_strings(&outputs),
                    fingerprint: stage_fp,
                    note: String::new(),
                });
                continue;
            }
        }
        events.emit(stage.name(), "started", "");
        let pre_existing: BTreeSet<PathBuf> =
            outputs.iter().filter(|p| p.exists()).cloned().collect();
        match execute_stage(stage, config, factory, &mut events) {
            Ok(note) => {
                // Hash inputs now: earlier stages in this run may have
                // produced files that were absent during planning.
                let stage_fp = stage_fingerprint(stage, config, &config_fp)?;
                std::fs::write(&state_path, &stage_fp)?;
                events.emit(stage.name(), "done", &note);
                manifest.stages.push(StageRecord {
                    stage,
                    status: StageStatus::Done,
                    outputs: paths_to_strings(&outputs),
                    fingerprint: stage_fp,
                    note,
                });
            }
            Err(err) => {
                let mut quarantined = Vec::new();
                for out in &outputs {
                    if out.exists() && !pre_existing.contains(out) {
                        let q = quarantine_path(out);
                        if std::fs::rename(out, &q).is_ok() {
                            quarantined.push(q.display().to_string());
                        }
                    }
                }
                if !quarantined.is_empty() {
                    events.emit(stage.name(), "quarantined", &quarantined.join(", "));
                }
                events.emit(stage.name(), "failed", &err.to_string());
                manifest.stages.push(StageRecord {
                    stage,
                    status: StageStatus::Failed,
                    outputs: Vec::new(),
                    fingerprint: String::new(),
                    note: err.to_string(),
                });
                manifest.finished_unix = now_unix();
                write_run_manifest(config, &manifest)?;
                return Err(err);
            }
        }
    }
    manifest.finished_unix = now_unix();
    write_run_manifest(config, &manifest)?;
    Ok(manifest)
}

fn paths_to_strings(paths: &[PathBuf]) -> Vec<String> {
    paths.iter().map(|p| p.display().to_string()).collect()
}

fn write_run_manifest(
    config: &RunConfig,
    manifest: &RunManifest,
) -> Result<(), std::io::Error> {
    let data = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    std::fs::write(config.paths.run_dir.join("run_manifest.json"), data)
}

fn read_state(path: &Path) -> Option<String> {
    std::fs::read_to_string(path).ok().map(|s| s.trim().to_string())
}

fn now_unix() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Config hash + stage name + content hashes of every existing input.
fn stage_fingerprint(
    stage: Stage,
    config: &RunConfig,
    config_fp: &str,
) -> Result<String, std::io::Error> {
    let mut parts: Vec<String> = vec![config_fp.to_string(), stage.name().to_string()];
    for (path, _) in stage_inputs(stage, config) {
        if path.exists() {
            parts.push(hash_file(&path)?);
        } else {
            parts.push("absent".to_string());
        }
    }
    let refs: Vec<&str> = parts.iter().map(String::as_str).collect();
    Ok(fingerprint(&refs))
}

fn execute_stage(
    stage: Stage,
    config: &RunConfig,
    factory: &dyn BackendFactory,
    events: &mut EventLog,
) -> Result<String, PipelineError> {
    match stage {
        Stage::Ingest => stage_ingest(config),
        Stage::Reason => stage_reason(config, factory, events),
        Stage::Index => stage_index(config),
        Stage::Train => stage_train(config),
        Stage::TuneThresholds => stage_tune(config),
        Stage::Predict => stage_predict(config),
        Stage::Evaluate => stage_evaluate(config),
        Stage::Ablate => stage_ablate(config),
    }
}

fn load_corpus(config: &RunConfig, stage: Stage) -> Result<CorpusManifest, PipelineError> {
    ingest_manifest(&config.paths.manifest, &config.schema())
        .map_err(|e| stage_failed(stage, e))
}

fn load_index_set(
    config: &RunConfig,
    modes: &[IndexMode],
    stage: Stage,
) -> Result<IndexSet, PipelineError> {
    let mut set = IndexSet::default();
    for &mode in modes {
        set.insert(load_index(&config.index_path(mode)).map_err(|e| stage_failed(stage, e))?);
    }
    Ok(set)
}

fn stage_ingest(config: &RunConfig) -> Result<String, PipelineError> {
    let schema = config.schema();
    let manifest = match &config.paths.source {
        Some(source) => {
            ingest_manifest(source, &schema).map_err(|e| stage_failed(Stage::Ingest, e))?
        }
        None => ingest_manifest(&config.paths.manifest, &schema)
            .map_err(|e| stage_failed(Stage::Ingest, e))?,
    };
    if !manifest.is_complete() {
        return Err(stage_failed(
            Stage::Ingest,
            std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                "corpus is missing at least one split",
            ),
        ));
    }
    save_manifest(&manifest, &config.paths.manifest)?;
    Ok(format!("{} instances", manifest.instances.len()))
}

fn stage_reason(
    config: &RunConfig,
    factory: &dyn BackendFactory,
    events: &mut EventLog,
) -> Result<String, PipelineError> {
    let corpus = load_corpus(config, Stage::Reason)?;
    let backend = factory.create(&config.reasoner)?;
    let template = config
        .reasoner
        .template
        .unwrap_or_else(|| TemplateId::for_task(config.task));
    let mut reasoner_config = ReasonerConfig::new(backend.id(), template);
    reasoner_config.max_in_flight = config.reasoner.max_in_flight;
    reasoner_config.max_retries = config.reasoner.max_retries;
    reasoner_config.timeout_secs = config.reasoner.timeout_secs;
    let reasoner =
        Reasoner::new(backend.as_ref(), reasoner_config).map_err(|e| stage_failed(Stage::Reason, e))?;
    let mut cache =
        ReasoningCache::open(&config.paths.cache).map_err(|e| stage_failed(Stage::Reason, e))?;
    let before = cache.len();
    let records = reasoner
        .generate_all(&corpus.instances, &mut cache)
        .map_err(|e| stage_failed(Stage::Reason, e))?;
    events.emit(
        Stage::Reason.name(),
        "cache",
        &format!("{} records, {} new", records.len(), cache.len() - before),
    );
    Ok(format!("{} records", records.len()))
}

fn stage_index(config: &RunConfig) -> Result<String, PipelineError> {
    let corpus = load_corpus(config, Stage::Index)?;
    let cache =
        ReasoningCache::open(&config.paths.cache).map_err(|e| stage_failed(Stage::Index, e))?;
    let provider = make_provider(&config.embedding.provider, config.embedding.dimension)
        .map_err(|e| stage_failed(Stage::Index, e))?;
    for mode in [IndexMode::Ocr, IndexMode::Fcs, IndexMode::Concat] {
        let index = build_index(
            &corpus,
            &cache,
            mode,
            provider.as_ref(),
            Split::Train,
            config.retrieval.segment_norm,
        )
        .map_err(|e| stage_failed(Stage::Index, e))?;
        save_index(&index, &config.index_path(mode))
            .map_err(|e| stage_failed(Stage::Index, e))?;
    }
    Ok("3 indexes".to_string())
}

fn stage_train(config: &RunConfig) -> Result<String, PipelineError> {
    let corpus = load_corpus(config, Stage::Train)?;
    let cache =
        ReasoningCache::open(&config.paths.cache).map_err(|e| stage_failed(Stage::Train, e))?;
    let provider = make_provider(&config.embedding.provider, config.embedding.dimension)
        .map_err(|e| stage_failed(Stage::Train, e))?;
    let modes: Vec<IndexMode> = config.inputs.retrieval_mode().into_iter().collect();
    let indices = load_index_set(config, &modes, Stage::Train)?;
    let outcome = classifier::train(
        &corpus,
        Some(&cache),
        &indices,
        Some(provider.as_ref()),
        config.inputs,
        &config.training,
        config.retrieval.k,
    )
    .map_err(|e| stage_failed(Stage::Train, e))?;
    save_artifact(&outcome.artifact, &outcome.log, &config.paths.model_dir)
        .map_err(|e| stage_failed(Stage::Train, e))?;
    let last = outcome.log.last().map(|l| l.val_macro_f1).unwrap_or(0.0);
    Ok(format!("val macro-F1 {last:.4}"))
}

fn stage_tune(config: &RunConfig) -> Result<String, PipelineError> {
    let schema = config.schema();
    if schema.decision_mode != DecisionMode::Multilabel {
        return Ok("noop: multiclass task".to_string());
    }
    match config.thresholds.source {
        ThresholdSource::Default => Ok("noop: thresholds source is default".to_string()),
        ThresholdSource::Explicit => {
            let values = config
                .thresholds
                .values
                .clone()
                .expect("validated at config load");
            update_thresholds(&config.paths.model_dir, &values)
                .map_err(|e| stage_failed(Stage::TuneThresholds, e))?;
            Ok("explicit thresholds written".to_string())
        }
        ThresholdSource::Tuned => {
            let corpus = load_corpus(config, Stage::TuneThresholds)?;
            let cache = ReasoningCache::open(&config.paths.cache)
                .map_err(|e| stage_failed(Stage::TuneThresholds, e))?;
            let provider =
                make_provider(&config.embedding.provider, config.embedding.dimension)
                    .map_err(|e| stage_failed(Stage::TuneThresholds, e))?;
            let modes: Vec<IndexMode> = config.inputs.retrieval_mode().into_iter().collect();
            let indices = load_index_set(config, &modes, Stage::TuneThresholds)?;
            let artifact = load_artifact(&config.paths.model_dir)
                .map_err(|e| stage_failed(Stage::TuneThresholds, e))?;
            let val_inputs = classifier::assemble_split_inputs(
                &corpus,
                Split::Val,
                Some(&cache),
                &indices,
                Some(provider.as_ref()),
                config.inputs,
                &schema,
                config.retrieval.k,
                config.training.max_seq_len,
            )
            .map_err(|e| stage_failed(Stage::TuneThresholds, e))?;
            let taus = tune_thresholds_from_val(&artifact, &val_inputs, &corpus)
                .map_err(|e| stage_failed(Stage::TuneThresholds, e))?;
            update_thresholds(&config.paths.model_dir, &taus)
                .map_err(|e| stage_failed(Stage::TuneThresholds, e))?;
            Ok(format!("tuned {} thresholds", taus.len()))
        }
    }
}

fn stage_predict(config: &RunConfig) -> Result<String, PipelineError> {
    let corpus = load_corpus(config, Stage::Predict)?;
    let cache =
        ReasoningCache::open(&config.paths.cache).map_err(|e| stage_failed(Stage::Predict, e))?;
    let provider = make_provider(&config.embedding.provider, config.embedding.dimension)
        .map_err(|e| stage_failed(Stage::Predict, e))?;
    let modes: Vec<IndexMode> = config.inputs.retrieval_mode().into_iter().collect();
    let indices = load_index_set(config, &modes, Stage::Predict)?;
    let artifact =
        load_artifact(&config.paths.model_dir).map_err(|e| stage_failed(Stage::Predict, e))?;
    let schema = config.schema();
    let test_inputs = classifier::assemble_split_inputs(
        &corpus,
        Split::Test,
        Some(&cache),
        &indices,
        Some(provider.as_ref()),
        config.inputs,
        &schema,
        config.retrieval.k,
        config.training.max_seq_len,
    )
    .map_err(|e| stage_failed(Stage::Predict, e))?;
    let predictions = predict(&artifact, &test_inputs, None)
        .map_err(|e| stage_failed(Stage::Predict, e))?;
    let header = PredictionHeader {
        task_id: config.task,
        config: config.inputs,
        mode: schema.decision_mode,
        model_fingerprint: artifact.fingerprint.clone(),
    };
    save_predictions(&header, &predictions, &config.predictions_path())
        .map_err(|e| stage_failed(Stage::Predict, e))?;
    Ok(format!("{} predictions", predictions.len()))
}

fn stage_evaluate(config: &RunConfig) -> Result<String, PipelineError> {
    let corpus = load_corpus(config, Stage::Evaluate)?;
    let (header, predictions) = load_predictions(&config.predictions_path())
        .map_err(|e| stage_failed(Stage::Evaluate, e))?;
    let report = evalsuite::score(
        &predictions,
        &corpus,
        header.config,
        &header.model_fingerprint,
    )
    .map_err(|e| stage_failed(Stage::Evaluate, e))?;
    let json = serde_json::to_string_pretty(&report)
        .expect("report serializes");
    std::fs::create_dir_all(&config.paths.report_dir)?;
    std::fs::write(config.paths.report_dir.join("eval_report.json"), json)?;
    std::fs::write(
        config.paths.report_dir.join("eval_report.txt"),
        evalsuite::render_report(&report),
    )?;
    Ok(format!("macro-F1 {:.4}", report.macro_f1))
}

fn stage_ablate(config: &RunConfig) -> Result<String, PipelineError> {
    let corpus = load_corpus(config, Stage::Ablate)?;
    let cache =
        ReasoningCache::open(&config.paths.cache).map_err(|e| stage_failed(Stage::Ablate, e))?;
    let provider = make_provider(&config.embedding.provider, config.embedding.dimension)
        .map_err(|e| stage_failed(Stage::Ablate, e))?;
    let indices = load_index_set(
        config,
        &[IndexMode::Ocr, IndexMode::Fcs, IndexMode::Concat],
        Stage::Ablate,
    )?;
    let reports = evalsuite::run_ablation(
        &corpus,
        &cache,
        &indices,
        provider.as_ref(),
        &config.training,
        config.retrieval.k,
        false,
    )
    .map_err(|e| stage_failed(Stage::Ablate, e))?;
    evalsuite::save_reports(&reports, &config.paths.report_dir.join("ablation.jsonl"))?;
    std::fs::write(
        config.paths.report_dir.join("ablation.txt"),
        evalsuite::render_comparison(&reports),
    )?;
    std::fs::write(
        config.paths.report_dir.join("ablation.csv"),
        evalsuite::comparison_csv(&reports),
    )?;
    Ok(format!("{} rows", reports.len()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reasoner::ScriptedBackend;
    use crate::synthetic::{fixture_training_spec, synthetic_anxiety_corpus};

    struct FixtureFactory;

    impl BackendFactory for FixtureFactory {
        fn create(
            &self,
            _settings: &ReasonerSettings,
        ) -> Result<Box<dyn ReasoningBackend>, PipelineError> {
            let corpus = synthetic_anxiety_corpus(42);
            Ok(Box::new(ScriptedBackend::new(
                "scripted_fixture",
                corpus
                    .responses
                    .iter()
                    .map(|(k, v)| (k.as_str(), v.as_str())),
            )))
        }
    }

    fn fixture_config(root: &Path) -> RunConfig {
        RunConfig {
            task: TaskId::Anxiety,
            paths: RunPaths {
                source: Some(root.join("source.jsonl")),
                manifest: root.join("manifest.jsonl"),
                cache: root.join("reasoning.jsonl"),
                index_dir: root.join("indexes"),
                model_dir: root.join("model"),
                report_dir: root.join("reports"),
                run_dir: root.join("run"),
            },
            reasoner: ReasonerSettings::default(),
            embedding: EmbeddingSettings {
                provider: "tokenhash".to_string(),
                dimension: 32,
            },
            retrieval: RetrievalSettings::default(),
            inputs: AblationConfig::full(),
            thresholds: ThresholdSettings::default(),
            training: fixture_training_spec(42),
        }
    }

    fn write_fixture_source(root: &Path) {
        let corpus = synthetic_anxiety_corpus(42);
        crate::corpus::save_manifest(&corpus.manifest, &root.join("source.jsonl")).unwrap();
    }

    #[test]
    fn config_roundtrips_through_toml() {
        let dir = tempfile::tempdir().unwrap();
        let config = fixture_config(dir.path());
        let text = config.to_toml();
        let parsed: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(parsed, config);
        assert_eq!(parsed.fingerprint(), config.fingerprint());
    }

    #[test]
    fn plan_rejects_missing_producer() {
        let dir = tempfile::tempdir().unwrap();
        let config = fixture_config(dir.path());
        // Corpus present, predictions absent: evaluate needs predict.
        let corpus = synthetic_anxiety_corpus(42);
        crate::corpus::save_manifest(&corpus.manifest, &config.paths.manifest).unwrap();
        let err = plan_stages(&config, &[Stage::Evaluate]).unwrap_err();
        match err {
            PipelineError::StageInputMissing { stage } => assert_eq!(stage, "predict"),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn plan_names_earliest_missing_producer() {
        let dir = tempfile::tempdir().unwrap();
        let config = fixture_config(dir.path());
        // Nothing on disk at all: the first gap is the corpus itself.
        let err = plan_stages(&config, &[Stage::Evaluate]).unwrap_err();
        match err {
            PipelineError::StageInputMissing { stage } => assert_eq!(stage, "ingest"),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn plan_accepts_chain_that_produces_inputs() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture_source(dir.path());
        let config = fixture_config(dir.path());
        let ordered = plan_stages(
            &config,
            &[
                Stage::Evaluate,
                Stage::Ingest,
                Stage::Predict,
                Stage::Train,
                Stage::Index,
                Stage::Reason,
            ],
        )
        .unwrap();
        assert_eq!(
            ordered,
            vec![
                Stage::Ingest,
                Stage::Reason,
                Stage::Index,
                Stage::Train,
                Stage::Predict,
                Stage::Evaluate
            ]
        );
    }

    #[test]
    fn ingest_without_source_or_manifest_is_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = fixture_config(dir.path());
        config.paths.source = None;
        let err = plan_stages(&config, &[Stage::Ingest]).unwrap_err();
        assert!(matches!(err, PipelineError::ConfigInvalid(_)));
    }

    #[test]
    fn explicit_thresholds_rejected_for_multiclass() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = fixture_config(dir.path());
        config.thresholds = ThresholdSettings {
            source: ThresholdSource::Explicit,
            values: Some(vec![0.5; 6]),
        };
        assert!(matches!(
            config.validate(),
            Err(PipelineError::ConfigInvalid(_))
        ));
    }

    #[test]
    fn pipeline_runs_ingest_through_evaluate_and_skips_on_rerun() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture_source(dir.path());
        let mut config = fixture_config(dir.path());
        // Small and fast: this test exercises plumbing, not accuracy.
        config.training.epochs = 2;
        let stages = [
            Stage::Ingest,
            Stage::Reason,
            Stage::Index,
            Stage::Train,
            Stage::TuneThresholds,
            Stage::Predict,
            Stage::Evaluate,
        ];
        let manifest = run_pipeline(&config, &stages, &FixtureFactory).unwrap();
        assert_eq!(manifest.stages.len(), 7);
        assert!(manifest
            .stages
            .iter()
            .all(|s| s.status == StageStatus::Done));
        for stage in stages {
            for out in stage_outputs(stage, &config) {
                assert!(out.exists(), "{} missing", out.display());
            }
        }
        // Multiclass task: tune is a noop but still completes.
        let tune = manifest
            .stages
            .iter()
            .find(|s| s.stage == Stage::TuneThresholds)
            .unwrap();
        assert!(tune.note.contains("noop"));

        // Artifacts are byte-stable across an identical rerun, and every
        // stage is skipped.
        let index_bytes = std::fs::read(config.index_path(IndexMode::Concat)).unwrap();
        let report_bytes =
            std::fs::read(config.paths.report_dir.join("eval_report.json")).unwrap();
        let rerun = run_pipeline(&config, &stages, &FixtureFactory).unwrap();
        assert!(rerun
            .stages
            .iter()
            .all(|s| s.status == StageStatus::Skipped));
        assert_eq!(
            std::fs::read(config.index_path(IndexMode::Concat)).unwrap(),
            index_bytes
        );
        assert_eq!(
            std::fs::read(config.paths.report_dir.join("eval_report.json")).unwrap(),
            report_bytes
        );

        // Events carry sequence numbers and never timestamps.
        let events =
            std::fs::read_to_string(config.paths.run_dir.join("events.jsonl")).unwrap();
        for (i, line) in events.lines().enumerate() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert_eq!(v["seq"], (i + 1) as u64);
            assert!(v.get("time").is_none());
            assert!(v.get("timestamp").is_none());
        }
        // The run directory records the config fingerprint.
        let fp =
            std::fs::read_to_string(config.paths.run_dir.join("fingerprint.txt")).unwrap();
        assert_eq!(fp, config.fingerprint());
    }

    #[test]
    fn changed_config_invalidates_downstream_stages() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture_source(dir.path());
        let mut config = fixture_config(dir.path());
        config.training.epochs = 1;
        let stages = [Stage::Ingest, Stage::Reason, Stage::Index, Stage::Train];
        run_pipeline(&config, &stages, &FixtureFactory).unwrap();

        config.training.epochs = 2;
        let rerun = run_pipeline(&config, &stages, &FixtureFactory).unwrap();
        // Every stage reruns: the config fingerprint is part of each
        // stage's state.
        assert!(rerun.stages.iter().all(|s| s.status == StageStatus::Done));
    }

    struct GarbledFactory;

    impl BackendFactory for GarbledFactory {
        fn create(
            &self,
            _settings: &ReasonerSettings,
        ) -> Result<Box<dyn ReasoningBackend>, PipelineError> {
            // Replies to every meme with text the section parser rejects,
            // so the stage writes failed records and then errors.
            let corpus = synthetic_anxiety_corpus(42);
            let ids: Vec<String> =
                corpus.manifest.instances.iter().map(|i| i.id.clone()).collect();
            Ok(Box::new(ScriptedBackend::new(
                "garbled",
                ids.iter().map(|id| (id.as_str(), "nonsense with no sections")),
            )))
        }
    }

    #[test]
    fn failed_stage_quarantines_new_outputs_and_reports_failure() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture_source(dir.path());
        let config = fixture_config(dir.path());
        let err = run_pipeline(
            &config,
            &[Stage::Ingest, Stage::Reason],
            &GarbledFactory,
        )
        .unwrap_err();
        match &err {
            PipelineError::StageFailed { stage, .. } => assert_eq!(*stage, "reason"),
            other => panic!("unexpected error {other}"),
        }
        // The cache the failed stage created is quarantined, not left in
        // place for later stages.
        assert!(!config.paths.cache.exists());
        assert!(quarantine_path(&config.paths.cache).exists());
        let manifest: RunManifest = serde_json::from_str(
            &std::fs::read_to_string(config.paths.run_dir.join("run_manifest.json")).unwrap(),
        )
        .unwrap();
        assert_eq!(manifest.stages.last().unwrap().status, StageStatus::Failed);
    }
}
