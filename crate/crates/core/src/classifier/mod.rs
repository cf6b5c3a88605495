//! Few-shot input assembly, encoder training, and label decisions.
//!
//! The classifier consumes assembled text (OCR, figurative reasoning,
//! retrieved exemplars, gated by an ablation config), trains the small
//! attention encoder in `model`, and decides labels by softmax argmax
//! (multiclass) or per-class thresholds (multilabel).

mod assemble;
pub mod model;

pub use assemble::{
    assemble_input, assemble_split_inputs, exemplars_from_retrieval, ClassifierInput, Exemplar,
    IndexSet,
};
pub use model::{encode_text, EncoderModel, EpochLog, GoldTarget, TrainError};

use std::fmt;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusManifest, DecisionMode, LabelSchema, Split, TaskId};
use crate::fusion::{EmbeddingProvider, FusionError, IndexMode};
use crate::reasoner::ReasoningCache;
use crate::text::fingerprint;

/// Which input sources feed the classifier. One row of the ablation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub use_ocr: bool,
    pub use_fcs: bool,
    pub use_ocr_rag: bool,
    pub use_fcs_rag: bool,
}

impl AblationConfig {
    pub const fn new(ocr: bool, ocr_rag: bool, fcs: bool, fcs_rag: bool) -> Self {
        AblationConfig {
            use_ocr: ocr,
            use_fcs: fcs,
            use_ocr_rag: ocr_rag,
            use_fcs_rag: fcs_rag,
        }
    }

    pub const fn full() -> Self {
        AblationConfig::new(true, true, true, true)
    }

    pub const fn ocr_only() -> Self {
        AblationConfig::new(true, false, false, false)
    }

    /// The eight rows of the ablation table, in table order
    /// (flag columns: OCR, OCR-RAG, FCS, FCS-RAG).
    pub fn enumerate() -> [AblationConfig; 8] {
        [
            AblationConfig::new(true, false, false, false),
            AblationConfig::new(true, true, false, false),
            AblationConfig::new(false, false, true, false),
            AblationConfig::new(false, false, true, true),
            AblationConfig::new(true, false, true, false),
            AblationConfig::new(true, false, true, true),
            AblationConfig::new(true, true, true, false),
            AblationConfig::new(true, true, true, true),
        ]
    }

    pub fn validate(&self) -> Result<(), ClassifierError> {
        if !self.use_ocr && !self.use_fcs {
            return Err(ClassifierError::InvalidConfig(
                "at least one of OCR, FCS must be enabled".to_string(),
            ));
        }
        if self.use_ocr_rag && !self.use_ocr {
            return Err(ClassifierError::InvalidConfig(
                "OCR-RAG requires OCR".to_string(),
            ));
        }
        if self.use_fcs_rag && !self.use_fcs {
            return Err(ClassifierError::InvalidConfig(
                "FCS-RAG requires FCS".to_string(),
            ));
        }
        Ok(())
    }

    pub fn needs_retrieval(&self) -> bool {
        self.use_ocr_rag || self.use_fcs_rag
    }

    /// Which index serves this config's retrieval, if any.
    pub fn retrieval_mode(&self) -> Option<IndexMode> {
        match (self.use_ocr_rag, self.use_fcs_rag) {
            (true, true) => Some(IndexMode::Concat),
            (true, false) => Some(IndexMode::Ocr),
            (false, true) => Some(IndexMode::Fcs),
            (false, false) => None,
        }
    }

    pub fn name(&self) -> String {
        let mut parts = Vec::new();
        if self.use_ocr {
            parts.push("OCR");
        }
        if self.use_ocr_rag {
            parts.push("OCR-RAG");
        }
        if self.use_fcs {
            parts.push("FCS");
        }
        if self.use_fcs_rag {
            parts.push("FCS-RAG");
        }
        parts.join("+")
    }
}

impl fmt::Display for AblationConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl std::str::FromStr for AblationConfig {
    type Err = ClassifierError;

    /// Parses names like `OCR,FCS,FCS-RAG` or `OCR+OCR-RAG`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut config = AblationConfig::new(false, false, false, false);
        for part in s.split([',', '+']) {
            match part.trim().to_ascii_uppercase().as_str() {
                "" => {}
                "OCR" => config.use_ocr = true,
                "OCR-RAG" => config.use_ocr_rag = true,
                "FCS" => config.use_fcs = true,
                "FCS-RAG" => config.use_fcs_rag = true,
                other => {
                    return Err(ClassifierError::InvalidConfig(format!(
                        "unknown input flag: {other}"
                    )))
                }
            }
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    #[serde(rename = "ce")]
    Ce,
    #[serde(rename = "bce")]
    Bce,
}

impl LossKind {
    pub fn for_mode(mode: DecisionMode) -> Self {
        match mode {
            DecisionMode::Multiclass => LossKind::Ce,
            DecisionMode::Multilabel => LossKind::Bce,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LrSchedule {
    #[serde(rename = "constant")]
    Constant,
}

/// Training hyperparameters. The defaults mirror the published recipe;
/// `encoder_dim` and `encoder_vocab` additionally size the in-process
/// encoder itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingSpec {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub dropout: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_seq_len: usize,
    pub grad_clip: f64,
    pub epochs: usize,
    pub lr_schedule: LrSchedule,
    pub loss: LossKind,
    pub adapter_rank: usize,
    pub adapter_alpha: f64,
    pub adapter_targets: Vec<String>,
    pub seed: u64,
    pub encoder_dim: usize,
    pub encoder_vocab: usize,
}

impl Default for TrainingSpec {
    fn default() -> Self {
        TrainingSpec {
            learning_rate: 5e-5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            dropout: 0.2,
            weight_decay: 1e-2,
            batch_size: 16,
            max_seq_len: 512,
            grad_clip: 1.0,
            epochs: 10,
            lr_schedule: LrSchedule::Constant,
            loss: LossKind::Ce,
            adapter_rank: 16,
            adapter_alpha: 8.0,
            adapter_targets: model::PROJECTION_NAMES
                .iter()
                .map(|s| s.to_string())
                .collect(),
            seed: 42,
            encoder_dim: 32,
            encoder_vocab: 4096,
        }
    }
}

/// One decided output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub meme_id: String,
    pub scores: Vec<f64>,
    pub decided: Vec<String>,
    pub mode: DecisionMode,
}

#[derive(Debug, Error)]
pub enum AssembleError {
    #[error("meme {meme_id}: reasoning required by config but absent")]
    MissingReasoning { meme_id: String },
    #[error("meme {meme_id}: reasoning supplied but config does not use it")]
    UnexpectedReasoning { meme_id: String },
    #[error("meme {meme_id}: retrieval required by config but absent")]
    MissingRetrieval { meme_id: String },
    #[error("meme {meme_id}: retrieval supplied but config has no RAG flag")]
    UnexpectedRetrieval { meme_id: String },
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("retrieved exemplar {id} not found in the train split")]
    UnknownExemplar { id: String },
}

#[derive(Debug, Error)]
pub enum ClassifierError {
    #[error(transparent)]
    Assemble(#[from] AssembleError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("invalid ablation config: {0}")]
    InvalidConfig(String),
    #[error("no {mode} index available for config {config}")]
    MissingIndex { mode: IndexMode, config: String },
    #[error("config {0} needs an embedding provider for retrieval")]
    MissingProvider(String),
    #[error("threshold {0} outside (0,1)")]
    BadThreshold(f64),
    #[error("expected {expected} thresholds, got {got}")]
    ThresholdCount { expected: usize, got: usize },
    #[error("mode mismatch: {0}")]
    ModeMismatch(String),
    #[error("validation split is empty")]
    EmptyValidation,
    #[error("model artifact: {0}")]
    Artifact(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// First index of the maximum value, so score ties resolve to the lowest
/// label index.
pub(crate) fn argmax_lowest(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Class indices whose score strictly exceeds its threshold. A score equal
/// to the threshold stays out.
pub fn decide_multilabel_indices(scores: &[f64], thresholds: &[f64]) -> Vec<usize> {
    assert_eq!(scores.len(), thresholds.len());
    scores
        .iter()
        .zip(thresholds)
        .enumerate()
        .filter(|(_, (s, t))| *s > *t)
        .map(|(j, _)| j)
        .collect()
}

/// Trained model plus everything needed to reuse it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelArtifact {
    pub schema: LabelSchema,
    pub config: AblationConfig,
    pub spec: TrainingSpec,
    pub model: EncoderModel,
    pub thresholds: Vec<f64>,
    pub fingerprint: String,
    pub provider_id: Option<String>,
    pub retrieval_k: usize,
}

pub struct TrainOutput {
    pub artifact: ModelArtifact,
    pub log: Vec<EpochLog>,
}

/// Assembles inputs for the train and val splits, trains the encoder, and
/// packages the artifact. Deterministic for a fixed spec seed.
pub fn train(
    manifest: &CorpusManifest,
    cache: Option<&ReasoningCache>,
    indices: &IndexSet,
    provider: Option<&dyn EmbeddingProvider>,
    config: AblationConfig,
    spec: &TrainingSpec,
    k: usize,
) -> Result<TrainOutput, ClassifierError> {
    config.validate()?;
    let schema = &manifest.schema;
    let encode_split = |split: Split| -> Result<Vec<(Vec<usize>, GoldTarget)>, ClassifierError> {
        let inputs = assemble_split_inputs(
            manifest, split, cache, indices, provider, config, schema, k, spec.max_seq_len,
        )?;
        let mut items = Vec::with_capacity(inputs.len());
        for input in &inputs {
            let instance = manifest
                .find(&input.meme_id)
                .expect("assembled input comes from the manifest");
            let target = gold_target(&instance.labels, schema);
            let ids = encode_text(&input.assembled_text, spec.encoder_vocab, spec.max_seq_len);
            items.push((ids, target));
        }
        Ok(items)
    };
    let train_items = encode_split(Split::Train)?;
    let val_items = encode_split(Split::Val)?;
    let outcome = model::train_encoder(
        &train_items,
        &val_items,
        spec.encoder_vocab,
        spec.encoder_dim,
        schema.label_count(),
        schema.decision_mode,
        spec,
    )?;
    let spec_json = serde_json::to_string(spec).expect("spec serializes");
    let fp = fingerprint(&[
        &manifest.fingerprint(),
        &config.name(),
        &spec_json,
        provider.map(|p| p.id()).unwrap_or("none"),
        &k.to_string(),
    ]);
    let artifact = ModelArtifact {
        schema: schema.clone(),
        config,
        spec: spec.clone(),
        model: outcome.model,
        thresholds: vec![0.5; schema.label_count()],
        fingerprint: fp,
        provider_id: provider.map(|p| p.id().to_string()),
        retrieval_k: k,
    };
    Ok(TrainOutput {
        artifact,
        log: outcome.log,
    })
}

fn gold_target(labels: &[String], schema: &LabelSchema) -> GoldTarget {
    match schema.decision_mode {
        DecisionMode::Multiclass => GoldTarget::Class(
            schema
                .label_index(&labels[0])
                .expect("labels validated at ingestion"),
        ),
        DecisionMode::Multilabel => {
            let mut hot = vec![false; schema.label_count()];
            for label in labels {
                hot[schema.label_index(label).expect("validated")] = true;
            }
            GoldTarget::MultiHot(hot)
        }
    }
}

/// Scores and decides every input. For multilabel, `thresholds` overrides
/// the artifact's stored vector; each must lie strictly inside (0,1).
pub fn predict(
    artifact: &ModelArtifact,
    inputs: &[ClassifierInput],
    thresholds: Option<&[f64]>,
) -> Result<Vec<Prediction>, ClassifierError> {
    let schema = &artifact.schema;
    let mode = schema.decision_mode;
    let taus: Vec<f64> = match (mode, thresholds) {
        (DecisionMode::Multiclass, Some(_)) => {
            return Err(ClassifierError::ModeMismatch(
                "thresholds supplied for a multiclass model".to_string(),
            ))
        }
        (DecisionMode::Multiclass, None) => Vec::new(),
        (DecisionMode::Multilabel, maybe) => {
            let taus = maybe.unwrap_or(&artifact.thresholds).to_vec();
            if taus.len() != schema.label_count() {
                return Err(ClassifierError::ThresholdCount {
                    expected: schema.label_count(),
                    got: taus.len(),
                });
            }
            for &t in &taus {
                if !(t > 0.0 && t < 1.0) {
                    return Err(ClassifierError::BadThreshold(t));
                }
            }
            taus
        }
    };
    let mut predictions = Vec::with_capacity(inputs.len());
    for input in inputs {
        let ids = encode_text(
            &input.assembled_text,
            artifact.spec.encoder_vocab,
            artifact.spec.max_seq_len,
        );
        let scores = artifact.model.score(&ids, mode);
        let decided: Vec<String> = match mode {
            DecisionMode::Multiclass => vec![schema.labels[argmax_lowest(&scores)].clone()],
            DecisionMode::Multilabel => decide_multilabel_indices(&scores, &taus)
                .into_iter()
                .map(|j| schema.labels[j].clone())
                .collect(),
        };
        predictions.push(Prediction {
            meme_id: input.meme_id.clone(),
            scores,
            decided,
            mode,
        });
    }
    Ok(predictions)
}

/// The threshold search grid: 0.05 to 0.95 in 0.05 steps (0.50 included).
pub fn threshold_grid() -> Vec<f64> {
    (1..=19).map(|i| i as f64 / 20.0).collect()
}

/// Grid-searches a per-class threshold maximizing that class's F1 on
/// validation scores. Ties take the lowest grid value; a class whose best
/// F1 is zero takes the highest (most conservative) value.
pub fn tune_thresholds(
    scores: &[Vec<f64>],
    gold: &[Vec<bool>],
) -> Result<Vec<f64>, ClassifierError> {
    if scores.is_empty() {
        return Err(ClassifierError::EmptyValidation);
    }
    assert_eq!(scores.len(), gold.len());
    let classes = scores[0].len();
    let grid = threshold_grid();
    let mut taus = Vec::with_capacity(classes);
    for j in 0..classes {
        let mut best_tau = *grid.last().unwrap();
        let mut best_f1 = 0.0;
        for &tau in &grid {
            let mut tp = 0usize;
            let mut fp = 0usize;
            let mut fne = 0usize;
            for (s, g) in scores.iter().zip(gold) {
                let pred = s[j] > tau;
                match (pred, g[j]) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fne += 1,
                    (false, false) => {}
                }
            }
            let f1 = if 2 * tp + fp + fne == 0 {
                0.0
            } else {
                2.0 * tp as f64 / (2 * tp + fp + fne) as f64
            };
            if f1 > best_f1 {
                best_f1 = f1;
                best_tau = tau;
            }
        }
        taus.push(best_tau);
    }
    Ok(taus)
}

/// Runs the artifact over validation inputs and tunes thresholds against
/// the manifest's gold labels.
pub fn tune_thresholds_from_val(
    artifact: &ModelArtifact,
    val_inputs: &[ClassifierInput],
    manifest: &CorpusManifest,
) -> Result<Vec<f64>, ClassifierError> {
    if artifact.schema.decision_mode != DecisionMode::Multilabel {
        return Err(ClassifierError::ModeMismatch(
            "threshold tuning applies to multilabel models".to_string(),
        ));
    }
    if val_inputs.is_empty() {
        return Err(ClassifierError::EmptyValidation);
    }
    let mut scores = Vec::with_capacity(val_inputs.len());
    let mut gold = Vec::with_capacity(val_inputs.len());
    for input in val_inputs {
        let ids = encode_text(
            &input.assembled_text,
            artifact.spec.encoder_vocab,
            artifact.spec.max_seq_len,
        );
        scores.push(artifact.model.score(&ids, DecisionMode::Multilabel));
        let instance = manifest
            .find(&input.meme_id)
            .expect("val input comes from the manifest");
        match gold_target(&instance.labels, &artifact.schema) {
            GoldTarget::MultiHot(hot) => gold.push(hot),
            GoldTarget::Class(_) => unreachable!("multilabel schema"),
        }
    }
    tune_thresholds(&scores, &gold)
}

const WEIGHTS_FILE: &str = "weights.json";
const SCHEMA_FILE: &str = "schema.json";
const CONFIG_FILE: &str = "config.json";
const THRESHOLDS_FILE: &str = "thresholds.json";
const FINGERPRINT_FILE: &str = "fingerprint.txt";
const TRAINING_LOG_FILE: &str = "training_log.jsonl";

#[derive(Serialize, Deserialize)]
struct ArtifactConfigFile {
    config: AblationConfig,
    spec: TrainingSpec,
    provider_id: Option<String>,
    retrieval_k: usize,
}

/// Writes the artifact directory: weights, schema, config, threshold
/// vector, fingerprint, and the per-epoch training log.
pub fn save_artifact(
    artifact: &ModelArtifact,
    log: &[EpochLog],
    dir: &Path,
) -> Result<(), ClassifierError> {
    std::fs::create_dir_all(dir)?;
    fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<(), ClassifierError> {
        let data = serde_json::to_string_pretty(value)
            .map_err(|e| ClassifierError::Artifact(e.to_string()))?;
        std::fs::write(dir.join(name), data)?;
        Ok(())
    }
    write_json(dir, WEIGHTS_FILE, &artifact.model)?;
    write_json(dir, SCHEMA_FILE, &artifact.schema)?;
    write_json(
        dir,
        CONFIG_FILE,
        &ArtifactConfigFile {
            config: artifact.config,
            spec: artifact.spec.clone(),
            provider_id: artifact.provider_id.clone(),
            retrieval_k: artifact.retrieval_k,
        },
    )?;
    write_json(dir, THRESHOLDS_FILE, &artifact.thresholds)?;
    std::fs::write(dir.join(FINGERPRINT_FILE), &artifact.fingerprint)?;
    let mut log_buf = Vec::new();
    for entry in log {
        serde_json::to_writer(&mut log_buf, entry)
            .map_err(|e| ClassifierError::Artifact(e.to_string()))?;
        log_buf.push(b'\n');
    }
    std::fs::write(dir.join(TRAINING_LOG_FILE), log_buf)?;
    Ok(())
}

pub fn load_artifact(dir: &Path) -> Result<ModelArtifact, ClassifierError> {
    let read = |name: &str| -> Result<String, ClassifierError> {
        std::fs::read_to_string(dir.join(name)).map_err(|e| {
            ClassifierError::Artifact(format!("cannot read {name}: {e}"))
        })
    };
    let model: EncoderModel = serde_json::from_str(&read(WEIGHTS_FILE)?)
        .map_err(|e| ClassifierError::Artifact(format!("bad {WEIGHTS_FILE}: {e}")))?;
    let schema: LabelSchema = serde_json::from_str(&read(SCHEMA_FILE)?)
        .map_err(|e| ClassifierError::Artifact(format!("bad {SCHEMA_FILE}: {e}")))?;
    let cfg: ArtifactConfigFile = serde_json::from_str(&read(CONFIG_FILE)?)
        .map_err(|e| ClassifierError::Artifact(format!("bad {CONFIG_FILE}: {e}")))?;
    let thresholds: Vec<f64> = serde_json::from_str(&read(THRESHOLDS_FILE)?)
        .map_err(|e| ClassifierError::Artifact(format!("bad {THRESHOLDS_FILE}: {e}")))?;
    let fingerprint = read(FINGERPRINT_FILE)?.trim().to_string();
    Ok(ModelArtifact {
        schema,
        config: cfg.config,
        spec: cfg.spec,
        model,
        thresholds,
        fingerprint,
        provider_id: cfg.provider_id,
        retrieval_k: cfg.retrieval_k,
    })
}

/// Replaces the stored threshold vector (after tuning).
pub fn update_thresholds(dir: &Path, thresholds: &[f64]) -> Result<(), ClassifierError> {
    let data = serde_json::to_string_pretty(thresholds)
        .map_err(|e| ClassifierError::Artifact(e.to_string()))?;
    std::fs::write(dir.join(THRESHOLDS_FILE), data)?;
    Ok(())
}

pub fn load_training_log(dir: &Path) -> Result<Vec<EpochLog>, ClassifierError> {
    let file = std::fs::File::open(dir.join(TRAINING_LOG_FILE))?;
    let mut log = Vec::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        log.push(
            serde_json::from_str(&line)
                .map_err(|e| ClassifierError::Artifact(format!("bad log line: {e}")))?,
        );
    }
    Ok(log)
}

/// Metadata line at the top of a predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionHeader {
    pub task_id: TaskId,
    pub config: AblationConfig,
    pub mode: DecisionMode,
    pub model_fingerprint: String,
}

pub fn save_predictions(
    header: &PredictionHeader,
    predictions: &[Prediction],
    path: &Path,
) -> Result<(), ClassifierError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut buf = Vec::new();
    serde_json::to_writer(&mut buf, header)
        .map_err(|e| ClassifierError::Artifact(e.to_string()))?;
    buf.push(b'\n');
    for p in predictions {
        serde_json::to_writer(&mut buf, p)
            .map_err(|e| ClassifierError::Artifact(e.to_string()))?;
        buf.push(b'\n');
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_predictions(
    path: &Path,
) -> Result<(PredictionHeader, Vec<Prediction>), ClassifierError> {
    let file = std::fs::File::open(path)?;
    let mut lines = std::io::BufReader::new(file).lines();
    let header_line = lines
        .next()
        .ok_or_else(|| ClassifierError::Artifact("empty predictions file".to_string()))??;
    let header: PredictionHeader = serde_json::from_str(&header_line)
        .map_err(|e| ClassifierError::Artifact(format!("bad predictions header: {e}")))?;
    let mut predictions = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        predictions.push(
            serde_json::from_str(&line)
                .map_err(|e| ClassifierError::Artifact(format!("bad prediction line: {e}")))?,
        );
    }
    Ok((header, predictions))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn training_defaults_match_published_recipe() {
        let spec = TrainingSpec::default();
        assert_eq!(spec.learning_rate, 5e-5);
        assert_eq!(spec.adam_beta1, 0.9);
        assert_eq!(spec.adam_beta2, 0.999);
        assert_eq!(spec.adam_epsilon, 1e-8);
        assert_eq!(spec.dropout, 0.2);
        assert_eq!(spec.weight_decay, 1e-2);
        assert_eq!(spec.batch_size, 16);
        assert_eq!(spec.max_seq_len, 512);
        assert_eq!(spec.grad_clip, 1.0);
        assert_eq!(spec.epochs, 10);
        assert_eq!(spec.lr_schedule, LrSchedule::Constant);
        assert_eq!(spec.adapter_rank, 16);
        assert_eq!(spec.adapter_alpha, 8.0);
        assert_eq!(spec.adapter_targets, vec!["W_q", "W_k", "W_v", "W_o"]);
    }

    #[test]
    fn ablation_enumeration_matches_table_pattern() {
        let configs = AblationConfig::enumerate();
        assert_eq!(configs.len(), 8);
        // (OCR, OCR-RAG, FCS, FCS-RAG) per row.
        let pattern: Vec<(bool, bool, bool, bool)> = configs
            .iter()
            .map(|c| (c.use_ocr, c.use_ocr_rag, c.use_fcs, c.use_fcs_rag))
            .collect();
        assert_eq!(
            pattern,
            vec![
                (true, false, false, false),
                (true, true, false, false),
                (false, false, true, false),
                (false, false, true, true),
                (true, false, true, false),
                (true, false, true, true),
                (true, true, true, false),
                (true, true, true, true),
            ]
        );
        // All distinct and all valid.
        for (i, a) in configs.iter().enumerate() {
            a.validate().unwrap();
            for b in &configs[i + 1..] {
                assert_ne!(a, b);
            }
        }
    }

    #[test]
    fn config_validation_rejects_orphan_rag_and_empty_base() {
        assert!(AblationConfig::new(false, false, false, false).validate().is_err());
        assert!(AblationConfig::new(false, true, true, false).validate().is_err());
        assert!(AblationConfig::new(true, false, false, true).validate().is_err());
    }

    #[test]
    fn config_names_roundtrip() {
        for config in AblationConfig::enumerate() {
            let parsed: AblationConfig = config.name().parse().unwrap();
            assert_eq!(parsed, config);
        }
        let parsed: AblationConfig = "OCR,FCS,FCS-RAG".parse().unwrap();
        assert_eq!(parsed, AblationConfig::new(true, false, true, true));
        assert!("OCR,XYZ".parse::<AblationConfig>().is_err());
    }

    #[test]
    fn retrieval_mode_follows_rag_flags() {
        assert_eq!(AblationConfig::ocr_only().retrieval_mode(), None);
        assert_eq!(
            AblationConfig::new(true, true, false, false).retrieval_mode(),
            Some(IndexMode::Ocr)
        );
        assert_eq!(
            AblationConfig::new(false, false, true, true).retrieval_mode(),
            Some(IndexMode::Fcs)
        );
        assert_eq!(
            AblationConfig::full().retrieval_mode(),
            Some(IndexMode::Concat)
        );
    }

    #[test]
    fn multiclass_tie_decides_lowest_index() {
        assert_eq!(argmax_lowest(&[0.5, 0.5]), 0);
        assert_eq!(argmax_lowest(&[0.2, 0.5, 0.5]), 1);
        assert_eq!(argmax_lowest(&[0.7, 0.2, 0.1]), 0);
    }

    #[test]
    fn multilabel_decision_is_strictly_greater() {
        let decided = decide_multilabel_indices(&[0.7, 0.3], &[0.5, 0.5]);
        assert_eq!(decided, vec![0]);
        // Exactly at the threshold stays out.
        let decided = decide_multilabel_indices(&[0.5, 0.5001], &[0.5, 0.5]);
        assert_eq!(decided, vec![1]);
    }

    #[test]
    fn threshold_grid_contains_default_and_bounds() {
        let grid = threshold_grid();
        assert_eq!(grid.len(), 19);
        assert_eq!(grid[0], 0.05);
        assert_eq!(*grid.last().unwrap(), 0.95);
        assert!(grid.contains(&0.5));
    }

    #[test]
    fn tuning_prefers_lowest_tau_and_handles_degenerate_class() {
        // Class 0 perfectly ranked: positives score 0.9, negatives 0.1.
        // Decisions are strict, so tau = 0.1 already excludes the
        // negatives; the lowest perfect grid point wins.
        // Class 1 never positive in validation: most conservative tau.
        let scores = vec![
            vec![0.9, 0.2],
            vec![0.9, 0.3],
            vec![0.1, 0.1],
            vec![0.1, 0.4],
        ];
        let gold = vec![
            vec![true, false],
            vec![true, false],
            vec![false, false],
            vec![false, false],
        ];
        let taus = tune_thresholds(&scores, &gold).unwrap();
        assert_eq!(taus[0], 0.1);
        assert_eq!(taus[1], 0.95);
    }

    #[test]
    fn tuning_matches_brute_force_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let n = 40;
        let classes = 5;
        let scores: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..classes).map(|_| rng.random::<f64>()).collect())
            .collect();
        let gold: Vec<Vec<bool>> = (0..n)
            .map(|_| (0..classes).map(|_| rng.random::<f64>() < 0.4).collect())
            .collect();
        let taus = tune_thresholds(&scores, &gold).unwrap();

        // Oracle: independent grid scan, highest F1 with lowest tau,
        // falling back to the top of the grid at F1 zero.
        for j in 0..classes {
            let mut best = (0.0f64, f64::NAN);
            for i in 1..=19 {
                let tau = i as f64 / 20.0;
                let (mut tp, mut fp, mut fne) = (0.0, 0.0, 0.0);
                for (s, g) in scores.iter().zip(&gold) {
                    match (s[j] > tau, g[j]) {
                        (true, true) => tp += 1.0,
                        (true, false) => fp += 1.0,
                        (false, true) => fne += 1.0,
                        _ => {}
                    }
                }
                let f1 = if tp == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fne) };
                if f1 > best.0 {
                    best = (f1, tau);
                }
            }
            let expected = if best.0 == 0.0 { 0.95 } else { best.1 };
            assert_eq!(taus[j], expected, "class {j}");
        }
    }

    #[test]
    fn empty_validation_is_an_error() {
        assert!(matches!(
            tune_thresholds(&[], &[]),
            Err(ClassifierError::EmptyValidation)
        ));
    }

    proptest! {
        #[test]
        fn multilabel_decisions_match_inline_oracle(
            scores in proptest::collection::vec(0.0f64..1.0, 7),
            taus in proptest::collection::vec(0.01f64..0.99, 7),
        ) {
            let decided = decide_multilabel_indices(&scores, &taus);
            let oracle: Vec<usize> = (0..7).filter(|&j| scores[j] > taus[j]).collect();
            prop_assert_eq!(decided, oracle);
        }

        #[test]
        fn boundary_scores_are_excluded(taus in proptest::collection::vec(0.01f64..0.99, 4)) {
            let scores = taus.clone();
            prop_assert!(decide_multilabel_indices(&scores, &taus).is_empty());
        }
    }
}
