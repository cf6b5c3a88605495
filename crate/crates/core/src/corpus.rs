//! Meme corpus: label schemas, instances, manifest ingestion, split counts.
//!
//! A manifest is a UTF-8, line-delimited file with one record per line
//! (`id`, `image_ref`, `ocr_text`, `labels`, `split`, `source`). Ingestion
//! validates every record against a [`LabelSchema`] and fails fast on the
//! first invalid line. Manifests are immutable after ingestion.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

/// Which classification task a schema belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskId {
    Anxiety,
    Depression,
}

impl TaskId {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskId::Anxiety => "anxiety",
            TaskId::Depression => "depression",
        }
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for TaskId {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "anxiety" => Ok(TaskId::Anxiety),
            "depression" => Ok(TaskId::Depression),
            other => Err(format!("unknown task: {other}")),
        }
    }
}

/// One gold label per instance (softmax argmax) vs. any number above a
/// per-class threshold (sigmoid).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecisionMode {
    Multiclass,
    Multilabel,
}

/// Dataset split. Assignment is immutable after ingestion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn index(self) -> usize {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// An ordered label set for one task. Label order is stable across runs;
/// prompt rendering sorts alphabetically on its own.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSchema {
    pub task_id: TaskId,
    pub labels: Vec<String>,
    pub decision_mode: DecisionMode,
}

impl LabelSchema {
    /// The six GAD anxiety symptom labels (multiclass).
    pub fn anxiety() -> Self {
        LabelSchema {
            task_id: TaskId::Anxiety,
            labels: [
                "Nervousness",
                "Lack of Worry Control",
                "Excessive Worry",
                "Difficulty Relaxing",
                "Restlessness",
                "Impending Doom",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
            decision_mode: DecisionMode::Multiclass,
        }
    }

    /// The seven retained PHQ-9 depression symptom labels (multilabel).
    /// "Lack of Energy" is excluded by schema definition.
    pub fn depression() -> Self {
        LabelSchema {
            task_id: TaskId::Depression,
            labels: [
                "Lack of Interest",
                "Feeling Down",
                "Eating Disorder",
                "Sleeping Disorder",
                "Low Self-Esteem",
                "Concentration Problem",
                "Self Harm",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
            decision_mode: DecisionMode::Multilabel,
        }
    }

    pub fn for_task(task: TaskId) -> Self {
        match task {
            TaskId::Anxiety => Self::anxiety(),
            TaskId::Depression => Self::depression(),
        }
    }

    pub fn label_count(&self) -> usize {
        self.labels.len()
    }

    pub fn label_index(&self, name: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == name)
    }
}

/// One meme: identity, text, gold labels, split membership.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemeInstance {
    pub id: String,
    pub image_ref: Option<String>,
    pub ocr_text: String,
    pub labels: Vec<String>,
    pub split: Split,
    #[serde(default)]
    pub source: String,
}

/// Per-split, per-label assignment tally plus per-split instance counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCountsTable {
    pub labels: Vec<String>,
    /// Label assignment counts, indexed `assignments[split][label]`.
    pub assignments: [Vec<usize>; 3],
    /// Instance counts per split (equals the assignment row sum for
    /// multiclass; may be lower for multilabel).
    pub instances: [usize; 3],
}

impl SplitCountsTable {
    pub fn count(&self, split: Split, label_idx: usize) -> usize {
        self.assignments[split.index()][label_idx]
    }

    /// Row sum: label assignments in a split.
    pub fn split_assignment_total(&self, split: Split) -> usize {
        self.assignments[split.index()].iter().sum()
    }

    /// Column sum: assignments of one label across all splits.
    pub fn label_total(&self, label_idx: usize) -> usize {
        Split::ALL
            .iter()
            .map(|s| self.assignments[s.index()][label_idx])
            .sum()
    }

    pub fn grand_total(&self) -> usize {
        Split::ALL
            .iter()
            .map(|s| self.split_assignment_total(*s))
            .sum()
    }

    /// Aligned text rendering, one row per split plus a totals row.
    pub fn render(&self) -> String {
        let mut widths: Vec<usize> = self.labels.iter().map(|l| l.len().max(5)).collect();
        widths.push(5); // total column
        let mut out = String::new();
        out.push_str(&format!("{:<8}", "split"));
        for (label, w) in self.labels.iter().zip(&widths) {
            out.push_str(&format!(" {label:>w$}"));
        }
        out.push_str(&format!(" {:>5}\n", "total"));
        for split in Split::ALL {
            out.push_str(&format!("{:<8}", split.as_str()));
            for (j, w) in widths[..self.labels.len()].iter().enumerate() {
                out.push_str(&format!(" {:>w$}", self.count(split, j)));
            }
            out.push_str(&format!(" {:>5}\n", self.split_assignment_total(split)));
        }
        out.push_str(&format!("{:<8}", "total"));
        for (j, w) in widths[..self.labels.len()].iter().enumerate() {
            out.push_str(&format!(" {:>w$}", self.label_total(j)));
        }
        out.push_str(&format!(" {:>5}\n", self.grand_total()));
        out
    }
}

/// A validated, immutable corpus: schema, instances in file order, tallies.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub schema: LabelSchema,
    pub instances: Vec<MemeInstance>,
    pub counts: SplitCountsTable,
}

impl CorpusManifest {
    /// Builds a manifest from already-validated instances, recomputing
    /// the tallies. Callers outside ingestion should prefer
    /// [`ingest_records`] so validation happens.
    pub fn new(schema: LabelSchema, instances: Vec<MemeInstance>) -> Self {
        let counts = tally(&schema, &instances);
        CorpusManifest {
            schema,
            instances,
            counts,
        }
    }

    /// A manifest is complete when every split is nonempty.
    pub fn is_complete(&self) -> bool {
        Split::ALL.iter().all(|s| self.counts.instances[s.index()] > 0)
    }

    pub fn split_instances(&self, split: Split) -> impl Iterator<Item = &MemeInstance> {
        self.instances.iter().filter(move |m| m.split == split)
    }

    pub fn find(&self, id: &str) -> Option<&MemeInstance> {
        self.instances.iter().find(|m| m.id == id)
    }

    /// True when the stored tallies equal a recount from the instances.
    pub fn counts_consistent(&self) -> bool {
        self.counts == tally(&self.schema, &self.instances)
    }

    /// Stable content hash over the serialized instance lines.
    pub fn fingerprint(&self) -> String {
        let mut lines = Vec::with_capacity(self.instances.len() + 1);
        lines.push(self.schema.task_id.as_str().to_string());
        for inst in &self.instances {
            lines.push(serde_json::to_string(inst).expect("instance serializes"));
        }
        let parts: Vec<&str> = lines.iter().map(String::as_str).collect();
        crate::text::fingerprint(&parts)
    }
}

fn tally(schema: &LabelSchema, instances: &[MemeInstance]) -> SplitCountsTable {
    let l = schema.label_count();
    let mut assignments = [vec![0usize; l], vec![0usize; l], vec![0usize; l]];
    let mut counts = [0usize; 3];
    for inst in instances {
        counts[inst.split.index()] += 1;
        for label in &inst.labels {
            let j = schema
                .label_index(label)
                .expect("validated instance has known labels");
            assignments[inst.split.index()][j] += 1;
        }
    }
    SplitCountsTable {
        labels: schema.labels.clone(),
        assignments,
        instances: counts,
    }
}

/// Ingestion failure. The whole file is rejected on the first invalid
/// record; `line` is 1-based.
#[derive(Debug, Error)]
pub enum IngestError {
    #[error("io error reading manifest: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: missing field `{field}`")]
    MissingField { line: usize, field: &'static str },
    #[error("line {line}: unknown label `{label}` for task {task}")]
    UnknownLabel {
        line: usize,
        label: String,
        task: TaskId,
    },
    #[error("line {line}: duplicate id `{id}`")]
    DuplicateId { line: usize, id: String },
    #[error("line {line}: multiclass record carries {got} labels, expected exactly 1")]
    CardinalityViolation { line: usize, got: usize },
    #[error("line {line}: unknown split `{value}` (expected train|val|test)")]
    UnknownSplit { line: usize, value: String },
}

#[derive(Deserialize)]
struct RawRecord {
    id: Option<String>,
    #[serde(default)]
    image_ref: Option<String>,
    ocr_text: Option<String>,
    labels: Option<Vec<String>>,
    split: Option<String>,
    #[serde(default)]
    source: Option<String>,
}

/// Reads, validates, and normalizes a line-delimited manifest file.
pub fn ingest_manifest(path: &Path, schema: &LabelSchema) -> Result<CorpusManifest, IngestError> {
    let file = std::fs::File::open(path)?;
    ingest_records(std::io::BufReader::new(file), schema)
}

/// Same as [`ingest_manifest`] but over any reader. An empty input yields
/// an empty (incomplete) manifest.
pub fn ingest_records<R: BufRead>(
    reader: R,
    schema: &LabelSchema,
) -> Result<CorpusManifest, IngestError> {
    let mut instances = Vec::new();
    let mut seen_ids = BTreeSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord =
            serde_json::from_str(&line).map_err(|e| IngestError::Malformed {
                line: line_no,
                message: e.to_string(),
            })?;
        let instance = validate_record(raw, line_no, schema)?;
        if !seen_ids.insert(instance.id.clone()) {
            return Err(IngestError::DuplicateId {
                line: line_no,
                id: instance.id,
            });
        }
        instances.push(instance);
    }
    Ok(CorpusManifest::new(schema.clone(), instances))
}

fn validate_record(
    raw: RawRecord,
    line: usize,
    schema: &LabelSchema,
) -> Result<MemeInstance, IngestError> {
    let id = raw.id.ok_or(IngestError::MissingField { line, field: "id" })?;
    let ocr_text = raw.ocr_text.ok_or(IngestError::MissingField {
        line,
        field: "ocr_text",
    })?;
    let labels = raw.labels.ok_or(IngestError::MissingField {
        line,
        field: "labels",
    })?;
    let split_str = raw.split.ok_or(IngestError::MissingField {
        line,
        field: "split",
    })?;

    let split = match split_str.as_str() {
        "train" => Split::Train,
        "val" => Split::Val,
        "test" => Split::Test,
        other => {
            return Err(IngestError::UnknownSplit {
                line,
                value: other.to_string(),
            })
        }
    };

    // Deduplicate while validating, then order by schema index so that
    // serialization is deterministic regardless of input order.
    let mut indices = BTreeSet::new();
    for label in &labels {
        match schema.label_index(label) {
            Some(j) => {
                indices.insert(j);
            }
            None => {
                return Err(IngestError::UnknownLabel {
                    line,
                    label: label.clone(),
                    task: schema.task_id,
                })
            }
        }
    }
    let expected_one = schema.decision_mode == DecisionMode::Multiclass;
    if (expected_one && indices.len() != 1) || indices.is_empty() {
        return Err(IngestError::CardinalityViolation {
            line,
            got: indices.len(),
        });
    }
    let labels: Vec<String> = indices
        .into_iter()
        .map(|j| schema.labels[j].clone())
        .collect();

    // NFC so that downstream fingerprints are stable across encodings of
    // visually identical text.
    let ocr_text: String = ocr_text.nfc().collect();

    Ok(MemeInstance {
        id,
        image_ref: raw.image_ref,
        ocr_text,
        labels,
        split,
        source: raw.source.unwrap_or_default(),
    })
}

/// Computes the per-split, per-label table for a manifest.
pub fn split_counts(manifest: &CorpusManifest) -> SplitCountsTable {
    tally(&manifest.schema, &manifest.instances)
}

/// Serializes a manifest back to line-delimited form. Re-ingesting the
/// output yields a field-by-field identical manifest.
pub fn write_manifest<W: Write>(manifest: &CorpusManifest, mut writer: W) -> std::io::Result<()> {
    for inst in &manifest.instances {
        serde_json::to_writer(&mut writer, inst)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

/// Writes a manifest to a file path.
pub fn save_manifest(manifest: &CorpusManifest, path: &Path) -> std::io::Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut buf = Vec::new();
    write_manifest(manifest, &mut buf)?;
    std::fs::write(path, buf)
}
