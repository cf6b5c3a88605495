//! F1 metrics, confusion matrices, the 8-row ablation runner, and
//! comparison reports.
//!
//! Zero-division convention: precision or recall with a zero denominator
//! is 0, and the per-class row is flagged `degenerate` so alternate
//! conventions can be applied downstream.

use std::collections::{BTreeMap, BTreeSet};
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{
    assemble_split_inputs, predict, train, tune_thresholds_from_val, AblationConfig,
    ClassifierError, IndexSet, Prediction, TrainingSpec,
};
use crate::corpus::{CorpusManifest, DecisionMode, LabelSchema, Split, TaskId};
use crate::fusion::EmbeddingProvider;
use crate::reasoner::ReasoningCache;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerClass {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
    /// True when a zero denominator forced precision or recall to 0.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task_id: TaskId,
    pub config: AblationConfig,
    pub per_class: Vec<PerClass>,
    pub macro_f1: f64,
    pub weighted_f1: f64,
    pub micro_f1: f64,
    /// Rows are gold labels, columns predicted. Multiclass only.
    pub confusion: Option<Vec<Vec<usize>>>,
    pub run_fingerprint: String,
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no prediction for test instance {id}")]
    MissingPrediction { id: String },
    #[error("duplicate prediction for {id}")]
    DuplicatePrediction { id: String },
    #[error("prediction for {id} which is not in the test split")]
    UnknownPrediction { id: String },
    #[error("decision mode mismatch: {0}")]
    ModeMismatch(String),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
}

/// Precision, recall, F1 under the zero-division convention, plus the
/// degenerate flag.
pub fn binary_prf(tp: usize, fp: usize, fne: usize) -> (f64, f64, f64, bool) {
    let mut degenerate = false;
    let precision = if tp + fp == 0 {
        degenerate = true;
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let recall = if tp + fne == 0 {
        degenerate = true;
        0.0
    } else {
        tp as f64 / (tp + fne) as f64
    };
    let f1 = if 2 * tp + fp + fne == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fne) as f64
    };
    (precision, recall, f1, degenerate)
}

/// Unweighted mean of per-class binary F1 over multi-hot decisions.
/// Used for validation tracking during training.
pub fn macro_f1_multihot(pred: &[Vec<bool>], gold: &[Vec<bool>]) -> f64 {
    assert_eq!(pred.len(), gold.len());
    if pred.is_empty() {
        return 0.0;
    }
    let classes = gold[0].len();
    let mut sum = 0.0;
    for j in 0..classes {
        let (mut tp, mut fp, mut fne) = (0, 0, 0);
        for (p, g) in pred.iter().zip(gold) {
            match (p[j], g[j]) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fne += 1,
                (false, false) => {}
            }
        }
        sum += binary_prf(tp, fp, fne).2;
    }
    sum / classes as f64
}

fn pair_predictions<'a>(
    predictions: &'a [Prediction],
    manifest: &'a CorpusManifest,
) -> Result<Vec<(&'a crate::corpus::MemeInstance, &'a Prediction)>, EvalError> {
    let mut by_id: BTreeMap<&str, &Prediction> = BTreeMap::new();
    for p in predictions {
        if by_id.insert(p.meme_id.as_str(), p).is_some() {
            return Err(EvalError::DuplicatePrediction {
                id: p.meme_id.clone(),
            });
        }
    }
    let test_ids: BTreeSet<&str> = manifest
        .split_instances(Split::Test)
        .map(|i| i.id.as_str())
        .collect();
    for id in by_id.keys() {
        if !test_ids.contains(id) {
            return Err(EvalError::UnknownPrediction { id: id.to_string() });
        }
    }
    let mut pairs = Vec::new();
    for instance in manifest.split_instances(Split::Test) {
        let pred = by_id
            .get(instance.id.as_str())
            .ok_or_else(|| EvalError::MissingPrediction {
                id: instance.id.clone(),
            })?;
        if pred.mode != manifest.schema.decision_mode {
            return Err(EvalError::ModeMismatch(format!(
                "prediction for {} is {:?}, task is {:?}",
                instance.id, pred.mode, manifest.schema.decision_mode
            )));
        }
        pairs.push((instance, *pred));
    }
    Ok(pairs)
}

fn label_set(labels: &[String], schema: &LabelSchema) -> Result<Vec<bool>, EvalError> {
    let mut hot = vec![false; schema.label_count()];
    for label in labels {
        let j = schema
            .label_index(label)
            .ok_or_else(|| EvalError::ModeMismatch(format!("unknown label {label:?}")))?;
        hot[j] = true;
    }
    Ok(hot)
}

/// Scores predictions against the manifest's test split.
pub fn score(
    predictions: &[Prediction],
    manifest: &CorpusManifest,
    config: AblationConfig,
    run_fingerprint: &str,
) -> Result<EvalReport, EvalError> {
    let schema = &manifest.schema;
    let classes = schema.label_count();
    let pairs = pair_predictions(predictions, manifest)?;

    let (per_class, micro_f1, confusion) = match schema.decision_mode {
        DecisionMode::Multiclass => {
            let mut confusion = vec![vec![0usize; classes]; classes];
            for (instance, pred) in &pairs {
                if pred.decided.len() != 1 {
                    return Err(EvalError::ModeMismatch(format!(
                        "multiclass prediction for {} decided {} labels",
                        instance.id,
                        pred.decided.len()
                    )));
                }
                let gold = schema
                    .label_index(&instance.labels[0])
                    .expect("gold labels validated at ingestion");
                let hot = label_set(&pred.decided, schema)?;
                let decided = hot.iter().position(|&b| b).unwrap();
                confusion[gold][decided] += 1;
            }
            let mut per_class = Vec::with_capacity(classes);
            for j in 0..classes {
                let tp = confusion[j][j];
                let gold_total: usize = confusion[j].iter().sum();
                let pred_total: usize = confusion.iter().map(|row| row[j]).sum();
                let (p, r, f1, degenerate) =
                    binary_prf(tp, pred_total - tp, gold_total - tp);
                per_class.push(PerClass {
                    label: schema.labels[j].clone(),
                    precision: p,
                    recall: r,
                    f1,
                    support: gold_total,
                    degenerate,
                });
            }
            let correct: usize = (0..classes).map(|j| confusion[j][j]).sum();
            let micro = if pairs.is_empty() {
                0.0
            } else {
                correct as f64 / pairs.len() as f64
            };
            (per_class, micro, Some(confusion))
        }
        DecisionMode::Multilabel => {
            let mut tp = vec![0usize; classes];
            let mut fp = vec![0usize; classes];
            let mut fne = vec![0usize; classes];
            for (instance, pred) in &pairs {
                let gold = label_set(&instance.labels, schema)?;
                let decided = label_set(&pred.decided, schema)?;
                for j in 0..classes {
                    match (decided[j], gold[j]) {
                        (true, true) => tp[j] += 1,
                        (true, false) => fp[j] += 1,
                        (false, true) => fne[j] += 1,
                        (false, false) => {}
                    }
                }
            }
            let mut per_class = Vec::with_capacity(classes);
            for j in 0..classes {
                let (p, r, f1, degenerate) = binary_prf(tp[j], fp[j], fne[j]);
                per_class.push(PerClass {
                    label: schema.labels[j].clone(),
                    precision: p,
                    recall: r,
                    f1,
                    support: tp[j] + fne[j],
                    degenerate,
                });
            }
            // Micro over the flattened (instance, class) pairs.
            let (tp, fp, fne) = (
                tp.iter().sum::<usize>(),
                fp.iter().sum::<usize>(),
                fne.iter().sum::<usize>(),
            );
            (per_class, binary_prf(tp, fp, fne).2, None)
        }
    };

    let macro_f1 = per_class.iter().map(|c| c.f1).sum::<f64>() / classes as f64;
    let total_support: usize = per_class.iter().map(|c| c.support).sum();
    let weighted_f1 = if total_support == 0 {
        0.0
    } else {
        per_class
            .iter()
            .map(|c| c.f1 * c.support as f64)
            .sum::<f64>()
            / total_support as f64
    };
    Ok(EvalReport {
        task_id: schema.task_id,
        config,
        per_class,
        macro_f1,
        weighted_f1,
        micro_f1,
        confusion,
        run_fingerprint: run_fingerprint.to_string(),
    })
}

/// Gold-by-row, predicted-by-column counts. Multiclass only.
pub fn confusion_matrix(
    predictions: &[Prediction],
    manifest: &CorpusManifest,
) -> Result<Vec<Vec<usize>>, EvalError> {
    if manifest.schema.decision_mode != DecisionMode::Multiclass {
        return Err(EvalError::ModeMismatch(
            "confusion matrices are defined for multiclass tasks".to_string(),
        ));
    }
    let report = score(
        predictions,
        manifest,
        AblationConfig::ocr_only(),
        "confusion",
    )?;
    Ok(report.confusion.expect("multiclass score fills confusion"))
}

/// Trains and evaluates all eight input configurations in table order.
/// With `parallel` set, rows run on separate threads; every row is
/// deterministic, so the numbers cannot differ from a sequential run.
pub fn run_ablation(
    manifest: &CorpusManifest,
    cache: &ReasoningCache,
    indices: &IndexSet,
    provider: &dyn EmbeddingProvider,
    spec: &TrainingSpec,
    k: usize,
    parallel: bool,
) -> Result<Vec<EvalReport>, EvalError> {
    let configs = AblationConfig::enumerate();
    if parallel {
        let mut slots: Vec<Option<Result<EvalReport, EvalError>>> =
            (0..configs.len()).map(|_| None).collect();
        std::thread::scope(|scope| {
            for (slot, config) in slots.iter_mut().zip(configs) {
                scope.spawn(move || {
                    *slot = Some(run_one_config(manifest, cache, indices, provider, spec, k, config));
                });
            }
        });
        slots
            .into_iter()
            .map(|slot| slot.expect("every row ran"))
            .collect()
    } else {
        configs
            .into_iter()
            .map(|config| run_one_config(manifest, cache, indices, provider, spec, k, config))
            .collect()
    }
}

fn run_one_config(
    manifest: &CorpusManifest,
    cache: &ReasoningCache,
    indices: &IndexSet,
    provider: &dyn EmbeddingProvider,
    spec: &TrainingSpec,
    k: usize,
    config: AblationConfig,
) -> Result<EvalReport, EvalError> {
    let schema = &manifest.schema;
    let outcome = train(
        manifest,
        Some(cache),
        indices,
        Some(provider),
        config,
        spec,
        k,
    )?;
    let mut artifact = outcome.artifact;
    if schema.decision_mode == DecisionMode::Multilabel {
        let val_inputs = assemble_split_inputs(
            manifest,
            Split::Val,
            Some(cache),
            indices,
            Some(provider),
            config,
            schema,
            k,
            spec.max_seq_len,
        )?;
        artifact.thresholds = tune_thresholds_from_val(&artifact, &val_inputs, manifest)?;
    }
    let test_inputs = assemble_split_inputs(
        manifest,
        Split::Test,
        Some(cache),
        indices,
        Some(provider),
        config,
        schema,
        k,
        spec.max_seq_len,
    )?;
    let predictions = predict(&artifact, &test_inputs, None)?;
    score(&predictions, manifest, config, &artifact.fingerprint)
}

/// The retrieval contribution: the full configuration's metrics minus the
/// strongest no-retrieval configuration's (OCR+FCS).
pub fn rag_delta(reports: &[EvalReport]) -> Option<(f64, f64, f64)> {
    let full = reports.iter().find(|r| r.config == AblationConfig::full())?;
    let base = reports
        .iter()
        .find(|r| r.config == AblationConfig::new(true, false, true, false))?;
    Some((
        full.macro_f1 - base.macro_f1,
        full.weighted_f1 - base.weighted_f1,
        full.micro_f1 - base.micro_f1,
    ))
}

fn mark(flag: bool) -> &'static str {
    if flag {
        "x"
    } else {
        ""
    }
}

fn pct(v: f64) -> String {
    format!("{:.2}", v * 100.0)
}

/// Aligned text table over the ablation rows, with the retrieval delta
/// appended when both reference rows are present.
pub fn render_comparison(reports: &[EvalReport]) -> String {
    let headers = [
        "Config", "OCR", "OCR-RAG", "FCS", "FCS-RAG", "Macro-F1", "Weighted-F1", "Micro-F1",
    ];
    let mut rows: Vec<Vec<String>> = vec![headers.iter().map(|s| s.to_string()).collect()];
    for r in reports {
        rows.push(vec![
            r.config.name(),
            mark(r.config.use_ocr).to_string(),
            mark(r.config.use_ocr_rag).to_string(),
            mark(r.config.use_fcs).to_string(),
            mark(r.config.use_fcs_rag).to_string(),
            pct(r.macro_f1),
            pct(r.weighted_f1),
            pct(r.micro_f1),
        ]);
    }
    let widths: Vec<usize> = (0..headers.len())
        .map(|c| rows.iter().map(|row| row[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(cell, &w)| format!("{cell:<w$}"))
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
        if i == 0 {
            let total = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
            out.push_str(&"-".repeat(total));
            out.push('\n');
        }
    }
    if let Some((dm, dw, dmi)) = rag_delta(reports) {
        out.push('\n');
        out.push_str(&format!(
            "Delta-RAG (full vs OCR+FCS): macro {:+.2}, weighted {:+.2}, micro {:+.2}\n",
            dm * 100.0,
            dw * 100.0,
            dmi * 100.0
        ));
    }
    out
}

/// Per-class breakdown of one report as an aligned text table.
pub fn render_report(report: &EvalReport) -> String {
    let mut out = format!(
        "task: {}  config: {}  fingerprint: {}\n\n",
        report.task_id, report.config, report.run_fingerprint
    );
    let mut rows: Vec<Vec<String>> = vec![
        ["Label", "Precision", "Recall", "F1", "Support", ""]
            .iter()
            .map(|s| s.to_string())
            .collect(),
    ];
    for c in &report.per_class {
        rows.push(vec![
            c.label.clone(),
            pct(c.precision),
            pct(c.recall),
            pct(c.f1),
            c.support.to_string(),
            if c.degenerate { "degenerate".to_string() } else { String::new() },
        ]);
    }
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|c| rows.iter().map(|row| row[c].len()).max().unwrap_or(0))
        .collect();
    for row in &rows {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(cell, &w)| format!("{cell:<w$}"))
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out.push_str(&format!(
        "\nmacro-F1 {}  weighted-F1 {}  micro-F1 {}\n",
        pct(report.macro_f1),
        pct(report.weighted_f1),
        pct(report.micro_f1)
    ));
    if let Some(confusion) = &report.confusion {
        out.push_str("\nconfusion (rows gold, columns predicted):\n");
        for row in confusion {
            let cells: Vec<String> = row.iter().map(|c| format!("{c:>5}")).collect();
            out.push_str(&cells.join(" "));
            out.push('\n');
        }
    }
    out
}

/// CSV of the same rows, for plotting.
pub fn comparison_csv(reports: &[EvalReport]) -> String {
    let mut out =
        String::from("config,ocr,ocr_rag,fcs,fcs_rag,macro_f1,weighted_f1,micro_f1\n");
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{},{},{:.6},{:.6},{:.6}\n",
            r.config.name(),
            r.config.use_ocr as u8,
            r.config.use_ocr_rag as u8,
            r.config.use_fcs as u8,
            r.config.use_fcs_rag as u8,
            r.macro_f1,
            r.weighted_f1,
            r.micro_f1
        ));
    }
    if let Some((dm, dw, dmi)) = rag_delta(reports) {
        out.push_str(&format!(
            "delta_rag,,,,,{dm:.6},{dw:.6},{dmi:.6}\n"
        ));
    }
    out
}

/// Line-delimited report records.
pub fn save_reports(reports: &[EvalReport], path: &Path) -> Result<(), std::io::Error> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut buf = Vec::new();
    for report in reports {
        serde_json::to_writer(&mut buf, report).expect("report serializes");
        buf.push(b'\n');
    }
    std::fs::write(path, buf)
}

pub fn load_reports(path: &Path) -> Result<Vec<EvalReport>, std::io::Error> {
    let file = std::fs::File::open(path)?;
    let mut reports = Vec::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        reports.push(serde_json::from_str(&line).map_err(|e| {
            std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string())
        })?);
    }
    Ok(reports)
}
