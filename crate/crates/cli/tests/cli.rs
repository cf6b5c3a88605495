//! Drives the compiled binary end to end on a synthetic corpus with a
//! scripted reasoning backend.

use std::path::{Path, PathBuf};
use std::process::Command;

use memesense::classifier::AblationConfig;
use memesense::corpus::{save_manifest, TaskId};
use memesense::pipeline::{
    EmbeddingSettings, ReasonerSettings, RetrievalSettings, RunConfig, RunPaths,
    ThresholdSettings,
};
use memesense::synthetic::{fixture_training_spec, synthetic_anxiety_corpus};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_memesense"))
}

/// Writes source corpus, scripted responses, and a config file; returns
/// the config path.
fn setup(dir: &Path) -> PathBuf {
    let corpus = synthetic_anxiety_corpus(42);
    save_manifest(&corpus.manifest, &dir.join("source.jsonl")).unwrap();
    std::fs::write(
        dir.join("script.json"),
        serde_json::to_string_pretty(&corpus.responses).unwrap(),
    )
    .unwrap();
    let mut training = fixture_training_spec(42);
    training.epochs = 2;
    let config = RunConfig {
        task: TaskId::Anxiety,
        paths: RunPaths {
            source: Some(dir.join("source.jsonl")),
            manifest: dir.join("manifest.jsonl"),
            cache: dir.join("reasoning_cache.jsonl"),
            index_dir: dir.join("indexes"),
            model_dir: dir.join("model"),
            report_dir: dir.join("reports"),
            run_dir: dir.join("run"),
        },
        reasoner: ReasonerSettings {
            script: Some(dir.join("script.json")),
            ..Default::default()
        },
        embedding: EmbeddingSettings {
            provider: "tokenhash".to_string(),
            dimension: 32,
        },
        retrieval: RetrievalSettings::default(),
        inputs: AblationConfig::full(),
        thresholds: ThresholdSettings::default(),
        training,
    };
    let path = dir.join("config.toml");
    std::fs::write(&path, config.to_toml()).unwrap();
    path
}

fn run_ok(cmd: &mut Command) -> String {
    let output = cmd.output().unwrap();
    assert!(
        output.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr)
    );
    String::from_utf8_lossy(&output.stdout).to_string()
}

#[test]
fn full_run_completes_and_reruns_skip() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path());

    let stdout = run_ok(bin().arg("run").arg("--config").arg(&config));
    for stage in [
        "ingest", "reason", "index", "train", "tune-thresholds", "predict", "evaluate", "ablate",
    ] {
        assert!(stdout.contains(&format!("{stage}: done")), "{stdout}");
    }
    let report = dir.path().join("reports/eval_report.json");
    assert!(report.exists());
    let ablation = std::fs::read_to_string(dir.path().join("reports/ablation.txt")).unwrap();
    assert!(ablation.contains("OCR+OCR-RAG+FCS+FCS-RAG"));
    assert!(ablation.contains("Delta-RAG"));
    let report_bytes = std::fs::read(&report).unwrap();

    let stdout = run_ok(bin().arg("run").arg("--config").arg(&config));
    for stage in ["ingest", "reason", "ablate"] {
        assert!(stdout.contains(&format!("{stage}: skipped")), "{stdout}");
    }
    assert_eq!(std::fs::read(&report).unwrap(), report_bytes);
}

#[test]
fn evaluate_before_predict_names_the_missing_stage() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path());
    run_ok(bin().arg("ingest").arg("--config").arg(&config));

    let output = bin()
        .arg("evaluate")
        .arg("--config")
        .arg(&config)
        .output()
        .unwrap();
    assert!(!output.status.success());
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("predict"), "{stderr}");
}

#[test]
fn dry_run_plans_without_executing() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path());

    let stdout = run_ok(bin().arg("run").arg("--config").arg(&config).arg("--dry-run"));
    assert!(stdout.contains("1. ingest"), "{stdout}");
    assert!(stdout.contains("8. ablate"), "{stdout}");
    assert!(stdout.contains("writes"), "{stdout}");
    assert!(!dir.path().join("manifest.jsonl").exists());
}

#[test]
fn direct_evaluate_and_flag_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path());
    run_ok(
        bin()
            .arg("run")
            .arg("--config")
            .arg(&config)
            .arg("--stages")
            .arg("ingest,reason,index,train,tune-thresholds,predict"),
    );

    let out_dir = dir.path().join("direct_eval");
    let stdout = run_ok(
        bin()
            .arg("evaluate")
            .arg("--pred")
            .arg(dir.path().join("reports/predictions.jsonl"))
            .arg("--manifest")
            .arg(dir.path().join("manifest.jsonl"))
            .arg("--task")
            .arg("anxiety")
            .arg("--out")
            .arg(&out_dir),
    );
    assert!(stdout.contains("macro-F1"), "{stdout}");
    assert!(out_dir.join("eval_report.json").exists());
    assert!(out_dir.join("eval_report.txt").exists());

    // A flag override wins over the config file: predictions land in a
    // different report directory.
    let alt_reports = dir.path().join("alt_reports");
    run_ok(
        bin()
            .arg("predict")
            .arg("--config")
            .arg(&config)
            .arg("--report-dir")
            .arg(&alt_reports),
    );
    assert!(alt_reports.join("predictions.jsonl").exists());
}

#[test]
fn direct_ablate_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path());
    run_ok(
        bin()
            .arg("run")
            .arg("--config")
            .arg(&config)
            .arg("--stages")
            .arg("ingest,reason,index"),
    );
    let mut spec = fixture_training_spec(42);
    spec.epochs = 2;
    let spec_path = dir.path().join("spec.json");
    std::fs::write(&spec_path, serde_json::to_string(&spec).unwrap()).unwrap();

    let out = dir.path().join("ablation_out");
    let stdout = run_ok(
        bin()
            .arg("ablate")
            .arg("--task")
            .arg("anxiety")
            .arg("--manifest")
            .arg(dir.path().join("manifest.jsonl"))
            .arg("--cache")
            .arg(dir.path().join("reasoning_cache.jsonl"))
            .arg("--indices")
            .arg(dir.path().join("indexes"))
            .arg("--spec")
            .arg(&spec_path)
            .arg("--provider")
            .arg("tokenhash")
            .arg("--dimension")
            .arg("32")
            .arg("--out")
            .arg(&out),
    );
    assert!(stdout.contains("Delta-RAG"), "{stdout}");
    assert!(out.join("ablation.jsonl").exists());
    assert!(out.join("ablation.csv").exists());

    let stdout = run_ok(bin().arg("report").arg("--runs").arg(&out));
    assert!(stdout.contains("Delta-RAG"), "{stdout}");
    assert!(out.join("comparison.csv").exists());
}

#[test]
fn cache_dir_env_overrides_cache_location() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path());
    let alt = dir.path().join("altcache");
    run_ok(
        bin()
            .arg("run")
            .arg("--config")
            .arg(&config)
            .arg("--stages")
            .arg("ingest,reason")
            .env("MEMESENSE_CACHE_DIR", &alt),
    );
    assert!(alt.join("reasoning_cache.jsonl").exists());
    assert!(!dir.path().join("reasoning_cache.jsonl").exists());
}
