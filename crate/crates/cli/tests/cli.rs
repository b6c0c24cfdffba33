//! End-to-end checks of the command-line surface: exit codes, file outputs
//! and cross-run determinism.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_visitcast"))
}

fn run(args: &[&str], dir: &Path) -> Output {
    bin()
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], dir: &Path) -> Output {
    let out = run(args, dir);
    assert!(
        out.status.success(),
        "command {:?} failed:\n{}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = bin().arg("generate").arg("--bogus").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let out = bin().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_input_is_a_runtime_error_naming_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        &["train", "--cohort", "nope.jsonl", "--out", "m.ckpt"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("error [train]"), "stderr: {stderr}");
}

#[test]
fn generate_writes_cohort_and_vocabulary_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    ok(
        &[
            "generate", "--patients", "30", "--codes", "15", "--mean-visits", "6",
            "--seed", "3", "--out", "c.jsonl",
        ],
        dir.path(),
    );
    let cohort = fs::read_to_string(dir.path().join("c.jsonl")).unwrap();
    assert_eq!(cohort.lines().count(), 30);
    let first: serde_json::Value = serde_json::from_str(cohort.lines().next().unwrap()).unwrap();
    assert!(first.get("pid").is_some() && first.get("visits").is_some());
    let vocab: Vec<String> =
        serde_json::from_str(&fs::read_to_string(dir.path().join("c.vocab.json")).unwrap()).unwrap();
    assert!(!vocab.is_empty() && vocab.len() <= 15);
}

#[test]
fn generate_is_deterministic_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a.jsonl", "b.jsonl"] {
        ok(
            &[
                "generate", "--patients", "20", "--codes", "10", "--mean-visits", "5",
                "--seed", "9", "--out", name,
            ],
            dir.path(),
        );
    }
    assert_eq!(
        fs::read(dir.path().join("a.jsonl")).unwrap(),
        fs::read(dir.path().join("b.jsonl")).unwrap()
    );
}

/// The whole surface on one tiny dataset: split, pretrain, train (skip-gram
/// mode), evaluate, baselines, probe, predict, transfer.
#[test]
fn full_surface_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(
        &[
            "generate", "--patients", "50", "--codes", "12", "--hidden-states", "4",
            "--mean-visits", "7", "--mean-gap", "25", "--seed", "5", "--out", "cohort.jsonl",
        ],
        d,
    );
    ok(
        &[
            "split", "--cohort", "cohort.jsonl", "--vocab", "cohort.vocab.json",
            "--fraction", "0.8", "--seed", "5", "--train-out", "train.jsonl",
            "--test-out", "test.jsonl",
        ],
        d,
    );
    ok(
        &[
            "pretrain-embeddings", "--cohort", "train.jsonl", "--vocab", "cohort.vocab.json",
            "--dim", "8", "--epochs", "2", "--seed", "5", "--out", "emb.json",
        ],
        d,
    );
    ok(
        &[
            "train", "--cohort", "train.jsonl", "--vocab", "cohort.vocab.json",
            "--epochs", "2", "--hidden", "12", "--layers", "2", "--dropout", "0.2",
            "--embedding", "skipgram", "--skipgram-file", "emb.json",
            "--seed", "5", "--out", "model.ckpt",
        ],
        d,
    );
    assert!(d.join("model.history.csv").exists());

    let out = ok(
        &["evaluate", "--model", "model.ckpt", "--cohort", "test.jsonl", "--ks", "10,20,30"],
        d,
    );
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["recall"].as_array().unwrap().len(), 3);
    assert!(report.get("r2").is_some());

    ok(
        &[
            "baselines", "--kind", "most-frequent", "--test-cohort", "test.jsonl",
            "--vocab", "cohort.vocab.json", "--ks", "10", "--report-out", "mf.json",
        ],
        d,
    );
    ok(
        &[
            "baselines", "--kind", "logistic", "--cohort", "train.jsonl",
            "--test-cohort", "test.jsonl", "--epochs", "2", "--ks", "10",
            "--out", "logit.ckpt", "--report-out", "logit.json",
        ],
        d,
    );

    let vocab: Vec<String> =
        serde_json::from_str(&fs::read_to_string(d.join("cohort.vocab.json")).unwrap()).unwrap();
    ok(
        &[
            "probe", "--model", "model.ckpt", "--code", &vocab[0], "--repeats", "10",
            "--gap", "20", "--out", "probe.csv",
        ],
        d,
    );
    let probe = fs::read_to_string(d.join("probe.csv")).unwrap();
    assert_eq!(probe.lines().count(), 11, "header + 10 steps");

    // One patient pulled from the test cohort for prediction.
    let first_line = fs::read_to_string(d.join("test.jsonl"))
        .unwrap()
        .lines()
        .next()
        .unwrap()
        .to_string();
    fs::write(d.join("patient.json"), &first_line).unwrap();
    let out = ok(
        &["predict", "--model", "model.ckpt", "--patient", "patient.json", "--k", "5"],
        d,
    );
    let pred: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(pred["top"].as_array().unwrap().len(), 5);
    assert!(pred["predicted_gap_days"].as_f64().unwrap() >= 0.0);

    // Disjoint target cohort from the same generator seed.
    ok(
        &[
            "generate", "--patients", "20", "--codes", "12", "--hidden-states", "4",
            "--mean-visits", "7", "--mean-gap", "25", "--seed", "5", "--patient-seed", "99",
            "--out", "target.jsonl",
        ],
        d,
    );
    ok(
        &[
            "transfer", "--source-model", "model.ckpt", "--target-cohort", "target.jsonl",
            "--epochs", "1", "--seed", "5", "--out", "ft.ckpt",
        ],
        d,
    );
    assert!(d.join("ft.ckpt").exists());
}

#[test]
fn evaluate_rejects_cohort_with_unknown_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(
        &[
            "generate", "--patients", "20", "--codes", "8", "--mean-visits", "5",
            "--seed", "2", "--out", "c.jsonl",
        ],
        d,
    );
    ok(
        &[
            "train", "--cohort", "c.jsonl", "--vocab", "c.vocab.json", "--epochs", "1",
            "--hidden", "8", "--layers", "1", "--emb-dim", "6", "--seed", "2",
            "--out", "m.ckpt",
        ],
        d,
    );
    // A cohort whose codes the model never saw.
    fs::write(
        d.join("alien.jsonl"),
        r#"{"pid":"x","visits":[{"t":1,"codes":["997"]},{"t":2,"codes":["998"]}]}"#,
    )
    .unwrap();
    let out = run(
        &["evaluate", "--model", "m.ckpt", "--cohort", "alien.jsonl"],
        d,
    );
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("error [evaluate]"), "stderr: {stderr}");
}
