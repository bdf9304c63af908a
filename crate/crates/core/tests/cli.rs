//! End-to-end runs of the `rumorgraph` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rumorgraph"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// A small synthetic pair plus a trained single-fit snapshot.
fn workspace() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("spec.json"),
        r#"{"source_events": 30, "target_events": 16}"#,
    )
    .unwrap();
    let o = run(dir.path(), &["synth", "--spec", "spec.json", "--out", "data"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    fs::write(
        dir.path().join("fit.json"),
        r#"{
            "source": "data/source.jsonl",
            "target": "data/target.jsonl",
            "test": "data/target.jsonl",
            "embeddings": "hashed:16",
            "out": "fit",
            "mode": "fit",
            "checkpoints": {"mode": "post_count", "values": [1, 3, 6, 18446744073709551615]},
            "train": {"model": {"d_in": 16, "d_hidden": 8, "d_out": 4}, "max_epochs": 3, "learning_rate": 0.01}
        }"#,
    )
    .unwrap();
    let o = run(dir.path(), &["train", "--config", "fit.json"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    dir
}

#[test]
fn validate_prints_statistics() {
    let dir = workspace();
    let o = run(
        dir.path(),
        &[
            "validate",
            "--events",
            "data/source.jsonl",
            "--events",
            "data/target.jsonl",
        ],
    );
    assert_eq!(code(&o), 0);
    let out = stdout(&o);
    assert!(out.contains("# events        30"), "{out}");
    assert!(out.contains("# events        16"), "{out}");
    assert!(out.contains("# rumors        15"), "{out}");
}

#[test]
fn train_writes_the_artifact_set() {
    let dir = workspace();
    let fit = dir.path().join("fit");
    for f in [
        "model.bin",
        "metrics.json",
        "config.json",
        "manifest.json",
        "train_log.jsonl",
        "early_detection.csv",
    ] {
        assert!(fit.join(f).exists(), "missing {f}");
    }
    let metrics: serde_json::Value = serde_json::from_slice(&fs::read(fit.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["schema_version"], 1);
    assert_eq!(metrics["report"]["epochs"], 3);
    let log = fs::read_to_string(fit.join("train_log.jsonl")).unwrap();
    assert!(log
        .lines()
        .all(|l| serde_json::from_str::<serde_json::Value>(l).is_ok()));
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(fit.join("manifest.json")).unwrap()).unwrap();
    assert!(manifest["files"]
        .as_array()
        .unwrap()
        .iter()
        .any(|f| f["path"] == "model.bin"));
    let curve = fs::read_to_string(fit.join("early_detection.csv")).unwrap();
    assert_eq!(curve.lines().count(), 5);
}

#[test]
fn earlydetect_emits_one_row_per_checkpoint() {
    let dir = workspace();
    let o = run(
        dir.path(),
        &[
            "earlydetect",
            "--snapshot",
            "fit/model.bin",
            "--events",
            "data/target.jsonl",
            "--checkpoints",
            "600,3600,86400,inf",
            "--mode",
            "time",
            "--embeddings",
            "hashed:16",
            "--out",
            "ed",
        ],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(dir.path().join("ed/early_detection.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "checkpoint,accuracy,macro_f1,f1_rumor,f1_nonrumor");
    assert_eq!(lines.len(), 5);
    assert!(lines[4].starts_with("inf,"));
    // the unbounded row matches the fit's own curve on the same events
    let fit_curve = fs::read_to_string(dir.path().join("fit/early_detection.csv")).unwrap();
    assert_eq!(
        lines[4].split_once(',').unwrap().1,
        fit_curve.lines().last().unwrap().split_once(',').unwrap().1
    );
}

#[test]
fn export_features_writes_two_columns() {
    let dir = workspace();
    let o = run(
        dir.path(),
        &[
            "export-features",
            "--snapshot",
            "fit/model.bin",
            "--events",
            "data/target.jsonl",
            "--embeddings",
            "hashed:16",
            "--out",
            "pca",
        ],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(dir.path().join("pca/pca.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "event_id,label,x,y");
    assert_eq!(lines.len(), 17);
    assert!(lines[1..].iter().all(|l| l.split(',').count() == 4));
    let sidecar: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("pca/pca.json")).unwrap()).unwrap();
    assert_eq!(sidecar["explained_variance"].as_array().unwrap().len(), 2);
}

#[test]
fn synth_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        assert_eq!(code(&run(dir.path(), &["--seed", "5", "synth", "--out", out])), 0);
    }
    assert_eq!(code(&run(dir.path(), &["--seed", "6", "synth", "--out", "c"])), 0);
    let read = |d: &str| fs::read(dir.path().join(d).join("target.jsonl")).unwrap();
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    // missing file
    assert_eq!(code(&run(p, &["validate", "--events", "nope.jsonl"])), 1);
    // malformed thread
    fs::write(
        p.join("bad.jsonl"),
        r#"{"event_id":"a","label":"rumor","claim":{"post_id":"c","text":"x","timestamp":0},"posts":[{"post_id":"r","parent_id":"zz","text":"y","timestamp":1}]}"#,
    )
    .unwrap();
    assert_eq!(code(&run(p, &["validate", "--events", "bad.jsonl"])), 1);
    // unknown config key
    fs::write(
        p.join("cfg.json"),
        r#"{"source": "s", "target": "t", "embeddings": "hashed:8", "out": "o", "bogus": 1}"#,
    )
    .unwrap();
    assert_eq!(code(&run(p, &["train", "--config", "cfg.json"])), 2);
    // invalid hyper-parameter
    fs::write(
        p.join("cfg.json"),
        r#"{"source": "s", "target": "t", "embeddings": "hashed:8", "out": "o", "train": {"alpha": 2.0}}"#,
    )
    .unwrap();
    assert_eq!(code(&run(p, &["train", "--config", "cfg.json"])), 2);
    // bad checkpoint list
    assert_eq!(
        code(&run(
            p,
            &[
                "earlydetect",
                "--snapshot",
                "x",
                "--events",
                "y",
                "--checkpoints",
                "5,1",
                "--mode",
                "count",
                "--out",
                "o"
            ]
        )),
        2
    );
    // missing snapshot
    assert_eq!(
        code(&run(
            p,
            &[
                "earlydetect",
                "--snapshot",
                "x",
                "--events",
                "y",
                "--checkpoints",
                "1,5",
                "--mode",
                "count",
                "--out",
                "o"
            ]
        )),
        1
    );
    // CLI usage error
    assert_eq!(code(&run(p, &["frobnicate"])), 2);
}

#[test]
fn too_few_target_events_for_the_folds() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(p.join("spec.json"), r#"{"source_events": 10, "target_events": 4}"#).unwrap();
    assert_eq!(code(&run(p, &["synth", "--spec", "spec.json", "--out", "data"])), 0);
    fs::write(
        p.join("cv.json"),
        r#"{"source": "data/source.jsonl", "target": "data/target.jsonl", "embeddings": "hashed:8",
            "out": "o", "folds": 5, "train": {"model": {"d_in": 8, "d_hidden": 4, "d_out": 4}}}"#,
    )
    .unwrap();
    assert_eq!(code(&run(p, &["train", "--config", "cv.json"])), 2);
}
