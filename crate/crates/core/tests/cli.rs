use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn qagen(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qagen"))
        .args(args)
        .env_remove("QAGEN_CHECKPOINT_DIR")
        .output()
        .unwrap()
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(qagen(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(qagen(&["ingest", "--bogus"]).status.code(), Some(2));
    assert_eq!(qagen(&["evaluate", "--pred", "p.jsonl"]).status.code(), Some(2));
    assert_eq!(qagen(&["--help"]).status.code(), Some(0));
}

#[test]
fn failures_exit_1_and_name_the_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "version = 1\ncorpus = [\"missing\"]\n[backend]\nname = \"mock\"\n").unwrap();
    let out = qagen(&["ingest", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("stage ingest failed"), "{err}");
}

#[test]
fn stages_run_one_at_a_time_then_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = fixtures().join("pipeline.toml");
    let base = ["--config", cfg.to_str().unwrap(), "--out-dir", tmp.path().to_str().unwrap(), "--num-runs", "2"];
    for stage in ["ingest", "sample-answers", "train-qgen", "generate", "filter", "train-mrqa", "evaluate"] {
        let mut args = vec![stage];
        args.extend(base);
        let out = qagen(&args);
        assert_eq!(out.status.code(), Some(0), "{stage}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(tmp.path().join("eval_report.json")).unwrap()).unwrap();
    assert_eq!(report["runs"].as_array().unwrap().len(), 2);
    let out = qagen(&["report", "--run-dir", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("±"));
}

#[test]
fn evaluate_prediction_file() {
    let tmp = tempfile::tempdir().unwrap();
    let gold = fixtures().join("dev.jsonl");
    let samples = qagen::mrqa_format::load_mrqa_jsonl(&gold, false).unwrap();
    let preds: String = samples
        .iter()
        .map(|s| serde_json::json!({"id": s.id, "prediction": s.answers[0].text}).to_string() + "\n")
        .collect();
    let pred = tmp.path().join("pred.jsonl");
    std::fs::write(&pred, preds).unwrap();
    let out = qagen(&["evaluate", "--pred", pred.to_str().unwrap(), "--gold", gold.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["f1"], 100.0);
}
