use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use serde_json::Value;

fn larft(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_larft")).args(args).output().unwrap()
}

fn larft_stdin(args: &[&str], input: &str) -> Output {
    let mut child = Command::new(env!("CARGO_BIN_EXE_larft"))
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(input.as_bytes()).unwrap();
    child.wait_with_output().unwrap()
}

fn fixture(rel: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures").join(rel).display().to_string()
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

fn json(p: PathBuf) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

const SMALL_TRAIN: &str = r#"{
  "model": {"d_model": 8, "d_ff": 16, "max_context": 40},
  "batch_size": 4, "mini_batch_size": 4, "dataset_size": 8, "epochs": 1,
  "c_range": {"min": 3, "max": 8},
  "sampling": {"max_len": 16},
  "checkpoint_every": 1
}"#;

#[test]
fn score_one_record_from_stdin() {
    let out = larft_stdin(&["score"], "{\"text\": \"a b c\", \"target_words\": 3}\n");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rec: Value = serde_json::from_str(String::from_utf8(out.stdout).unwrap().trim()).unwrap();
    assert_eq!(rec["reward"], 1.0);
    assert_eq!(rec["word_count"], 3);
}

#[test]
fn score_into_a_directory_lists_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.jsonl");
    fs::write(&input, "{\"text\": \"one two\", \"target_words\": 4}\n{\"text\": \"x\", \"target_words\": 1}\n").unwrap();
    let run = dir.path().join("run");
    let out = larft(&["score", "--input", &s(&input), "--out", &s(&run)]);
    assert!(out.status.success());
    let m = json(run.join("manifest.json"));
    assert_eq!(m["status"], "completed");
    assert_eq!(m["details"]["records"], 2);
    for a in m["artifacts"].as_array().unwrap() {
        assert!(run.join(a.as_str().unwrap()).exists());
    }
}

#[test]
fn usage_and_config_exit_codes() {
    assert_eq!(larft(&[]).status.code(), Some(1));
    assert_eq!(larft(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(larft(&["--help"]).status.code(), Some(0));
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"optimizer": {"lr": 0.1}}"#).unwrap();
    let out = larft(&["train", "--out", &s(&dir.path().join("r")), "--config", &s(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("optimizer.lr"));
    let out = larft(&["train", "--out", &s(&dir.path().join("r")), "--group-size", "1"]);
    assert_eq!(out.status.code(), Some(2));
    let out = larft(&["score", "--input", &s(&dir.path().join("missing.jsonl"))]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn print_config_applies_file_then_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"seed": 5, "lambda_max": 0.5}"#).unwrap();
    let out = larft(&["train", "--out", &s(dir.path()), "--config", &s(&cfg), "--lambda-max", "0.25", "--print-config"]);
    assert!(out.status.success());
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["seed"], 5);
    assert_eq!(v["lambda_max"], 0.25);
    assert!(!dir.path().join("manifest.json").exists());
}

#[test]
fn train_grpo_only_manifest_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.json");
    fs::write(&cfg, SMALL_TRAIN).unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for run in [&a, &b] {
        let out = larft(&["train", "--out", &s(run), "--config", &s(&cfg), "--lambda-max", "0", "--seed", "3"]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let m = json(a.join("manifest.json"));
    assert_eq!(m["details"]["mode"], "grpo_only");
    assert_eq!(m["status"], "completed");
    for art in m["artifacts"].as_array().unwrap() {
        assert!(a.join(art.as_str().unwrap()).exists(), "{art}");
    }
    assert_eq!(fs::read(a.join("metrics.jsonl")).unwrap(), fs::read(b.join("metrics.jsonl")).unwrap());
    let mb = json(b.join("manifest.json"));
    for k in ["config_hash", "artifacts", "details", "seed", "command"] {
        assert_eq!(m[k], mb[k], "{k}");
    }

    let probe = dir.path().join("probe");
    let out = larft(&["probe", "--checkpoint", &s(&a), "--out", &s(&probe), "--examples", "20", "--folds", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let p = json(probe.join("probe.json"));
    assert_eq!(p["entries"].as_array().unwrap().len(), 4);
    assert!(probe.join("probe_plot.txt").exists());
}

#[test]
fn data_build_is_deterministic_and_conserves() {
    let dir = tempfile::tempdir().unwrap();
    let runs = [dir.path().join("a"), dir.path().join("b")];
    for run in &runs {
        let out = larft(&[
            "data",
            "build",
            "--corpus",
            &fixture("corpus.jsonl"),
            "--stub-table",
            &fixture("curation_stub.jsonl"),
            "--out",
            &s(run),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    assert_eq!(fs::read(runs[0].join("dataset.jsonl")).unwrap(), fs::read(runs[1].join("dataset.jsonl")).unwrap());
    let st = json(runs[0].join("stats.json"));
    let sum: u64 = ["invalid", "stage1_dropped", "stage2_dropped", "stage3_unsuitable", "quarantined", "stage4_dropped", "stage5_dropped", "records"]
        .iter()
        .map(|k| st[k].as_u64().unwrap())
        .sum();
    assert_eq!(sum, st["input"].as_u64().unwrap());
    let out = larft(&["data", "build", "--corpus", &fixture("corpus.jsonl"), "--out", &s(&dir.path().join("c"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn eval_prints_fixed_order_table() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("eval");
    let out = larft(&[
        "eval",
        "--cases",
        &fixture("bench/life.jsonl"),
        "--outputs",
        &fixture("bench/life_outputs_example.jsonl"),
        "--out",
        &s(&run),
        "--judge",
        "stub",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = String::from_utf8(out.stdout).unwrap();
    let first: Vec<&str> = table.lines().map(|l| l.split_whitespace().next().unwrap()).collect();
    assert_eq!(first, vec!["family", "overall", "life-style"]);
    let r = json(run.join("report.json"));
    assert_eq!(r["overall"]["cases"], 30);
    assert_eq!(r["overall"]["s_q"], 50.0);
    assert_eq!(fs::read_to_string(run.join("cases.jsonl")).unwrap().lines().count(), 30);
}
