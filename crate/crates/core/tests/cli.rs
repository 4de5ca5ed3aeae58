use std::path::Path;
use std::process::{Command, Output};

use autocl::search::{Candidate, CandidateScore};
use autocl::Strategy;

const SMALL: [&str; 6] = ["--depth", "1", "--hidden", "4", "--out-dim", "4"];

fn autocl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_autocl")).args(args).env_remove("AUTOCL_SEED").output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = autocl(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn search(task: &str, data: &str, out: &Path, seed: &str) {
    let mut args = vec!["search", "--task", task, "--data", data, "--iters", "3", "--seed", seed];
    args.extend(SMALL);
    args.extend(["--out", out.to_str().unwrap()]);
    ok(&args);
}

fn read<T: serde::de::DeserializeOwned>(path: &Path) -> T {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

const CLASS: &str = "synth:classification:n=8,t=16,classes=2";

#[test]
fn help_and_version_exit_zero() {
    assert!(ok(&["--help"]).stdout.starts_with(b"Automated"));
    ok(&["--version"]);
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(autocl(&["search"]).status.code(), Some(2));
    assert_eq!(autocl(&["search", "--task", "regression", "--data", CLASS, "--out", "x"]).status.code(), Some(2));
    let out = Command::new(env!("CARGO_BIN_EXE_autocl"))
        .args(["search", "--task", "classification", "--data", CLASS, "--out", "x"])
        .env("AUTOCL_SEED", "not-a-number")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("AUTOCL_SEED"));
}

#[test]
fn missing_data_file_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let missing = dir.path().join("absent.txt");
    let status = autocl(&["search", "--task", "classification", "--data", missing.to_str().unwrap(), "--out", out.to_str().unwrap()]).status;
    assert_eq!(status.code(), Some(3));
}

#[test]
fn search_evaluate_report_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    search("classification", CLASS, &run, "3");
    for f in ["trace.jsonl", "candidates.json", "run.json", "encoder.ckpt", "controller.ckpt", "complexity.json"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    assert_eq!(std::fs::read_to_string(run.join("trace.jsonl")).unwrap().lines().count(), 3);
    let cands: Vec<Candidate> = read(&run.join("candidates.json"));
    assert!(!cands.is_empty());
    assert!(cands.windows(2).all(|w| w[0].reward >= w[1].reward));

    let eval = dir.path().join("eval");
    ok(&["evaluate", "--candidates", run.join("candidates.json").to_str().unwrap(), "--pretrain-iters", "1", "--out", eval.to_str().unwrap()]);
    let ranking: Vec<CandidateScore> = read(&eval.join("ranking.json"));
    assert_eq!(ranking.len(), cands.len());
    assert!(ranking.windows(2).all(|w| w[0].val_score >= w[1].val_score));
    assert!(ranking[0].test_score.is_some());
    let best = Strategy::from_json(&std::fs::read_to_string(eval.join("best_strategy.json")).unwrap()).unwrap();
    assert_eq!(best, ranking[0].strategy);

    let ckpt = eval.join("best_encoder.ckpt");
    let metrics = dir.path().join("metrics.json");
    let mut args = vec!["report", "--checkpoint", ckpt.to_str().unwrap(), "--task", "classification", "--data", CLASS, "--seed", "3"];
    args.extend(SMALL);
    args.extend(["--out", metrics.to_str().unwrap()]);
    ok(&args);
    let records: serde_json::Value = read(&metrics);
    let acc = records.as_array().unwrap().iter().find(|r| r["metric"] == "acc").unwrap();
    assert_eq!(acc["split"], "test");
    assert_eq!(acc["value"].as_f64().unwrap(), ranking[0].test_score.unwrap());
}

#[test]
fn seed_variable_overrides_flag() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    search("classification", CLASS, &a, "9");
    let mut args = vec!["search", "--task", "classification", "--data", CLASS, "--iters", "3", "--seed", "1"];
    args.extend(SMALL);
    args.extend(["--out", b.to_str().unwrap()]);
    let out = Command::new(env!("CARGO_BIN_EXE_autocl")).args(&args).env("AUTOCL_SEED", "9").output().unwrap();
    assert!(out.status.success());
    let strip = |p: &Path| -> Vec<serde_json::Value> {
        std::fs::read_to_string(p.join("trace.jsonl"))
            .unwrap()
            .lines()
            .map(|l| {
                let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
                v.as_object_mut().unwrap().remove("wallclock_ms");
                v
            })
            .collect()
    };
    assert_eq!(strip(&a), strip(&b));
}

#[test]
fn pretrain_preset_writes_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("nested").join("enc.ckpt");
    let mut args = vec!["pretrain", "--strategy", "ggs", "--task", "classification", "--data", CLASS, "--epochs", "1"];
    args.extend(SMALL);
    args.extend(["--out", ckpt.to_str().unwrap()]);
    let out = ok(&args);
    assert!(std::fs::metadata(&ckpt).unwrap().len() > 0);
    let records: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(records.as_array().unwrap().iter().all(|r| r["split"] == "val"));
}

#[test]
fn ggs_composes_three_runs() {
    let dir = tempfile::tempdir().unwrap();
    let runs = [
        ("classification", CLASS),
        ("forecast", "synth:forecast:t=1000"),
        ("anomaly", "synth:anomaly:t=1000"),
    ];
    let mut dirs = Vec::new();
    for (task, data) in runs {
        let d = dir.path().join(task);
        search(task, data, &d, "2");
        dirs.push(d);
    }
    let out = dir.path().join("ggs.json");
    let mut args = vec!["ggs", "--topk", "2", "--from"];
    args.extend(dirs.iter().map(|d| d.to_str().unwrap()));
    args.extend(["--out", out.to_str().unwrap()]);
    ok(&args);
    Strategy::from_json(&std::fs::read_to_string(&out).unwrap()).unwrap();
    let details: serde_json::Value = read(&dir.path().join("ggs.details.json"));
    assert_eq!(details["triple"].as_array().unwrap().len(), 3);

    assert_eq!(autocl(&["ggs", "--topk", "0", "--from", "a", "b", "c", "--out", "x"]).status.code(), Some(2));
}
