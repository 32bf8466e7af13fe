//! End-to-end checks of the `drokit` binary against the bundled toy assets.

use std::fs;
use std::io::Write;
use std::process::{Command, Output, Stdio};

use serde_json::Value;

fn drokit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_drokit")).args(args).output().unwrap()
}

fn drokit_stdin(args: &[&str], input: &str) -> Output {
    let mut child = Command::new(env!("CARGO_BIN_EXE_drokit"))
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(input.as_bytes()).unwrap();
    child.wait_with_output().unwrap()
}

fn json_out(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn error_kind(out: &Output) -> String {
    assert_eq!(
        out.status.code(),
        Some(1),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let v: Value = serde_json::from_slice(&out.stderr).unwrap();
    v["error"]["kind"].as_str().unwrap().to_string()
}

const OSLO: &str = "db.users.aggregate([{$match:{city:'Oslo'}},{$project:{_id:0,name:1}}])";

#[test]
fn parse_prints_the_ast() {
    let v = json_out(&drokit(&["parse", OSLO]));
    assert_eq!(v["collection"], "users");
    assert_eq!(v["stages"][0]["operator"], "$match");
}

#[test]
fn parse_reports_syntax_errors_as_json() {
    assert_eq!(error_kind(&drokit(&["parse", "db.users.aggregate(["])), "syntax_error");
}

#[test]
fn query_can_come_from_stdin_and_files() {
    let from_stdin = json_out(&drokit_stdin(&["parse", "-"], OSLO));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("q.mql");
    fs::write(&path, OSLO).unwrap();
    let from_file = json_out(&drokit(&["parse", &format!("@{}", path.display())]));
    assert_eq!(from_stdin, from_file);
}

#[test]
fn exec_runs_against_the_toy_database() {
    let v = json_out(&drokit(&["exec", OSLO]));
    let rows = v.as_array().unwrap();
    assert!(!rows.is_empty());
    assert!(rows.iter().all(|r| r.as_object().unwrap().keys().eq(["name"])));
}

#[test]
fn exec_reports_runtime_errors() {
    let out = drokit(&["exec", "db.users.aggregate([{$limit:0}])"]);
    assert_eq!(error_kind(&out), "runtime_error");
}

#[test]
fn link_recovers_a_misspelled_field() {
    let v = json_out(&drokit(&[
        "link",
        "--k",
        "3",
        "db.users.aggregate([{$match:{cty:'Oslo'}}])",
    ]));
    assert_eq!(v["extracted"], serde_json::json!(["cty"]));
    assert!(v["fields"].as_array().unwrap().iter().any(|f| f == "city"));
    assert!(v["schema_text"].as_str().unwrap().contains("city"));
}

#[test]
fn ground_verifies_values_case_insensitively() {
    let v = json_out(&drokit(&["ground", "db.users.aggregate([{$match:{city:'oslo'}}])"]));
    let probe = &v[0]["verified"][0];
    assert_eq!(probe["matched"], true);
    assert_eq!(probe["case_insensitive"], true);
    assert_eq!(probe["sample"][0]["city"], "Oslo");
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(drokit(&["bogus"]).status.code(), Some(2));
    assert_eq!(drokit(&["link", "--k", "0", OSLO]).status.code(), Some(2));
    assert_eq!(drokit(&["--workers", "0", "parse", OSLO]).status.code(), Some(2));
}

#[test]
fn missing_config_is_reported() {
    let out = drokit(&["--config", "/nonexistent/drokit.json", "exec", OSLO]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn eval_writes_rows_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out = drokit(&["--out", dir.path().to_str().unwrap(), "eval"]);
    let summary = json_out(&out);
    let rows = fs::read_to_string(dir.path().join("eval.jsonl")).unwrap();
    assert_eq!(rows.lines().count(), 20);
    assert!(dir.path().join("summary.json").is_file());
    let ops = summary["ops"].as_f64().or_else(|| summary["overall"]["ops"].as_f64());
    assert!(ops.is_some_and(|o| (0.0..=1.0).contains(&o)), "{summary}");
}

#[test]
fn eval_replays_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let preds = dir.path().join("preds.jsonl");
    let reference = "<think>x</think>\n```javascript\ndb.users.aggregate([{$match:{city:'Oslo'}}])\n```";
    fs::write(
        &preds,
        serde_json::json!({"id": "q01", "response": reference}).to_string() + "\n",
    )
    .unwrap();
    let out = drokit(&["eval", "--predictions", preds.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let first: Value = serde_json::from_str(String::from_utf8_lossy(&out.stdout).lines().next().unwrap()).unwrap();
    assert_eq!(first["id"], "q01");
}

#[test]
fn synth_emits_the_requested_records() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("synth.jsonl");
    let out = drokit(&["--out", path.to_str().unwrap(), "synth", "--count", "3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&path).unwrap();
    let records: Vec<Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(!records.is_empty() && records.len() <= 3);
    for r in &records {
        assert!(r["score"].as_f64().unwrap() >= 0.8);
        assert!(r["question"].as_str().is_some_and(|q| !q.is_empty()));
    }
    let stats: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert!(stats.is_object());
}

#[test]
fn dro_export_mode_writes_a_batch() {
    let dir = tempfile::tempdir().unwrap();
    let out = drokit(&[
        "--out",
        dir.path().to_str().unwrap(),
        "dro",
        "--mode",
        "export",
        "--iterations",
        "1",
    ]);
    let v = json_out(&out);
    assert_eq!(v["completed_rounds"], 1);
    let round = std::path::Path::new(v["run_dir"].as_str().unwrap()).join("round-1");
    assert!(round.join("DONE").is_file());
}

#[test]
fn dro_is_deterministic_for_a_seed() {
    let run = |seed: &str| {
        let dir = tempfile::tempdir().unwrap();
        json_out(&drokit(&[
            "--seed",
            seed,
            "--out",
            dir.path().to_str().unwrap(),
            "dro",
            "--mode",
            "toy",
        ]));
        fs::read(dir.path().join("toy").join("round-3").join("metrics.json")).unwrap()
    };
    assert_eq!(run("4"), run("4"));
}
