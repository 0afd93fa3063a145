//! End-to-end checks of the `interleave` binary.

use serde_json::Value;
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_interleave"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn json_lines(path: &Path) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn gen_data_is_deterministic() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(&["gen-data", "--out", "a.jsonl", "--n", "100", "--seed", "7"], d.path())), 0);
    assert_eq!(code(&run(&["gen-data", "--out", "b.jsonl", "--n", "100", "--seed", "7"], d.path())), 0);
    let a = fs::read(d.path().join("a.jsonl")).unwrap();
    assert_eq!(a, fs::read(d.path().join("b.jsonl")).unwrap());
    assert_eq!(a.iter().filter(|b| **b == b'\n').count(), 100);
}

#[test]
fn gen_data_empty_corpus() {
    let d = tempfile::tempdir().unwrap();
    let o = run(&["gen-data", "--out", "e.jsonl", "--n", "0"], d.path());
    assert_eq!(code(&o), 0);
    assert!(fs::read_to_string(d.path().join("e.jsonl")).unwrap().is_empty());
}

#[test]
fn gen_data_balance_equalises_strata() {
    let d = tempfile::tempdir().unwrap();
    let o = run(
        &["gen-data", "--out", "bal.jsonl", "--n", "600", "--seed", "3", "--kinds", "single,single,open", "--balance"],
        d.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let mut strata: BTreeMap<(String, String), usize> = BTreeMap::new();
    for v in json_lines(&d.path().join("bal.jsonl")) {
        let primary = v["gold_diseases"][0].as_str().unwrap().to_string();
        *strata.entry((v["kind"].as_str().unwrap().to_string(), primary)).or_default() += 1;
    }
    let counts: Vec<usize> = strata.values().copied().collect();
    assert!(counts.len() > 1);
    assert!(counts.iter().all(|c| *c == counts[0]), "{strata:?}");
}

#[test]
fn gen_data_unwritable_path_is_a_data_error() {
    let d = tempfile::tempdir().unwrap();
    let o = run(&["gen-data", "--out", "missing/dir/x.jsonl", "--n", "3"], d.path());
    assert_eq!(code(&o), 2);
}

#[test]
fn usage_errors_exit_one() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(&["gen-data", "--n", "3"], d.path())), 1);
    assert_eq!(code(&run(&["nonsense"], d.path())), 1);
    assert_eq!(code(&run(&["gen-data", "--out", "x", "--n", "3", "--kinds", "weird"], d.path())), 1);
    assert_eq!(code(&run(&["--help"], d.path())), 0);
}

fn corpus(dir: &Path) {
    assert_eq!(code(&run(&["gen-data", "--out", "c.jsonl", "--n", "200", "--seed", "1"], dir)), 0);
}

#[test]
fn train_zero_steps_checkpoints_initial_params() {
    let d = tempfile::tempdir().unwrap();
    corpus(d.path());
    fs::write(d.path().join("cfg.json"), r#"{"n_closed": 0, "n_open": 0, "eval_cases": 5}"#).unwrap();
    let o = run(&["train", "--corpus", "c.jsonl", "--config", "cfg.json", "--out-dir", "out"], d.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = d.path().join("out");
    assert!(out.join("checkpoint_initial.jsonl").exists());
    assert!(out.join("summary.json").exists());
    let summary: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(summary["steps"], 0);
}

#[test]
fn train_missing_corpus_is_a_data_error() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("cfg.json"), "{}").unwrap();
    let o = run(&["train", "--corpus", "nope.jsonl", "--config", "cfg.json", "--out-dir", "out"], d.path());
    assert_eq!(code(&o), 2);
}

#[test]
fn train_malformed_config_names_the_field() {
    let d = tempfile::tempdir().unwrap();
    corpus(d.path());
    fs::write(d.path().join("cfg.json"), r#"{"lambda": 3.0}"#).unwrap();
    let o = run(&["train", "--corpus", "c.jsonl", "--config", "cfg.json", "--out-dir", "out"], d.path());
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("lambda"));
}

#[test]
fn train_smoke_logs_every_step() {
    let d = tempfile::tempdir().unwrap();
    corpus(d.path());
    fs::write(
        d.path().join("cfg.json"),
        r#"{"n_closed": 100, "n_open": 100, "seed": 9, "eval_cases": 20, "log_trajectories": false}"#,
    )
    .unwrap();
    let o = run(&["train", "--corpus", "c.jsonl", "--config", "cfg.json", "--out-dir", "out"], d.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let lines = json_lines(&d.path().join("out/train_log.jsonl"));
    assert_eq!(lines[0]["type"], "header");
    assert_eq!(lines[0].as_object().unwrap().len(), 2);
    let steps: Vec<&Value> = lines.iter().filter(|v| v["type"] == "step").collect();
    assert_eq!(steps.len(), 200);
    for field in ["step", "phase", "mean_reward", "batch_metric", "ema", "clip_fraction", "kl", "gate_rate"] {
        assert!(steps.iter().all(|s| s.get(field).is_some()), "{field}");
    }
    for label in ["initial", "closed", "open"] {
        assert!(d.path().join(format!("out/checkpoint_{label}.jsonl")).exists());
    }
}

fn first_record(dir: &Path, kind: &str) -> Value {
    let path = dir.join(format!("{kind}.jsonl"));
    let o = run(&["gen-data", "--out", path.to_str().unwrap(), "--n", "1", "--seed", "5", "--kinds", kind], dir);
    assert_eq!(code(&o), 0);
    json_lines(&path).remove(0)
}

#[test]
fn score_gold_against_itself() {
    let d = tempfile::tempdir().unwrap();
    let rec = first_record(d.path(), "single");
    fs::write(d.path().join("trace.txt"), rec["trace_text"].as_str().unwrap()).unwrap();
    let o = run(&["score", "--trace", "trace.txt", "--gold", "single.jsonl"], d.path());
    assert_eq!(code(&o), 0);
    let bd: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(bd["gate"], true);
    let steps = bd["r_think_steps"].as_array().unwrap();
    assert_eq!(steps.len(), 4);
    assert!(steps.iter().all(|v| v.as_f64() == Some(1.0)));
    assert_eq!(bd["r_ans"], 0.2);
}

#[test]
fn score_malformed_trace_is_total() {
    let d = tempfile::tempdir().unwrap();
    let rec = first_record(d.path(), "binary");
    let gold = rec["gold_final"].as_str().unwrap();
    // the final answer is still recovered from the terminal answer block
    let raw = format!("<think>unclosed <answer>{gold}</answer>");
    fs::write(d.path().join("bad.txt"), raw).unwrap();
    let o = run(&["score", "--trace", "bad.txt", "--gold", "binary.jsonl"], d.path());
    assert_eq!(code(&o), 0);
    let bd: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(bd["r_format"], 0.0);
    assert_eq!(bd["r_proc"], 0.0);
    let total = bd["total"].as_f64().unwrap();
    assert!((total - 0.8 * bd["r_final"].as_f64().unwrap()).abs() < 1e-12);
}

#[test]
fn score_ema_of_one_closes_the_gate() {
    let d = tempfile::tempdir().unwrap();
    let rec = first_record(d.path(), "open");
    fs::write(d.path().join("trace.txt"), rec["trace_text"].as_str().unwrap()).unwrap();
    let o = run(&["score", "--trace", "trace.txt", "--gold", "open.jsonl", "--batch-metric", "1.0", "--ema", "1.0"], d.path());
    let bd: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(bd["gate"], false);
    assert_eq!(bd["r_proc"], 0.0);
}

#[test]
fn eval_empty_predictions() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("p.jsonl"), "").unwrap();
    let o = run(&["eval", "--pred", "p.jsonl", "--out", "r.json"], d.path());
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read_to_string(d.path().join("r.json")).unwrap().trim(), "{}");
}

#[test]
fn eval_mixed_types_is_a_data_error() {
    let d = tempfile::tempdir().unwrap();
    fs::write(
        d.path().join("p.jsonl"),
        "{\"id\":\"r1\",\"kind\":\"open\",\"pred\":[\"Edema\"],\"gold\":[\"Edema\"]}\n{\"id\":\"r2\",\"kind\":\"open\",\"pred\":\"Edema\",\"gold\":[\"Edema\"]}\n",
    )
    .unwrap();
    let o = run(&["eval", "--pred", "p.jsonl", "--out", "r.json"], d.path());
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("r2"));
}

#[test]
fn eval_fixture_matches_hand_values() {
    let d = tempfile::tempdir().unwrap();
    let lines = [
        r#"{"id":"1","kind":"single","pred":"A","gold":"A"}"#,
        r#"{"id":"2","kind":"single","pred":"b.","gold":"B"}"#,
        r#"{"id":"3","kind":"single","pred":"C","gold":"D"}"#,
        r#"{"id":"4","kind":"open","pred":["Edema","Pneumonia"],"gold":["Pneumonia","Atelectasis"]}"#,
        r#"{"id":"5","kind":"open","pred":["Edema"],"gold":["Edema"]}"#,
        r#"{"id":"6","kind":"text","pred":"pleural effusion present","gold":"pleural effusion absent"}"#,
        r#"{"id":"7","kind":"localization","pred":[0,0,10,10],"gold":[5,5,15,15]}"#,
        r#"{"id":"8","kind":"localization","pred":[0,0,10,10],"gold":[0,0,10,10]}"#,
        r#"{"id":"9","kind":"ranking","pred":["Pneumonia","Fracture","Edema"],"gold":["Edema","Pneumonia"]}"#,
        r#"{"id":"10","kind":"binary","pred":"Yes.","gold":"yes"}"#,
    ];
    fs::write(d.path().join("p.jsonl"), lines.join("\n")).unwrap();
    let o = run(&["eval", "--pred", "p.jsonl", "--out", "r.json"], d.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r: Value = serde_json::from_str(&fs::read_to_string(d.path().join("r.json")).unwrap()).unwrap();
    let get = |k: &str, m: &str| r[k][m].as_f64().unwrap();
    let near = |a: f64, b: f64| (a - b).abs() < 1e-12;
    assert!(near(get("single", "accuracy"), 2.0 / 3.0));
    assert!(near(get("binary", "accuracy"), 1.0));
    // jaccards 1/3 and 1; pooled tp=2, fp=1, fn=1
    assert!(near(get("open", "jaccard_mean"), (1.0 / 3.0 + 1.0) / 2.0));
    assert!(near(get("open", "accuracy"), 0.5));
    assert!(near(get("open", "micro_f1"), 4.0 / 6.0));
    assert!(near(get("text", "bleu1"), 2.0 / 3.0));
    assert!(near(get("text", "rougeL"), 2.0 / 3.0));
    assert!(near(get("text", "rouge2"), 0.5));
    assert!(near(get("localization", "iou_mean"), (1.0 / 7.0 + 1.0) / 2.0));
    assert!(near(get("localization", "accuracy"), 0.5));
    assert!(near(get("ranking", "recall@1"), 0.5));
    assert!(near(get("ranking", "recall@3"), 1.0));
    let table = String::from_utf8_lossy(&o.stdout);
    assert!(table.starts_with("kind"));
    assert!(table.contains("0.6667"));
}
