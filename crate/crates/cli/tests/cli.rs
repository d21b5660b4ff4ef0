use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::time::Duration;

use serde_json::Value;

const TINY: &str = r#"{
  "model": {"embedding_dim": 8, "hidden": 4},
  "train": {"epochs": 2},
  "active": {"max_epochs": 1}
}"#;

fn dtal(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dtal"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = dtal(args);
    assert!(
        out.status.success(),
        "{args:?}: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    dtal(args).status.code().unwrap()
}

struct Work {
    dir: tempfile::TempDir,
}

impl Work {
    fn new() -> Self {
        let w = Self {
            dir: tempfile::tempdir().unwrap(),
        };
        std::fs::write(w.p("tiny.json"), TINY).unwrap();
        ok(&["synth", "--out", &w.s("data/tgt"), "--entities", "40", "--seed", "3"]);
        w
    }

    fn p(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn s(&self, rel: &str) -> String {
        self.p(rel).display().to_string()
    }

    fn json(&self, rel: &str) -> Value {
        serde_json::from_str(&std::fs::read_to_string(self.p(rel)).unwrap()).unwrap()
    }
}

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            out.extend(snapshot(&path));
        } else {
            out.insert(path.clone(), std::fs::read(&path).unwrap());
        }
    }
    out
}

#[test]
fn run_commands_write_outputs_and_leave_inputs_alone() {
    let w = Work::new();
    ok(&["synth", "--out", &w.s("data/src"), "--entities", "40", "--seed", "5", "--source"]);
    let before = snapshot(&w.p("data"));
    let cfg = w.s("tiny.json");

    ok(&["train", "--data", &w.s("data/tgt"), "--config", &cfg, "--out", &w.s("r/train")]);
    for f in ["config.json", "command.json", "metrics.csv", "report.csv", "summary.json", "model.ckpt"] {
        assert!(w.p("r/train").join(f).is_file(), "{f}");
    }
    let echoed = w.json("r/train/config.json");
    assert_eq!(echoed["train"]["epochs"], 2);
    assert_eq!(echoed["train"]["batch_size"], 16);

    let src = w.s("data/src");
    let tgt = w.s("data/tgt");
    ok(&["transfer", "--source", &src, "--target", &tgt, "--adapt", "--config", &cfg, "--out", &w.s("r/adapt")]);
    ok(&["transfer", "--source", &src, "--target", &tgt, "--config", &cfg, "--out", &w.s("r/plain")]);
    assert_eq!(w.json("r/adapt/summary.json")["mode"], "adversarial");
    assert_eq!(w.json("r/plain/summary.json")["mode"], "supervised");
    assert!(w.p("r/plain/model.ckpt").is_file());

    let init = w.s("r/adapt/model.ckpt");
    let act = w.s("r/act");
    ok(&["active", "--data", &tgt, "--init", &init, "--K", "6", "--T", "2", "--config", &cfg, "--out", &act]);
    // Partition shortfalls are logged, not made up, so at most K per iteration.
    let curve = csv_rows(&w.p("r/act/iterations.csv"));
    assert_eq!(curve.len(), 3);
    let spent: u64 = curve[1..].iter().map(|r| r[1].parse::<u64>().unwrap()).sum();
    assert!(spent > 0 && spent <= 12);
    assert_eq!(w.json("r/act/summary.json")["human_labels"], spent);

    let ckpt = w.s("r/act/model.ckpt");
    ok(&["eval", "--data", &tgt, "--checkpoint", &ckpt, "--split", "dev", "--out", &w.s("r/eval")]);
    assert_eq!(w.json("r/eval/summary.json")["split"], "dev");

    ok(&["baseline", "--data", &tgt, "--algo", "logreg", "--out", &w.s("r/lr")]);
    let dumps = ["--train-features", &w.s("r/lr/train_features.csv"), "--test-features", &w.s("r/lr/test_features.csv")];
    let mut args = vec!["baseline", "--data", &tgt, "--algo", "logreg", "--out"];
    let again = w.s("r/lr2");
    args.push(&again);
    args.extend(dumps);
    ok(&args);
    assert_eq!(w.json("r/lr/summary.json"), w.json("r/lr2/summary.json"));

    assert_eq!(snapshot(&w.p("data")), before);
}

#[test]
fn config_errors_exit_2_and_runtime_errors_exit_1() {
    let w = Work::new();
    let tgt = w.s("data/tgt");
    let out = w.s("r/x");
    assert_eq!(code(&["active", "--data", &tgt, "--K", "7", "--out", &out]), 2);
    std::fs::write(w.p("bad.json"), r#"{"train": {"epoch": 3}}"#).unwrap();
    assert_eq!(code(&["train", "--data", &tgt, "--config", &w.s("bad.json"), "--out", &out]), 2);
    assert_eq!(code(&["train", "--data", &tgt, "--no-such-flag"]), 2);
    assert_eq!(code(&["train", "--data", &w.s("missing"), "--config", &w.s("tiny.json"), "--out", &out]), 1);
    assert_eq!(code(&["eval", "--data", &tgt, "--checkpoint", &w.s("nope.ckpt"), "--out", &out]), 1);
    assert_eq!(code(&["repeat", "--out", &out, "--", "train", "--data", &tgt, "--seed", "3"]), 2);
}

#[test]
fn prepare_blocks_splits_and_requires_labels_later() {
    let w = Work::new();
    let tgt = w.p("data/tgt");
    let rules = r#"[{"kind": "qgram_jaccard", "attribute": "title", "q": 3, "threshold": 0.3}]"#;
    std::fs::write(w.p("rules.json"), rules).unwrap();
    let left = tgt.join("left.csv").display().to_string();
    let right = tgt.join("right.csv").display().to_string();

    // Gold matches recovered from the labeled candidate file.
    let mut matches = String::from("left_id,right_id\n");
    let mut unlabeled = String::from("left_id,right_id\n");
    let mut rdr = csv_rows(&tgt.join("candidates.csv"));
    rdr.remove(0);
    for row in &rdr {
        if row[2] == "1" {
            matches += &format!("{},{}\n", row[0], row[1]);
        }
        unlabeled += &format!("{},{}\n", row[0], row[1]);
    }
    std::fs::write(w.p("matches.csv"), matches).unwrap();
    std::fs::write(w.p("pairs.csv"), unlabeled).unwrap();

    let blocked = w.s("data/blocked");
    let stdout = ok(&[
        "prepare", "--left", &left, "--right", &right, "--matches", &w.s("matches.csv"), "--block", &w.s("rules.json"),
        "--out", &blocked, "--seed", "2",
    ]);
    assert!(stdout.contains("matches"));
    let split = w.json("data/blocked/split.json");
    let total = split["total"].as_u64().unwrap();
    assert_eq!(split["dev"].as_u64().unwrap(), total / 5);
    assert_eq!(split["test"].as_u64().unwrap(), total / 5);
    assert_eq!(split["train"].as_u64().unwrap(), total - 2 * (total / 5));
    // Refuses to overwrite a prepared dataset.
    assert_eq!(
        code(&["prepare", "--left", &left, "--right", &right, "--block", &w.s("rules.json"), "--out", &blocked]),
        1
    );

    let given = w.s("data/given");
    ok(&["prepare", "--left", &left, "--right", &right, "--candidates", &w.s("pairs.csv"), "--out", &given]);
    assert_eq!(csv_rows(&w.p("data/given/candidates.csv")).len(), rdr.len() + 1);
    let out = dtal(&["train", "--data", &given, "--config", &w.s("tiny.json"), "--out", &w.s("r/u")]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no gold labels"));
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(String::from).collect())
        .collect()
}

#[test]
fn repeat_aggregates_per_seed_results() {
    let w = Work::new();
    let tgt = w.s("data/tgt");
    let cfg = w.s("tiny.json");
    ok(&["repeat", "--seeds", "1,2,3", "--out", &w.s("rep"), "--", "train", "--data", &tgt, "--config", &cfg]);
    let seeds = csv_rows(&w.p("rep/seeds.csv"));
    assert_eq!(seeds.len(), 4);
    let f1: Vec<f64> = seeds[1..].iter().map(|r| r[3].parse().unwrap()).collect();
    let mean = f1.iter().sum::<f64>() / 3.0;
    let std = (f1.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 2.0).sqrt();
    let agg = csv_rows(&w.p("rep/aggregate.csv"));
    let row = agg.iter().find(|r| r[0] == "f1").unwrap();
    assert!((row[1].parse::<f64>().unwrap() - mean).abs() < 1e-3);
    assert!((row[2].parse::<f64>().unwrap() - std).abs() < 1e-3);
    assert_eq!(row[3], "3");
    for s in [1, 2, 3] {
        assert!(w.p(&format!("rep/seed-{s}/summary.json")).is_file());
    }

    ok(&["repeat", "--seeds", "4,4", "--out", &w.s("same"), "--", "train", "--data", &tgt, "--config", &cfg]);
    let agg = csv_rows(&w.p("same/aggregate.csv"));
    assert!(agg[1..].iter().all(|r| r[2] == "0.0000"));
}

fn free_port() -> u16 {
    std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

fn http(port: u16, method: &str, path: &str, body: Option<&Value>) -> (u16, Value) {
    let mut stream = TcpStream::connect(("127.0.0.1", port)).unwrap();
    let body = body.map(Value::to_string).unwrap_or_default();
    write!(
        stream,
        "{method} {path} HTTP/1.1\r\nHost: localhost\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    )
    .unwrap();
    let mut raw = String::new();
    stream.read_to_string(&mut raw).unwrap();
    let status: u16 = raw.split_whitespace().nth(1).unwrap().parse().unwrap();
    let payload = raw.split("\r\n\r\n").nth(1).unwrap_or("");
    (status, serde_json::from_str(payload).unwrap_or(Value::Null))
}

#[test]
fn served_annotator_blocks_until_the_human_finishes() {
    let w = Work::new();
    let port = free_port();
    let mut child = Command::new(env!("CARGO_BIN_EXE_dtal"))
        .args([
            "active", "--data", &w.s("data/tgt"), "--annotator", "serve", "--port", &port.to_string(), "--K", "4",
            "--T", "1", "--config", &w.s("tiny.json"), "--out", &w.s("r/served"),
        ])
        .env("RUST_LOG", "warn")
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    let mut stdout = BufReader::new(child.stdout.take().unwrap());
    stdout.read_line(&mut line).unwrap();
    let id = line.split_whitespace().nth(1).unwrap().trim_end_matches(':').to_string();

    let (status, batch) = http(port, "GET", &format!("/sessions/{id}/batch"), None);
    assert_eq!(status, 200, "{batch}");
    let labels: Vec<Value> = batch["pairs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|p| serde_json::json!({"pair_id": p["pair_id"], "label": "non_match"}))
        .collect();
    let n = labels.len();
    let (status, _) = http(port, "POST", &format!("/sessions/{id}/labels"), Some(&serde_json::json!({ "labels": labels })));
    assert_eq!(status, 200);
    assert_eq!(child.try_wait().unwrap(), None);
    let (status, _) = http(port, "POST", &format!("/sessions/{id}/advance"), None);
    assert_eq!(status, 202);

    let mut waited = Duration::ZERO;
    let exit = loop {
        if let Some(s) = child.try_wait().unwrap() {
            break s;
        }
        assert!(waited < Duration::from_secs(120), "active did not exit");
        std::thread::sleep(Duration::from_millis(50));
        waited += Duration::from_millis(50);
    };
    assert!(exit.success());
    let mut rest = String::new();
    stdout.read_to_string(&mut rest).unwrap();
    assert!(rest.contains("active test"), "{rest}");
    assert_eq!(w.json("r/served/summary.json")["human_labels"], n);
    assert!(w.p("r/served/model.ckpt").is_file());
    assert!(w.p("r/served/journal").is_dir());
}
