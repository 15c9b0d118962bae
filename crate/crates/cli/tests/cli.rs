use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::path::Path;
use std::process::{Command, Output, Stdio};

use serde_json::Value;

const SMALL: &str = r#"{
  "experiment": {
    "model": {"num_layers": 1, "d_model": 16, "num_heads": 2, "ffn_dim": 32,
              "token_dim": 16, "position_dim": 16, "turn_dim": 16,
              "node_dim": 16, "depth_dim": 16, "sibling_dim": 16},
    "train": {"epochs": 2, "patience": 2, "lr_peak": 0.001}
  }
}"#;

fn steer(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_steer"))
        .current_dir(dir)
        .args(args)
        .arg("--quiet")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = steer(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// gen -> sample -> train in `dir`, returning nothing; artifacts stay on disk.
fn build_pipeline(dir: &Path) {
    std::fs::write(dir.join("small.json"), SMALL).unwrap();
    ok(dir, &["gen", "--conversations", "300", "--seed", "7", "--out", "logs.jsonl"]);
    ok(dir, &["sample", "--in", "logs.jsonl", "--seed", "7", "--out", "splits"]);
    ok(dir, &["train", "--variant", "steer", "--data", "splits", "--out", "ck", "--config", "small.json", "--seed", "7"]);
}

#[test]
fn pipeline_writes_artifacts_and_manifests() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    build_pipeline(dir);
    for f in ["logs.jsonl", "logs.jsonl.manifest.json", "splits/train.jsonl", "splits/validation.jsonl", "splits/test.jsonl", "splits/run_manifest.json"] {
        assert!(dir.join(f).exists(), "{f}");
    }
    for f in ["manifest.json", "params.bin", "tokens.json", "nodes.json", "train_report.json", "curves.csv", "run_manifest.json"] {
        assert!(dir.join("ck").join(f).exists(), "{f}");
    }
    let m = read_json(&dir.join("ck/run_manifest.json"));
    assert_eq!(m["subcommand"], "train");
    assert_eq!(m["seed"], 7);
    assert_eq!(m["config"]["experiment"]["train"]["epochs"], 2);
    assert_eq!(m["config"]["experiment"]["model"]["d_model"], 16);

    let out = ok(dir, &["eval", "--model", "ck", "--data", "splits", "--out", "ev"]);
    let table = String::from_utf8(out.stdout).unwrap();
    for row in ["Consecutive Reiteration Accuracy", "Follow-up Accuracy", "Macro Accuracy"] {
        assert!(table.contains(row), "{table}");
    }
    let report = read_json(&dir.join("ev/eval_report.json"));
    assert!(report["macro_accuracy"].is_f64());

    ok(dir, &["analyze", "--data", "splits/test.jsonl", "--model", "ck", "--compare", "ck", "--friction", "--pos", "--hist", "--out", "an"]);
    for f in ["friction_summary.csv", "friction_hist.csv", "friction_delta_hist.csv", "pos_transitions.csv", "run_manifest.json"] {
        assert!(dir.join("an").join(f).exists(), "{f}");
    }
    // The same model compared with itself has no difference anywhere.
    let delta = std::fs::read_to_string(dir.join("an/friction_delta_hist.csv")).unwrap();
    assert!(delta.lines().skip(1).all(|l| l.ends_with(",0")), "{delta}");

    // Split files are valid predict input; one result per line, in order.
    let test = std::fs::read_to_string(dir.join("splits/test.jsonl")).unwrap();
    let out = ok(dir, &["predict", "--model", "ck", "--input", "splits/test.jsonl"]);
    let lines: Vec<Value> = String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), test.lines().count());
    assert!(lines.iter().all(|v| v["label"] == "steer" || v["label"] == "followup"));
}

#[test]
fn reruns_with_the_same_seed_are_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    build_pipeline(a.path());
    build_pipeline(b.path());
    for f in ["logs.jsonl", "splits/train.jsonl", "splits/test.jsonl", "ck/params.bin", "ck/tokens.json", "ck/test_report.json"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let c = tempfile::tempdir().unwrap();
    ok(c.path(), &["gen", "--conversations", "300", "--seed", "8", "--out", "logs.jsonl"]);
    assert_ne!(std::fs::read(a.path().join("logs.jsonl")).unwrap(), std::fs::read(c.path().join("logs.jsonl")).unwrap());
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let unknown = steer(dir, &["gen", "--no-such-flag"]);
    assert_eq!(unknown.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&unknown.stderr).contains("Usage"));
    assert_eq!(steer(dir, &["frobnicate"]).status.code(), Some(1));
    assert_eq!(steer(dir, &["train", "--variant", "bert"]).status.code(), Some(1));
    assert_eq!(steer(dir, &["--help"]).status.code(), Some(0));
    assert_eq!(steer(dir, &["eval", "--model", "missing", "--data", "missing.jsonl"]).status.code(), Some(2));
    std::fs::write(dir.join("bad.json"), "{\"seeed\": 3}").unwrap();
    assert_eq!(steer(dir, &["gen", "--config", "bad.json"]).status.code(), Some(2));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("cfg.json"), r#"{"seed": 3, "generator": {"conversations": 10}}"#).unwrap();
    ok(dir, &["gen", "--config", "cfg.json", "--out", "a.jsonl"]);
    ok(dir, &["gen", "--config", "cfg.json", "--conversations", "20", "--seed", "4", "--out", "b.jsonl"]);
    let a = read_json(&dir.join("a.jsonl.manifest.json"));
    let b = read_json(&dir.join("b.jsonl.manifest.json"));
    assert_eq!((a["seed"].as_u64(), a["config"]["conversations"].as_u64()), (Some(3), Some(10)));
    assert_eq!((b["seed"].as_u64(), b["config"]["conversations"].as_u64()), (Some(4), Some(20)));
}

#[test]
fn tcp_service_answers_in_order() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    build_pipeline(dir);
    let mut server = Command::new(env!("CARGO_BIN_EXE_steer"))
        .current_dir(dir)
        .args(["predict", "--model", "ck", "--listen", "127.0.0.1:0", "--max-connections", "1"])
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut stderr = BufReader::new(server.stderr.take().unwrap());
    let mut line = String::new();
    stderr.read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("listening on ").expect("address line").to_owned();

    let mut conn = TcpStream::connect(&addr).unwrap();
    let requests = [
        r#"{"context":"set an alarm at","followup":"seven"}"#,
        "not json",
        r#"{"context":"what is the weather","followup":"play some jazz"}"#,
    ];
    for r in requests {
        writeln!(conn, "{r}").unwrap();
    }
    conn.shutdown(std::net::Shutdown::Write).unwrap();
    let replies: Vec<Value> = BufReader::new(conn)
        .lines()
        .map(|l| serde_json::from_str(&l.unwrap()).unwrap())
        .collect();
    assert_eq!(replies.len(), 3);
    assert!(replies[0]["label"].is_string());
    assert_eq!(replies[1]["error"], "parse");
    assert!(replies[2]["p"].is_f64());
    assert!(server.wait().unwrap().success());
}
