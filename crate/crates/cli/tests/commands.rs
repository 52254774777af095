use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn curator(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_curator"))
        .args(args)
        .output()
        .expect("curator runs")
}

fn ok(args: &[&str]) -> String {
    let out = curator(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    curator(args).status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, pairs: usize) {
    ok(&["synth", "-o", s(dir), "--n-pairs", &pairs.to_string(), "--vocab-size", "20", "--dim", "16"]);
}

fn lines(path: &Path) -> Vec<Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn synth_curate_and_gap_report() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 150);
    let out = dir.path().join("curated.jsonl");
    let summary: Value = serde_json::from_str(&ok(&["curate", "--input-dir", s(dir.path()), "-o", s(&out)])).unwrap();
    assert_eq!(summary["records"], 150);
    let records = lines(&out);
    assert_eq!(records.len(), 150);
    let pairs = lines(&dir.path().join("pairs.jsonl"));
    for (r, p) in records.iter().zip(&pairs) {
        assert_eq!(r["id"], p["id"]);
        assert!(r["sampled"].as_array().unwrap().len() <= 3);
    }

    let report: Value = serde_json::from_str(&ok(&[
        "gap-report",
        "--input-dir",
        s(dir.path()),
        "--curated",
        s(&out),
        "--per-pair",
    ]))
    .unwrap();
    assert_eq!(report["pairs"], 150);
    assert!(report["mean_archive_size"].as_f64().unwrap() > report["mean_caption_concepts"].as_f64().unwrap());
    assert_eq!(report["per_pair"].as_array().unwrap().len(), 150);
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 80);
    let config = dir.path().join("run.toml");
    std::fs::write(
        &config,
        "seed = 4\n[paths]\noutput = \"from-config.jsonl\"\n[sampling]\nL = 2\nmode = \"naive\"\n",
    )
    .unwrap();
    ok(&["curate", "--config", s(&config), "--input-dir", s(dir.path())]);
    let from_config = lines(&dir.path().join("from-config.jsonl"));
    assert!(from_config.iter().any(|r| r["sampled"].as_array().unwrap().len() == 2));

    let out = dir.path().join("flags.jsonl");
    ok(&[
        "curate", "--config", s(&config), "--input-dir", s(dir.path()), "--labels", "1", "-o", s(&out),
        "--expansion", "language", "--ranking", "naive",
    ]);
    let records = lines(&out);
    assert!(records.iter().all(|r| r["sampled"].as_array().unwrap().len() <= 1));
    assert!(records.iter().all(|r| r["archive"].as_array().unwrap().iter().all(|e| e["s_b"] == 0.0)));
}

#[test]
fn thread_count_does_not_change_bytes() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 200);
    let mut outputs = Vec::new();
    for threads in ["1", "4"] {
        let out = dir.path().join(format!("t{threads}.jsonl"));
        ok(&["curate", "--input-dir", s(dir.path()), "-o", s(&out), "--threads", threads, "--seed", "9"]);
        outputs.push(std::fs::read(out).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn ablate_reports_every_mode() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 200);
    let table: Value = serde_json::from_str(&ok(&["ablate", "--input-dir", s(dir.path()), "--n-retrieve", "8", "--json"])).unwrap();
    let rows = table["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 5);
    assert_eq!(rows[0]["mode"], "baseline");
    assert_eq!(rows[3]["mode"], "vision-ranked");
    assert_eq!(rows[0]["missing_recall"], 0.0);

    let text = ok(&["ablate", "--input-dir", s(dir.path()), "--modes", "baseline,vision"]);
    assert_eq!(text.lines().count(), 3);
    assert_eq!(code(&["ablate", "--input-dir", s(dir.path()), "--modes", "fancy"]), 1);
}

#[test]
fn verify_objective_reports_losses_and_gradients() {
    let dir = tempfile::tempdir().unwrap();
    let batch = dir.path().join("batch.json");
    std::fs::write(
        &batch,
        r#"{"img": [[2, 0], [0, 3]], "txt": [[1, 0], [0, 1]], "labels": [[[1, 0]], [[0, 1]]], "tau": 1.0}"#,
    )
    .unwrap();
    let v: Value = serde_json::from_str(&ok(&["verify-objective", s(&batch)])).unwrap();
    let want = (1.0 + (-1.0f64).exp()).ln();
    for key in ["l_i2t", "l_t2i", "l_i2l", "l_l2i"] {
        assert!((v["loss"][key].as_f64().unwrap() - want).abs() < 1e-9, "{key}");
    }
    assert!(v["grad_check"]["max_rel_error"].as_f64().unwrap() < 1e-4);
    assert!(v["loss"]["grads"]["tau"].is_number());

    assert_eq!(code(&["verify-objective", "--strict", s(&batch)]), 1);
    std::fs::write(&batch, "{not json").unwrap();
    assert_eq!(code(&["verify-objective", s(&batch)]), 1);
    std::fs::write(&batch, r#"{"img": [[1, 0]], "txt": [[1, 0]], "labels": [[]], "tau": 0.1}"#).unwrap();
    assert_eq!(code(&["verify-objective", s(&batch)]), 1);
}

#[test]
fn input_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 30);
    let pairs = dir.path().join("pairs.jsonl");
    let before = std::fs::read(&pairs).unwrap();
    assert_eq!(code(&["curate", "--input-dir", s(dir.path()), "-o", s(&pairs)]), 1);
    assert_eq!(std::fs::read(&pairs).unwrap(), before);

    let missing = dir.path().join("nowhere");
    assert_eq!(code(&["curate", "--input-dir", s(&missing), "-o", s(&dir.path().join("x.jsonl"))]), 1);
    assert_eq!(code(&["curate", "--input-dir", s(dir.path())]), 1);
    assert_eq!(code(&["curate", "--input-dir", s(dir.path()), "-o", s(&dir.path().join("y.jsonl")), "--labels", "0"]), 1);
    assert_eq!(code(&["curate", "--expansion", "sideways"]), 1);
    assert_eq!(code(&["synth", "-o", s(&missing), "--k-min", "6", "--k-max", "5"]), 1);
    assert_eq!(code(&["no-such-command"]), 1);
    assert_eq!(code(&["--help"]), 0);
}
