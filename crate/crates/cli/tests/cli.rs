//! End-to-end runs of the `dsibh` binary.

use std::path::Path;
use std::process::{Command, Output};

use dsibh_core::dataio::load_features;
use dsibh_core::hamming::{encode, retrieve, PackedCodeDB};
use dsibh_core::dataio::LabelMatrix;
use dsibh_core::nets::Mlp;

fn dsibh(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dsibh"))
        .args(args)
        .current_dir(cwd)
        .env_remove("DSIBH_THREADS")
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn config(bits: usize, out: &str, extra_train: &str) -> String {
    format!(
        r#"{{"data": {{"files": {{"x1": "data/x1.dsibf", "x2": "data/x2.dsibf", "labels": "data/labels.dsibf"}}}},
  "split": {{"query_count": 20, "train_count": 80, "seed": 1}},
  "train": {{"code_bits": {bits}, "outer_rounds": 4, "batch_size": 32, "lr_lab": 0.01, "lr_img": 0.003,
             "lr_txt": 0.003, "checkpoint_every": 0, "seed": 5{extra_train}}},
  "nets": {{"lab": {{"hidden_dims": [16]}}, "img": {{"hidden_dims": [16]}}, "txt": {{"hidden_dims": [16]}}}},
  "output_dir": "{out}"}}"#
    )
}

/// Synthetic data plus one trained run in a fresh directory.
fn trained() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    ok(&dsibh(
        &["synth", "--classes", "4", "--per-class", "40", "--d1", "8", "--d2", "6", "--seed", "2", "--out-dir", "data"],
        dir.path(),
    ));
    std::fs::write(dir.path().join("cfg.json"), config(16, "run", "")).unwrap();
    ok(&dsibh(&["--config", "cfg.json", "train"], dir.path()));
    dir
}

#[test]
fn train_writes_every_artifact_and_is_reproducible() {
    let dir = trained();
    let run = dir.path().join("run");
    for f in [
        "imgnet.dsibm",
        "txtnet.dsibm",
        "labnet.dsibm",
        "query_x.dsibc",
        "query_r.dsibc",
        "retrieval_x.dsibc",
        "retrieval_r.dsibc",
        "metrics.json",
        "config.json",
    ] {
        assert!(run.join(f).exists(), "{f}");
    }
    let metrics: serde_json::Value = serde_json::from_slice(&std::fs::read(run.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["rounds_completed"], 4);
    assert_eq!(metrics["history"].as_array().unwrap().len(), 4);
    assert!(metrics["map"]["x2r"]["map"].as_f64().is_some());
    assert!(metrics["heldout_mi"]["txt"].as_f64().is_some());
    assert_eq!(metrics["config"]["train"]["seed"], 5);

    let first = std::fs::read(run.join("metrics.json")).unwrap();
    let db = std::fs::read(run.join("retrieval_r.dsibc")).unwrap();
    ok(&dsibh(&["--config", "cfg.json", "train"], dir.path()));
    assert_eq!(std::fs::read(run.join("metrics.json")).unwrap(), first);
    assert_eq!(std::fs::read(run.join("retrieval_r.dsibc")).unwrap(), db);

    // --seed overrides the training seed and changes the result.
    ok(&dsibh(&["--config", "cfg.json", "--seed", "6", "train", "--out-dir", "run6"], dir.path()));
    assert_ne!(std::fs::read(dir.path().join("run6/metrics.json")).unwrap(), first);
}

#[test]
fn eval_reports_map_and_appends_csv() {
    let dir = trained();
    let out = ok(&dsibh(
        &["eval", "--queries", "run/query_x.dsibc", "--db", "run/retrieval_r.dsibc", "--direction", "x2r", "--csv", "t.csv"],
        dir.path(),
    ));
    assert!(out.contains("X->R") && out.contains("16"));
    // Self-retrieval with identical codes per class is perfect.
    let json = ok(&dsibh(
        &["--json", "eval", "--queries", "run/retrieval_r.dsibc", "--db", "run/retrieval_r.dsibc"],
        dir.path(),
    ));
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert!(v["map"].as_f64().unwrap() > 0.0);
    let csv = std::fs::read_to_string(dir.path().join("t.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
}

#[test]
fn table_shaped_report_over_bit_lengths() {
    let dir = trained();
    for bits in [16, 32, 64, 128] {
        let cfg = format!("cfg{bits}.json");
        std::fs::write(dir.path().join(&cfg), config(bits, &format!("run{bits}"), "")).unwrap();
        ok(&dsibh(&["--config", &cfg, "train"], dir.path()));
        for (d, q, db) in [("x2r", "query_x", "retrieval_r"), ("r2x", "query_r", "retrieval_x")] {
            let q = format!("run{bits}/{q}.dsibc");
            let db = format!("run{bits}/{db}.dsibc");
            ok(&dsibh(&["eval", "--queries", &q, "--db", &db, "--direction", d, "--csv", "table.csv"], dir.path()));
        }
    }
    let csv = std::fs::read_to_string(dir.path().join("table.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 8);
    assert!(rows[7].starts_with("R->X,128,"));
}

#[test]
fn retrieve_lists_k_hits_matching_the_library() {
    let dir = trained();
    let json = ok(&dsibh(
        &["--json", "retrieve", "--queries", "data/x1.dsibf", "--model", "run/imgnet.dsibm", "--db", "run/retrieval_r.dsibc", "--k", "4"],
        dir.path(),
    ));
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    let rows = v.as_array().unwrap();
    assert_eq!(rows.len(), 160);
    assert!(rows.iter().all(|r| r["hits"].as_array().unwrap().len() == 4));

    let net: Mlp<f64> = Mlp::load(dir.path().join("run/imgnet.dsibm")).unwrap();
    let x = load_features::<f64>(dir.path().join("data/x1.dsibf")).unwrap();
    let db = PackedCodeDB::load(dir.path().join("run/retrieval_r.dsibc")).unwrap();
    let q = encode(&net, &x, LabelMatrix::zeros(x.rows(), 0), (0..x.rows() as u64).collect()).unwrap();
    for (i, row) in rows.iter().enumerate().step_by(17) {
        let want = retrieve(q.code(i), &db, Some(4)).unwrap();
        let got: Vec<(u64, u32)> = row["hits"]
            .as_array()
            .unwrap()
            .iter()
            .map(|h| (h["id"].as_u64().unwrap(), h["distance"].as_u64().unwrap() as u32))
            .collect();
        assert_eq!(got, want.iter().map(|h| (h.id, h.distance)).collect::<Vec<_>>());
    }

    // A query whose code is in the database comes back at distance 0.
    ok(&dsibh(
        &["encode", "--model", "run/txtnet.dsibm", "--features", "data/x2.dsibf", "--labels", "data/labels.dsibf", "--out", "all_r.dsibc"],
        dir.path(),
    ));
    let table = ok(&dsibh(
        &["retrieve", "--queries", "data/x2.dsibf", "--model", "run/txtnet.dsibm", "--db", "all_r.dsibc", "--k", "1"],
        dir.path(),
    ));
    let lines: Vec<&str> = table.lines().skip(1).collect();
    assert_eq!(lines.len(), 160);
    assert!(lines.iter().all(|l| l.split_whitespace().nth(3) == Some("0")));
}

#[test]
fn exit_codes() {
    let dir = trained();
    let code = |args: &[&str]| dsibh(args, dir.path()).status.code().unwrap();
    assert_eq!(code(&["frobnicate"]), 1);
    assert_eq!(code(&["train"]), 1);
    assert_eq!(code(&["--threads", "0", "eval", "--queries", "a", "--db", "b"]), 1);
    assert_eq!(code(&["--config", "missing.json", "train"]), 2);
    assert_eq!(code(&["eval", "--queries", "missing.dsibc", "--db", "run/retrieval_r.dsibc"]), 2);
    assert_eq!(code(&["eval", "--queries", "data/x1.dsibf", "--db", "run/retrieval_r.dsibc"]), 2);
    assert_eq!(code(&["retrieve", "--queries", "data/x2.dsibf", "--model", "run/imgnet.dsibm", "--db", "run/retrieval_r.dsibc"]), 2);

    // Bit-length mismatch between query and retrieval DBs.
    std::fs::write(dir.path().join("cfg32.json"), config(32, "run32", "")).unwrap();
    assert_eq!(code(&["--config", "cfg32.json", "train"]), 0);
    assert_eq!(code(&["eval", "--queries", "run32/query_x.dsibc", "--db", "run/retrieval_r.dsibc"]), 2);

    // Unknown config keys are rejected before any work.
    std::fs::write(dir.path().join("bad.json"), config(16, "bad", r#", "momentum": 0.9"#)).unwrap();
    assert_ne!(code(&["--config", "bad.json", "train"]), 0);
    assert!(!dir.path().join("bad").exists());

    // Divergence maps to the numeric exit code.
    std::fs::write(
        dir.path().join("boom.json"),
        config(16, "boom", r#", "optimizer": "sgd""#).replace(r#""lr_lab": 0.01"#, r#""lr_lab": 1e300"#),
    )
    .unwrap();
    let out = dsibh(&["--config", "boom.json", "train"], dir.path());
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn thread_count_from_environment() {
    let dir = trained();
    let out = Command::new(env!("CARGO_BIN_EXE_dsibh"))
        .args(["--json", "eval", "--queries", "run/query_x.dsibc", "--db", "run/retrieval_r.dsibc"])
        .current_dir(dir.path())
        .env("DSIBH_THREADS", "2")
        .output()
        .unwrap();
    let with_env = ok(&out);
    let without = ok(&dsibh(&["--json", "eval", "--queries", "run/query_x.dsibc", "--db", "run/retrieval_r.dsibc"], dir.path()));
    assert_eq!(with_env, without);
}
