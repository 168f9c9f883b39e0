//! End-to-end runs of the binary on a small synthetic suite.

use std::fs;
use std::path::Path;
use std::process::Command;

fn run(dir: &Path, args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_transprompt"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .env_remove("TRANSPROMPT_OUT")
        .args(args)
        .output()
        .unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn small_training(dir: &Path) {
    fs::write(
        dir.join("train.toml"),
        "epochs = 1\n[model]\ndim = 16\nlayers = 1\nheads = 2\nffn_dim = 16\n",
    )
    .unwrap();
}

#[test]
fn pipeline_writes_consistent_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_training(dir);
    run(dir, &["synth", "--preset", "similar", "--out", "suite.json", "--export-dir", "data"]);
    assert!(dir.join("data/sst/train.tsv").exists());
    let split = ["--suite", "suite.json", "--k", "4", "--seed", "2"];
    let mut train = vec!["train-meta", "--config", "train.toml", "--exclude", "cr", "--out", "meta.json", "--scores", "scores.tsv"];
    train.extend(split);
    run(dir, &train);

    // Cases come out highest first, and each score matches the exported table.
    let mut cases = vec!["report-cases", "--meta", "meta.json", "--top-n", "2", "--out", "cases.tsv"];
    cases.extend(split);
    run(dir, &cases);
    let scores: std::collections::HashMap<String, f64> = fs::read_to_string(dir.join("scores.tsv"))
        .unwrap()
        .lines()
        .filter_map(|l| {
            let mut f = l.split('\t');
            Some((f.next()?.to_owned(), f.next()?.parse().ok()?))
        })
        .collect();
    let text = fs::read_to_string(dir.join("cases.tsv")).unwrap();
    let rows: Vec<Vec<&str>> = text.lines().skip(1).map(|l| l.split('\t').collect()).collect();
    assert_eq!(rows.len(), 2 * 2 * 2, "two tasks, top and bottom two each");
    for task in ["sst", "mr"] {
        let high: Vec<f64> = rows
            .iter()
            .filter(|r| r[0] == task && r[1] == "high")
            .map(|r| r[5].parse().unwrap())
            .collect();
        assert!(high.windows(2).all(|w| w[0] >= w[1]));
    }
    for r in &rows {
        let s: f64 = r[5].parse().unwrap();
        assert!((scores[r[3]] - s).abs() < 1e-9);
    }

    let mut adapt = vec!["adapt", "--meta", "meta.json", "--task", "sst", "--config", "train.toml", "--epochs", "1", "--out", "sst.json"];
    adapt.extend(split);
    run(dir, &adapt);
    let mut eval = vec!["eval", "--model", "sst.json", "--on", "dev"];
    eval.extend(split);
    assert!(run(dir, &eval).contains("accuracy"));

    let mut generalize = vec!["generalize", "--meta", "meta.json", "--task", "cr", "--epochs", "1", "--out", "cr.json"];
    generalize.extend(split);
    run(dir, &generalize);

    // Embeddings: one row per dev example with `dim` coordinates, reproducible.
    for out in ["e1.tsv", "e2.tsv"] {
        let mut emb = vec!["emit-embeddings", "--model", "cr.json", "--on", "dev", "--out", out];
        emb.extend(split);
        run(dir, &emb);
    }
    let a = fs::read(dir.join("e1.tsv")).unwrap();
    assert_eq!(a, fs::read(dir.join("e2.tsv")).unwrap());
    let text = String::from_utf8(a).unwrap();
    let lines: Vec<&str> = text.lines().filter(|l| !l.starts_with("uid")).collect();
    assert_eq!(lines.len(), 2 * 4);
    for l in lines {
        let coords = l.split('\t').last().unwrap().split(',').count();
        assert_eq!(coords, 16);
    }
}

#[test]
fn missing_task_for_meta_checkpoint_fails_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_training(dir);
    run(dir, &["synth", "--out", "suite.json"]);
    run(dir, &["train-meta", "--suite", "suite.json", "--k", "2", "--config", "train.toml", "--epochs", "0", "--out", "meta.json"]);
    let out = Command::new(env!("CARGO_BIN_EXE_transprompt"))
        .current_dir(dir)
        .args(["eval", "--model", "meta.json", "--suite", "suite.json"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}
