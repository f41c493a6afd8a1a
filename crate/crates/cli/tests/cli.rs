use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn lift3d(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lift3d")).args(args).current_dir(cwd).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn tiny_config(dir: &Path, name: &str, extra: Value) -> PathBuf {
    let mut cfg = json!({
        "seed": 3,
        "log_every": 2,
        "pretrain": {"steps": 3, "batch_size": 2},
        "policy": {"steps": 5, "batch_size": 2},
        "eval": {"episodes": 3},
        "data": {"pretrain": "data/pretrain", "episodes": "data/episodes"},
    });
    merge(&mut cfg, extra);
    let path = dir.join(name);
    fs::write(&path, cfg.to_string()).unwrap();
    path
}

fn merge(a: &mut Value, b: Value) {
    match (a, b) {
        (Value::Object(a), Value::Object(b)) => {
            for (k, v) in b {
                merge(a.entry(k).or_insert(Value::Null), v);
            }
        }
        (a, b) => *a = b,
    }
}

fn gen(dir: &Path, out: &str, count: &str) -> Output {
    lift3d(&["gen-data", "--task", "reach", "--count", count, "--seed", "1", "--out", out], dir)
}

#[test]
fn gen_data_is_byte_identical_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        let o = gen(tmp.path(), out, "4");
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let (a, b) = (tree(&tmp.path().join("a")), tree(&tmp.path().join("b")));
    assert!(a.len() > 4);
    assert_eq!(a, b);
}

#[test]
fn gen_data_zero_count_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = gen(tmp.path(), "data", "0");
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("--count"), "{}", stderr(&o));
    assert!(!tmp.path().join("data").exists());
}

#[test]
fn gen_data_manifests_match_count() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&gen(tmp.path(), "data", "3")), 0);
    for kind in ["episodes", "pretrain"] {
        let m: Value = serde_json::from_slice(&fs::read(tmp.path().join("data").join(kind).join("manifest.json")).unwrap()).unwrap();
        assert_eq!(m["count"], 3);
        assert_eq!(m["kind"], kind);
        assert_eq!(m["records"].as_array().unwrap().len(), 3);
    }
    assert!(tmp.path().join("data/config.json").exists());
}

#[test]
fn eval_oracle_prints_perfect_success() {
    let tmp = tempfile::tempdir().unwrap();
    let o = lift3d(&["eval", "--oracle", "--episodes", "10", "--seed", "4"], tmp.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(stdout(&o).trim(), "1.000");
}

#[test]
fn unknown_config_key_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), "bad.json", json!({"policy": {"stepz": 3}}));
    let o = lift3d(&["train", "--config", cfg.to_str().unwrap(), "--out", "run"], tmp.path());
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("stepz"), "{}", stderr(&o));
}

#[test]
fn missing_dataset_exits_3_without_partial_output() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), "cfg.json", json!({}));
    let o = lift3d(&["train", "--config", cfg.to_str().unwrap(), "--out", "run"], tmp.path());
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(!tmp.path().join("run").exists());
    assert_eq!(fs::read_dir(tmp.path()).unwrap().count(), 1);
}

#[test]
fn two_stage_pipeline_is_deterministic_and_checks_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    assert_eq!(code(&gen(dir, "data", "4")), 0);
    let cfg = tiny_config(dir, "cfg.json", json!({}));
    let cfg = cfg.to_str().unwrap();

    let o = lift3d(&["pretrain", "--config", cfg, "--out", "s1"], dir);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let lines: Vec<Value> = stdout(&o).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.iter().map(|l| l["step"].as_u64().unwrap()).collect::<Vec<_>>(), vec![0, 2]);
    for key in ["stage", "step", "distill", "recon", "total", "lr"] {
        assert!(lines[0].get(key).is_some(), "missing {key}");
    }

    for out in ["s2a", "s2b"] {
        let o = lift3d(&["train", "--config", cfg, "--init", "s1/checkpoint.bin", "--out", out], dir);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let metrics = |d: &str| fs::read_to_string(dir.join(d).join("metrics.jsonl")).unwrap();
    assert_eq!(metrics("s2a"), metrics("s2b"));
    assert_eq!(metrics("s2a").lines().count(), 3);
    assert_eq!(fs::read(dir.join("s2a/checkpoint.bin")).unwrap(), fs::read(dir.join("s2b/checkpoint.bin")).unwrap());
    let echo: Value = serde_json::from_slice(&fs::read(dir.join("s2a/config.json")).unwrap()).unwrap();
    assert_eq!(echo["policy"]["steps"], 5);
    assert!(echo["encoder"]["width"].is_u64(), "defaults filled in");

    let o = lift3d(&["eval", "--checkpoint", "s2a/checkpoint.bin", "--log", "eval.json"], dir);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rate: f64 = stdout(&o).trim().parse().unwrap();
    assert!((0.0..=1.0).contains(&rate));
    let log: Value = serde_json::from_slice(&fs::read(dir.join("eval.json")).unwrap()).unwrap();
    assert_eq!(log["episodes"].as_array().unwrap().len(), 3);

    let o = lift3d(&["eval", "--checkpoint", "s1/checkpoint.bin"], dir);
    assert_eq!(code(&o), 5, "{}", stderr(&o));
    let o = lift3d(&["train", "--config", cfg, "--init", "s2a/checkpoint.bin", "--out", "bad"], dir);
    assert_eq!(code(&o), 5, "{}", stderr(&o));

    let narrow = tiny_config(
        dir,
        "narrow.json",
        json!({"encoder": {"width": 16}, "policy": {"tokenizer": {"output_dim": 16}}}),
    );
    let o = lift3d(&["train", "--config", narrow.to_str().unwrap(), "--init", "s1/checkpoint.bin", "--out", "bad"], dir);
    assert_eq!(code(&o), 5, "{}", stderr(&o));
    assert!(!dir.join("bad").exists());

    let mut raw = fs::read(dir.join("s1/checkpoint.bin")).unwrap();
    let n = raw.len();
    raw[n - 1] ^= 0xff;
    fs::write(dir.join("corrupt.bin"), raw).unwrap();
    let o = lift3d(&["train", "--config", cfg, "--init", "corrupt.bin", "--out", "bad"], dir);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("corrupt.bin"), "{}", stderr(&o));
}

#[test]
fn ablate_single_config_grid() {
    let tmp = tempfile::tempdir().unwrap();
    let grid = json!({
        "base": {"pretrain": {"steps": 2, "batch_size": 2}, "policy": {"steps": 2, "batch_size": 2}, "eval": {"episodes": 2}},
        "data": {"demos": 2, "pretrain_records": 2, "seed": 0},
    });
    fs::write(tmp.path().join("grid.json"), grid.to_string()).unwrap();
    let o = lift3d(&["ablate", "--grid", "grid.json", "--out", "abl"], tmp.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: Value = serde_json::from_slice(&fs::read(tmp.path().join("abl/report.json")).unwrap()).unwrap();
    assert_eq!(report["schema_version"], 1);
    let rows = report["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0]["name"], "baseline");
    assert!(rows[0]["error"].is_null());
    let table = fs::read_to_string(tmp.path().join("abl/report.txt")).unwrap();
    assert_eq!(table.lines().count(), 2);
    assert_eq!(stdout(&o), table);
}
