use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const BASE: &[&str] = &[
    "data.kind=blobs",
    "data.n=120",
    "model.hidden=8",
    "train.epochs=2",
    "train.batch_size=16",
    "train.warmup_iters=2",
    "train.milestones=1",
    "afan.alpha_max=0.05",
    "afan.epsilon=0.05",
];

fn afan(root: &Path, command: &str, sets: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_afan"));
    cmd.arg(command).env("AFAN_OUTPUT_ROOT", root);
    for s in BASE.iter().chain(sets) {
        cmd.arg("--set").arg(s);
    }
    cmd.output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn lines(path: &Path) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn usage_errors_exit_1() {
    let root = tempfile::tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_afan");
    assert_eq!(Command::new(bin).output().unwrap().status.code(), Some(1));
    assert_eq!(Command::new(bin).arg("fly").output().unwrap().status.code(), Some(1));
    assert_eq!(code(&afan(root.path(), "train", &["train.nope=1"])), 1);
    assert_eq!(code(&afan(root.path(), "train", &["data.kind=mnist"])), 1);
    assert_eq!(code(&afan(root.path(), "train", &["train.lr"])), 1);
    assert_eq!(code(&afan(root.path(), "train", &["train.batch_size=1"])), 1);
    assert_eq!(Command::new(bin).arg("--help").output().unwrap().status.code(), Some(0));
}

#[test]
fn data_errors_exit_2() {
    let root = tempfile::tempdir().unwrap();
    let csv = root.path().join("bad.csv");
    fs::write(&csv, "0.1,0.2,0\n0.3,oops,1\n").unwrap();
    let o = afan(root.path(), "train", &[&format!("data.path={}", csv.display()), "data.format=csv-vectors"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"));
    let o = afan(root.path(), "eval", &["output.dir=missing"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn divergence_exits_3_and_flags_incomplete() {
    let root = tempfile::tempdir().unwrap();
    let o = afan(root.path(), "train", &["train.lr=1e300", "output.dir=boom"]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(root.path().join("boom/INCOMPLETE").exists());
    assert!(!root.path().join("boom/checkpoint.afan").exists());
}

#[test]
fn train_then_eval_writes_artifacts() {
    let root = tempfile::tempdir().unwrap();
    let run = ["output.dir=run", "eval.epsilons=0,0.05", "eval.dump_features=3"];
    let o = afan(root.path(), "train", &run);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let dir = root.path().join("run");
    for f in ["checkpoint.afan", "metrics.jsonl", "timing.jsonl"] {
        assert!(dir.join(f).exists(), "{f}");
    }
    assert!(!dir.join("INCOMPLETE").exists());

    let metrics = lines(&dir.join("metrics.jsonl"));
    assert_eq!(metrics[0]["kind"], "config");
    assert_eq!(metrics[0]["config"]["train.epochs"], "2");
    let iters: Vec<&Value> = metrics.iter().filter(|m| m["kind"] == "iteration").collect();
    assert!(!iters.is_empty());
    for m in &iters {
        let adv: f64 = m["l_adv"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).sum();
        let total = m["l_clean"].as_f64().unwrap() + m["lambda"].as_f64().unwrap() * adv;
        assert!((m["total"].as_f64().unwrap() - total).abs() < 1e-10);
        assert!(m.get("wall_time").is_none());
    }
    assert_eq!(metrics.last().unwrap()["kind"], "result");

    let o = afan(root.path(), "eval", &run);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: Value = serde_json::from_str(&fs::read_to_string(dir.join("eval.json")).unwrap()).unwrap();
    let r = &report["report"];
    assert_eq!(r["robust"][0]["epsilon"], 0.0);
    assert_eq!(r["robust"][0]["accuracy"], r["standard_accuracy"]);
    assert!(r["robust"][1]["accuracy"].as_f64() <= r["standard_accuracy"].as_f64());
    assert_eq!(report["config"]["eval.dump_features"], "3");

    let dump = afan::afan::read_feature_dump(&fs::read(dir.join("features.afd")).unwrap()).unwrap();
    // clean, then adversarial and mixed views per strength
    assert_eq!(dump.len(), 3 * (1 + 2 * 3));
}

#[test]
fn config_file_and_overrides_compose() {
    let root = tempfile::tempdir().unwrap();
    let cfg = root.path().join("exp.cfg");
    fs::write(&cfg, "# blobs run\ntrain.lr = 0.3\ntrain.epochs = 5\n").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_afan"))
        .args(["train", "--dry-run", "--config"])
        .arg(&cfg)
        .args(["--set", "train.epochs=7"])
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("train.lr = 0.3"));
    assert!(text.contains("train.epochs = 7"));
}

#[test]
fn ablate_emits_one_row_per_cell() {
    let root = tempfile::tempdir().unwrap();
    let o = afan(root.path(), "ablate", &["output.dir=abl", "ablate.seeds=5", "train.epochs=1"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let table: Value = serde_json::from_str(&fs::read_to_string(root.path().join("abl/ablation.json")).unwrap()).unwrap();
    let rows = table["table"]["rows"].as_array().unwrap();
    let names: Vec<&str> = rows.iter().map(|r| r["cell"].as_str().unwrap()).collect();
    assert_eq!(names, ["baseline", "afa", "afa+afn"]);
    for r in rows {
        assert_eq!(r["runs"], 5);
        assert!(r["test_acc"][1].as_f64().unwrap() >= 0.0);
    }
    let text = fs::read_to_string(root.path().join("abl/ablation.txt")).unwrap();
    assert_eq!(text.lines().filter(|l| l.contains('±')).count(), 3);
}

#[test]
fn landscape_writes_slice_matrices() {
    let root = tempfile::tempdir().unwrap();
    assert_eq!(code(&afan(root.path(), "train", &["output.dir=ls"])), 0);
    let o = afan(root.path(), "landscape", &["output.dir=ls", "landscape.grid=5"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let txt = fs::read_dir(root.path().join("ls"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|e| e == "txt"))
        .unwrap();
    let rows: Vec<Vec<f64>> = fs::read_to_string(txt)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| l.split_whitespace().map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 5);
    assert!(rows.iter().all(|r| r.len() == 5));
}
