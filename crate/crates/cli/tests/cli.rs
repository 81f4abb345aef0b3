use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use uner_cli::{manifest_path, RunManifest};

fn uner(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_uner")).args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen_config(dir: &Path, discontinuity: f64) -> PathBuf {
    let path = dir.join("gen.json");
    let cfg = serde_json::json!({
        "n_docs": 12,
        "tokens_per_doc": [10, 16],
        "entity_types": [
            {"name": "date", "length": [1, 2]},
            {"name": "total", "length": [1, 3]}
        ],
        "discontinuity_rate": discontinuity,
        "scramble_mode": "none",
        "vocab_size": 60,
        "seed": 1
    });
    std::fs::write(&path, cfg.to_string()).unwrap();
    path
}

const SMALL_MODEL: [&str; 6] = ["--hidden", "8", "--vocab-size", "64", "--bbox-frequencies", "2"];

#[test]
fn generate_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = gen_config(dir.path(), 0.4);
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    for out in [&a, &b] {
        let o = uner(&["generate", "--config", s(&cfg), "--out", s(out), "--seed", "7"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let m: RunManifest = serde_json::from_slice(&std::fs::read(manifest_path(&a)).unwrap()).unwrap();
    assert_eq!(m.seeds["generator"], 7);
    assert_eq!(m.config["generator"]["seed"], 7);
}

#[test]
fn usage_errors_exit_one_with_one_line() {
    let o = uner(&["generate", "--bogus"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(String::from_utf8_lossy(&o.stderr).trim().lines().count(), 1);
    assert_eq!(uner(&[]).status.code(), Some(1));
    assert_eq!(uner(&["train", "--corpus", "x", "--out", "y", "--head", "crf"]).status.code(), Some(1));
    assert_eq!(uner(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_file_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = uner(&["train", "--corpus", s(&dir.path().join("none.jsonl")), "--out", s(&dir.path().join("m"))]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert_eq!(err.trim().lines().count(), 1, "{err}");
    assert!(err.contains("none.jsonl"));
}

#[test]
fn invalid_generator_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = gen_config(dir.path(), 1.5);
    let o = uner(&["generate", "--config", s(&cfg), "--out", s(&dir.path().join("c.jsonl"))]);
    assert_eq!(o.status.code(), Some(1), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn gradcheck_on_fresh_init_passes() {
    let o = uner(&["gradcheck", "--seed", "3", "--probes", "50"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("max relative error"));
}

#[test]
fn train_decode_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = gen_config(dir.path(), 0.0);
    let corpus = dir.path().join("c.jsonl");
    let queries = dir.path().join("q.json");
    assert!(uner(&["generate", "--config", s(&cfg), "--out", s(&corpus), "--queries-out", s(&queries)])
        .status
        .success());
    let before = std::fs::read(&corpus).unwrap();

    let ckpt = dir.path().join("bio.ckpt");
    let mut args = vec!["train", "--corpus", s(&corpus), "--queries", s(&queries), "--out", s(&ckpt)];
    args.extend(["--head", "bio", "--epochs", "3", "--batch-size", "4"]);
    args.extend(SMALL_MODEL);
    let o = uner(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let log = std::fs::read_to_string(dir.path().join("bio.ckpt.log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);

    let report = dir.path().join("report.json");
    let o = uner(&["eval", "--checkpoint", s(&ckpt), "--corpus", s(&corpus), "--out", s(&report), "--head", "bio"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    let f1 = r["f1"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&f1));
    assert!(r["qtc_accuracy"].is_null());

    let o = uner(&["eval", "--checkpoint", s(&ckpt), "--corpus", s(&corpus), "--out", s(&report), "--head", "uner"]);
    assert_eq!(o.status.code(), Some(1));

    let preds = dir.path().join("p.jsonl");
    let o = uner(&["decode", "--checkpoint", s(&ckpt), "--corpus", s(&corpus), "--out", s(&preds)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read_to_string(&preds).unwrap().lines().count(), 12);

    let m: RunManifest = serde_json::from_slice(&std::fs::read(manifest_path(&preds)).unwrap()).unwrap();
    assert_eq!(m.command, "decode");
    for a in m.inputs.iter().chain(&m.outputs) {
        assert_eq!(a.sha256, uner_cli::manifest::sha256_hex(&std::fs::read(&a.path).unwrap()));
    }
    assert_eq!(std::fs::read(&corpus).unwrap(), before, "inputs must not change");
}

#[test]
fn eval_can_train_a_few_shot_model() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = gen_config(dir.path(), 0.4);
    let corpus = dir.path().join("c.jsonl");
    assert!(uner(&["generate", "--config", s(&cfg), "--out", s(&corpus)]).status.success());
    let report = dir.path().join("r.json");
    let mut args = vec!["eval", "--train", s(&corpus), "--corpus", s(&corpus), "--out", s(&report)];
    args.extend(["--fraction", "0.5", "--seed", "2", "--epochs", "2"]);
    args.extend(SMALL_MODEL);
    let o = uner(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m: RunManifest = serde_json::from_slice(&std::fs::read(manifest_path(&report)).unwrap()).unwrap();
    assert_eq!(m.config["documents"], 6);
    assert_eq!(m.seeds["few_shot"], 2);
}

#[test]
fn training_rerun_reproduces_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = gen_config(dir.path(), 0.4);
    let corpus = dir.path().join("c.jsonl");
    assert!(uner(&["generate", "--config", s(&cfg), "--out", s(&corpus)]).status.success());
    let mut digests = Vec::new();
    for name in ["a.ckpt", "b.ckpt"] {
        let out = dir.path().join(name);
        let mut args = vec!["train", "--corpus", s(&corpus), "--out", s(&out), "--epochs", "2", "--seed", "5"];
        args.extend(SMALL_MODEL);
        assert!(uner(&args).status.success());
        let m: RunManifest = serde_json::from_slice(&std::fs::read(manifest_path(&out)).unwrap()).unwrap();
        digests.push(m.outputs[0].sha256.clone());
    }
    assert_eq!(digests[0], digests[1]);
}
