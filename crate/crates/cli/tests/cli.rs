use std::path::Path;
use std::process::{Command, Output};

use cpnet_core::format::read_dataset;
use cpnet_core::toy::generate_toy_dataset;

fn cpnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cpnet"))
        .args(args)
        .env("CPNET_THREADS", "1")
        .output()
        .expect("spawn cpnet")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn generate_writes_the_seeded_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.cpds"), dir.path().join("b.cpds"));
    assert_eq!(code(&cpnet(&["generate", "--out", p(&a), "--seed", "4"])), 0);
    assert_eq!(code(&cpnet(&["generate", "--out", p(&b), "--seed", "4"])), 0);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let ds = read_dataset(&a).unwrap();
    let expected = generate_toy_dataset(4);
    assert_eq!(ds.train, expected.train);
    assert_eq!(ds.val, expected.val);
}

#[test]
fn generate_into_missing_directory_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("missing").join("d.cpds");
    let o = cpnet(&["generate", "--out", p(&out)]);
    assert_eq!(code(&o), 1);
    assert!(!String::from_utf8_lossy(&o.stderr).is_empty());
}

#[test]
fn dry_run_echoes_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"k": 4, "backend": "brute", "epochs": 3}"#).unwrap();
    let out = dir.path().join("m.cpt1");
    let o = cpnet(&[
        "train",
        "--config",
        p(&cfg),
        "--model",
        "c2d",
        "--out",
        p(&out),
        "--dry-run",
    ]);
    assert_eq!(code(&o), 0);
    let echoed: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(echoed["k"], 4);
    assert_eq!(echoed["backend"], "brute");
    assert_eq!(echoed["model"], "c2d");
    assert_eq!(echoed["epochs"], 3);
    assert!(!out.exists());
}

#[test]
fn unknown_config_key_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"learning_rat": 0.1}"#).unwrap();
    assert_eq!(code(&cpnet(&["train", "--config", p(&cfg), "--dry-run"])), 1);
}

#[test]
fn missing_dataset_exits_1_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none.cpds");
    let out = dir.path().join("m.cpt1");
    let o = cpnet(&["train", "--dataset", p(&missing), "--out", p(&out)]);
    assert_eq!(code(&o), 1);
    assert!(!out.exists());
}

#[test]
fn gradcheck_rejects_zero_epsilon() {
    assert_eq!(code(&cpnet(&["gradcheck", "--epsilon", "0"])), 1);
}

#[test]
fn gradcheck_passes_and_prints_the_table() {
    let o = cpnet(&["gradcheck", "--seed", "1"]);
    assert_eq!(code(&o), 0);
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.contains("end_to_end"), "{out}");
}

#[test]
fn unknown_subcommand_exits_1_and_help_exits_0() {
    assert_eq!(code(&cpnet(&["frobnicate"])), 1);
    assert_eq!(code(&cpnet(&["--help"])), 0);
}

#[test]
fn bad_thread_count_exits_1() {
    let o = Command::new(env!("CARGO_BIN_EXE_cpnet"))
        .args(["gradcheck"])
        .env("CPNET_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&o), 1);
}

#[test]
fn bench_rejects_descending_sizes() {
    assert_eq!(code(&cpnet(&["bench-knn", "--sizes", "64,32"])), 1);
}

#[test]
fn bench_small_sizes_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("b.csv");
    let o = cpnet(&[
        "bench-knn",
        "--sizes",
        "32,64",
        "--c",
        "8",
        "--k",
        "3",
        "--repeats",
        "1",
        "--out",
        p(&csv),
    ]);
    assert_eq!(code(&o), 0);
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 5);
    assert!(String::from_utf8_lossy(&o.stdout).contains("time ratio"));
}

#[test]
fn short_training_eval_and_visualize_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"epochs": 1, "k": 2}"#).unwrap();
    let ckpt = dir.path().join("m.cpt1");
    let o = cpnet(&["train", "--config", p(&cfg), "--out", p(&ckpt)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(ckpt.with_extension("csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("epoch,split,loss,accuracy"));
    assert_eq!(csv.lines().count(), 3);

    let o = cpnet(&["eval", "--checkpoint", p(&ckpt)]);
    assert_eq!(code(&o), 0);
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.lines().any(|l| l.starts_with("train loss")));
    assert!(out.lines().any(|l| l.starts_with("val loss")));

    let viz = dir.path().join("v.jsonl");
    let o = cpnet(&["visualize", "--checkpoint", p(&ckpt), "--sample", "3", "--out", p(&viz)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let lines = std::fs::read_to_string(&viz).unwrap().lines().count();
    assert_eq!(lines, 4 * 32 * 32 + 4);
    assert!(viz.with_extension("raw.cpt1").is_file());

    let o = cpnet(&[
        "visualize",
        "--checkpoint",
        p(&ckpt),
        "--sample",
        "200",
        "--out",
        p(&viz),
    ]);
    assert_eq!(code(&o), 1);
}
