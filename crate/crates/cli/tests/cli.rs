use std::path::Path;
use std::process::{Command, Output};

fn escore(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_escore")).args(args).output().expect("spawn escore")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn train_sample_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let out = escore(&[
        "train-head", "--method", "energy", "--seed", "3",
        "--set", "train.steps=5", "--set", "head.width=8", "--out", p(&run),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["config.json", "config.sha256", "checkpoint.bin", "loss.csv"] {
        assert!(run.join(f).exists(), "missing {f}");
    }

    // A completed run directory is never overwritten.
    let again = escore(&["train-head", "--method", "energy", "--set", "train.steps=5", "--out", p(&run)]);
    assert_eq!(again.status.code(), Some(1));

    let gen = dir.path().join("gen.csv");
    let out = escore(&["sample", "--run", p(&run), "--n", "64", "--output", p(&gen)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let first = std::fs::read(&gen).unwrap();
    let gen2 = dir.path().join("gen2.csv");
    assert!(escore(&["sample", "--run", p(&run), "--n", "64", "--output", p(&gen2)]).status.success());
    assert_eq!(first, std::fs::read(&gen2).unwrap(), "sampling is deterministic");

    // Energy heads are one-step samplers.
    let bad = escore(&["sample", "--run", p(&run), "--steps", "4", "--output", p(&gen2)]);
    assert_eq!(bad.status.code(), Some(1));

    let metrics = dir.path().join("metrics.csv");
    let out = escore(&["eval", "--generated", p(&gen), "--reference", p(&gen2), "--out", p(&metrics)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&metrics).unwrap();
    assert!(text.starts_with("method,steps,seed,n,mmd,wsd"));
    assert_eq!(text.lines().count(), 2);
}

#[test]
fn configuration_errors_exit_with_usage_status() {
    let dir = tempfile::tempdir().unwrap();
    let out = escore(&["train-head", "--method", "flow", "--set", "head.nope=1", "--out", p(&dir.path().join("x"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("head.nope"));

    let out = escore(&["train-mar", "--role", "student", "--lambda", "5", "--out", p(&dir.path().join("y"))]);
    assert_eq!(out.status.code(), Some(1), "distillation needs a teacher");

    assert_eq!(escore(&["no-such-verb"]).status.code(), Some(1));
    assert_eq!(escore(&["--help"]).status.code(), Some(0));
}
