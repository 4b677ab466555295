use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "backbone.feature_channels=8",
    "head_width=4",
    "data.source_count=12",
    "data.target_count=12",
    "data.eval_count=6",
    "pretrain.batch_size=4",
    "adapt.batch_size=4",
    "pretrain.epochs=1",
    "adapt.epochs=1",
    "adapt.iters_per_epoch=2",
];

fn poseadapt(args: &[&str], extra: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_poseadapt"));
    cmd.args(args).env("RUST_LOG", "warn");
    for s in TINY.iter().chain(extra) {
        cmd.args(["--set", s]);
    }
    cmd.output().unwrap()
}

fn ok(out: Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn bytes(path: &Path) -> Vec<u8> {
    fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn gen_data_checksums_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let first = ok(poseadapt(&["gen-data", "--out", p(&a)], &[]));
    let second = ok(poseadapt(&["gen-data", "--out", p(&b)], &[]));
    assert_eq!(first, second);
    assert_eq!(first.matches("sha256=").count(), 5);
    for split in ["source", "target", "source_eval", "target_eval", "unseen_eval"] {
        assert_eq!(bytes(&a.join(split).join("labels.csv")), bytes(&b.join(split).join("labels.csv")), "{split}");
    }
    let other = ok(poseadapt(&["gen-data", "--out", p(&dir.path().join("c")), "--seed", "9"], &[]));
    assert_ne!(first, other);
}

fn pipeline(root: &Path) {
    let data = root.join("data");
    ok(poseadapt(&["gen-data", "--out", p(&data)], &[]));
    ok(poseadapt(&["pretrain", "--data", p(&data), "--out", p(&root.join("pre"))], &[]));
    let ckpt = root.join("pre/pretrained.ckpt");
    ok(poseadapt(&["adapt", "--data", p(&data), "--checkpoint", p(&ckpt), "--out", p(&root.join("ad"))], &[]));
    let adapted = root.join("ad/adapted.ckpt");
    let text = ok(poseadapt(&["eval", "--data", p(&data), "--checkpoint", p(&adapted), "--out", p(&root.join("ev"))], &[]));
    assert!(text.starts_with("PCK@0.05"), "{text}");
}

#[test]
fn smoke_pipeline_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    pipeline(&a);
    pipeline(&b);
    for f in ["pre/pretrained.ckpt", "pre/train_log.jsonl", "ad/adapted.ckpt", "ad/train_log.jsonl", "ev/metrics.json"] {
        assert_eq!(bytes(&a.join(f)), bytes(&b.join(f)), "{f}");
    }
    let metrics: serde_json::Value = serde_json::from_slice(&bytes(&a.join("ev/metrics.json"))).unwrap();
    for split in ["target", "source", "unseen"] {
        let v = metrics[split]["overall"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v), "{split}: {v}");
    }
}

#[test]
fn unknown_override_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = poseadapt(&["gen-data", "--out", p(dir.path())], &["adapt.learning_rate=0.1"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("learning_rate"), "{err}");
}

#[test]
fn eval_rejects_a_missing_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = poseadapt(&["eval", "--checkpoint", p(&dir.path().join("nope.ckpt")), "--out", p(dir.path())], &[]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn relations_plan_has_seven_rows() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(poseadapt(&["ablate", "--plan", "relations", "--seeds", "0", "--out", p(dir.path())], &[]));
    let table: serde_json::Value = serde_json::from_slice(&bytes(&dir.path().join("table.json"))).unwrap();
    let rows = table["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 7);
    assert_eq!(rows[6]["arm"], "r1 & r2 & r3");
    assert!(text.contains("r1 & r2 & r3"));
    assert_eq!(fs::read_to_string(dir.path().join("table.csv")).unwrap().lines().count(), 8);
}

#[test]
fn plot_renders_logs() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(poseadapt(&["gen-data", "--out", p(&data)], &[]));
    ok(poseadapt(&["pretrain", "--data", p(&data), "--out", p(&dir.path().join("pre"))], &[]));
    let ckpt = dir.path().join("pre/pretrained.ckpt");
    ok(poseadapt(&["adapt", "--data", p(&data), "--checkpoint", p(&ckpt), "--out", p(&dir.path().join("ad"))], &[]));
    let figs = dir.path().join("figs");
    let log = dir.path().join("ad/train_log.jsonl");
    let out = Command::new(env!("CARGO_BIN_EXE_poseadapt")).args(["plot", "--out", p(&figs), "--log", p(&log)]).output().unwrap();
    ok(out);
    for f in ["loss.csv", "loss.svg", "discrepancy.csv", "discrepancy.svg"] {
        assert!(figs.join(f).exists(), "{f}");
    }
    let none = Command::new(env!("CARGO_BIN_EXE_poseadapt")).args(["plot", "--out", p(&figs)]).output().unwrap();
    assert_eq!(none.status.code(), Some(2));
}
