use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 4

[fusion]
variant = "ms_semantic_attention+intra_inter_rn"

[train]
warmup_epochs = 2
epochs = 1
ids_per_batch = 2
tracklets_per_id = 2
frames_per_tracklet = 3
eval_every = 1

[data]
num_splits = 1
eval_frames = 3

[data.synthetic]
num_identities = 6
tracklets_per_identity = 2
frames_per_tracklet = 4
"#;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tracklet-fusion"))
        .args(args)
        .env("TRACKLET_FUSION_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("tiny.toml");
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn generate_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&["generate", "--config", &cfg, "--out", a.to_str().unwrap()]);
    ok(&["generate", "--config", &cfg, "--out", b.to_str().unwrap()]);
    let manifest = fs::read_to_string(a.join("manifest.tsv")).unwrap();
    assert_eq!(manifest, fs::read_to_string(b.join("manifest.tsv")).unwrap());
    assert_eq!(manifest.lines().count(), 12);
    let first_frame = manifest.lines().next().unwrap().split('\t').nth(3).unwrap().split(',').next().unwrap().to_string();
    assert_eq!(fs::read(a.join(&first_frame)).unwrap(), fs::read(b.join(&first_frame)).unwrap());
    assert!(a.join("config.toml").exists());
}

#[test]
fn train_eval_inspect_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let data = dir.path().join("data");
    let run_dir = dir.path().join("run");
    ok(&["generate", "--config", &cfg, "--out", data.to_str().unwrap()]);
    let stdout = ok(&["train", "--config", &cfg, "--data", data.to_str().unwrap(), "--out", run_dir.to_str().unwrap()]);
    assert!(stdout.contains("ms_semantic_attention+intra_inter_rn"), "{stdout}");
    for f in ["config.toml", "warmup.ckpt", "model.ckpt", "metrics.jsonl"] {
        assert!(run_dir.join(f).exists(), "missing {f}");
    }
    let metrics = fs::read_to_string(run_dir.join("metrics.jsonl")).unwrap();
    let records: Vec<serde_json::Value> = metrics.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(records.iter().any(|r| r["phase"] == "warmup"));
    assert!(records.iter().any(|r| r["phase"] == "end_to_end"));
    assert!(records.iter().any(|r| r.get("map").is_some()));

    let ckpt = run_dir.join("model.ckpt");
    let eval_dir = dir.path().join("eval");
    let report = ok(&[
        "eval",
        "--config",
        &cfg,
        "--data",
        data.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        eval_dir.to_str().unwrap(),
    ]);
    assert!(report.contains("mAP"), "{report}");
    let dump = fs::read_to_string(eval_dir.join("embeddings.tsv")).unwrap();
    let first = dump.lines().next().unwrap();
    assert_eq!(first.split('\t').count(), 5);
    assert_eq!(first.split('\t').nth(4).unwrap().split(',').count(), 768);

    let inspect_dir = dir.path().join("inspect");
    let shown = ok(&[
        "inspect-attention",
        "--config",
        &cfg,
        "--data",
        data.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--tracklet",
        "id0001_t00",
        "--out",
        inspect_dir.to_str().unwrap(),
    ]);
    assert!(shown.contains("stage 4"), "{shown}");
    let lines = fs::read_to_string(inspect_dir.join("attention.jsonl")).unwrap();
    // Four stage records plus the branch weights.
    assert_eq!(lines.lines().count(), 5);

    let missing = run(&[
        "inspect-attention",
        "--config",
        &cfg,
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--tracklet",
        "nope",
    ]);
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nope"));
}

#[test]
fn empty_test_set_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &TINY.replace("num_splits = 1", "num_splits = 1\ntrain_fraction = 1.0"));
    let run_dir = dir.path().join("run");
    ok(&["train", "--config", &cfg, "--out", run_dir.to_str().unwrap()]);
    let out = run(&["eval", "--config", &cfg, "--checkpoint", run_dir.join("model.ckpt").to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("empty test set"));
}

#[test]
fn bad_configs_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[train]\nepoch = 3\n");
    let out = run(&["gradcheck", "--config", &cfg]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("epoch"));
    let out = run(&["train", "--out", dir.path().to_str().unwrap(), "--variant", "late+rn"]);
    assert!(!out.status.success());
}

#[test]
fn ablate_reports_every_variant() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out_dir = dir.path().join("ablate");
    let table = ok(&["ablate", "--config", &cfg, "--out", out_dir.to_str().unwrap()]);
    assert_eq!(table, fs::read_to_string(out_dir.join("ablation.txt")).unwrap());
    for v in [
        "feature_average",
        "early_fusion+avg_pool",
        "ms_average+avg_pool",
        "ms_semantic_attention+avg_pool",
        "late_fusion+intra ",
        "late_fusion+inter_euclid",
        "late_fusion+inter_rn",
        "late_fusion+intra_inter_euclid",
        "late_fusion+intra_inter_rn",
        "ms_semantic_attention+intra_inter_rn",
    ] {
        assert!(table.contains(v), "{v} missing:\n{table}");
    }
    assert_eq!(table.matches("ok").count() + table.matches("REPRODUCTION FAILURE").count(), 4, "{table}");
}

#[test]
fn gradcheck_passes() {
    let out = ok(&["gradcheck"]);
    assert!(out.contains("PASS"), "{out}");
}
