use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use reppoints_core::pipeline::data::Image;

const TINY: &str = r#"
seed = 1

[data]
image_w = 32
image_h = 32
min_size = 8.0
max_size = 16.0
train_size = 16
val_size = 8

[head]
feature_channels = 8
backbone_channels = [4, 8]

[train]
epochs = 2
batch_size = 4
warmup_iters = 2
"#;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_reppoints"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env("REPPOINTS_WORKERS", "1")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn tiny_config(dir: &Path, extra: &str) -> PathBuf {
    let p = dir.join("tiny.toml");
    fs::write(&p, format!("{TINY}\n{extra}")).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(text: &str) -> serde_json::Value {
    serde_json::from_str(text).unwrap()
}

#[test]
fn gen_data_default_sizes_and_stable_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let first = json(&ok(&["gen-data", "--out", s(&a)]));
    assert_eq!(first["train"], 1000);
    assert_eq!(first["val"], 200);
    assert!(a.join("config.resolved.toml").exists());

    let b = dir.path().join("b");
    let second = json(&ok(&["gen-data", "--out", s(&b)]));
    assert_eq!(first["manifest_sha256"], second["manifest_sha256"]);
    assert_eq!(fs::read(a.join("manifest.json")).unwrap(), fs::read(b.join("manifest.json")).unwrap());
}

#[test]
fn zero_classes_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[data]\nnum_classes = 0\n").unwrap();
    let out = run(&["gen-data", "--config", s(&cfg), "--out", s(&dir.path().join("d"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("data.num_classes"));

    fs::write(&cfg, "[head]\nnum_point = 9\n").unwrap();
    assert_eq!(run(&["gen-data", "--config", s(&cfg)]).status.code(), Some(2));
}

#[test]
fn train_logs_components_and_resumes_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    let full = dir.path().join("full");
    let summary = json(&ok(&["train", "--config", s(&cfg), "--ablation", "full", "--output-dir", s(&full)]));
    assert_eq!(summary["iteration"], 8);
    let log = fs::read_to_string(full.join("loss.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 8);
    let first = json(log.lines().next().unwrap());
    for k in ["reppoints", "corner", "foreground", "total"] {
        assert!(first[k].is_number(), "{k}");
    }

    let part = dir.path().join("part");
    let args = ["train", "--config", s(&cfg), "--ablation", "full", "--output-dir", s(&part)];
    ok(&[&args[..], &["--stop-after", "3"]].concat());
    let resumed = json(&ok(&[&args[..], &["--resume"]].concat()));
    assert_eq!(resumed["final_loss"], summary["final_loss"]);
    assert_eq!(fs::read(full.join("checkpoint.bin")).unwrap(), fs::read(part.join("checkpoint.bin")).unwrap());
    assert_eq!(log, fs::read_to_string(part.join("loss.jsonl")).unwrap());

    // the resolved config reproduces the run
    let again = dir.path().join("again");
    let out = json(&ok(&["train", "--config", s(&full.join("config.resolved.toml")), "--output-dir", s(&again)]));
    assert_eq!(out["final_loss"], summary["final_loss"]);
}

#[test]
fn ablation_presets_switch_heads() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    for (name, corner, fusion) in [("baseline", false, false), ("multitask", true, false), ("fusion", true, true)] {
        let out = dir.path().join(name);
        ok(&["train", "--config", s(&cfg), "--ablation", name, "--output-dir", s(&out)]);
        let resolved = fs::read_to_string(out.join("config.resolved.toml")).unwrap();
        assert!(resolved.contains(&format!("corner_head = {corner}")), "{name}");
        assert!(resolved.contains(&format!("fusion = {fusion}")), "{name}");
    }
    let out = run(&["train", "--config", s(&cfg), "--ablation", "everything"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn eval_is_deterministic_and_honours_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    let run_dir = dir.path().join("run");
    ok(&["train", "--config", s(&cfg), "--output-dir", s(&run_dir)]);
    let ckpt = run_dir.join("checkpoint.bin");

    let e1 = dir.path().join("e1");
    let e2 = dir.path().join("e2");
    let m1 = ok(&["eval", "--checkpoint", s(&ckpt), "--config", s(&cfg), "--out", s(&e1)]);
    let m2 = ok(&["eval", "--checkpoint", s(&ckpt), "--config", s(&cfg), "--out", s(&e2)]);
    assert_eq!(m1, m2);
    assert_eq!(fs::read(e1.join("metrics.json")).unwrap(), fs::read(e2.join("metrics.json")).unwrap());
    assert_eq!(json(&m1)["ap_per_iou"].as_array().unwrap().len(), 10);

    let m50 = json(&ok(&["eval", "--checkpoint", s(&ckpt), "--config", s(&cfg), "--iou-thresholds", "0.5", "--no-joint-inference"]));
    assert_eq!(m50["iou_thresholds"], serde_json::json!([0.5]));
    let resolved = fs::read_to_string(run_dir.join("eval/config.resolved.toml")).unwrap();
    assert!(resolved.contains("joint_inference = false"));

    let out = run(&["eval", "--checkpoint", s(&dir.path().join("missing.bin"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.bin"));
    let out = run(&["eval", "--checkpoint", s(&ckpt), "--iou-thresholds", "1.5"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gradcheck_reports_and_catches_injected_bug() {
    let clean = ok(&["gradcheck", "--cases", "5"]);
    for suite in ["corner_heatmap_focal", "normalized_focal", "corner_pool", "bilinear_sample", "stop_gradient"] {
        let line = clean.lines().find(|l| l.starts_with(suite)).unwrap_or_else(|| panic!("{suite} missing"));
        assert!(line.ends_with("ok"), "{line}");
    }
    let out = run(&["gradcheck", "--cases", "5", "--inject-bug", "corner_pool"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("corner_pool"));
    assert_eq!(run(&["gradcheck", "--suite", "nope"]).status.code(), Some(2));
}

#[test]
fn demo_refine_renders_both_box_sets() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    let run_dir = dir.path().join("run");
    ok(&["train", "--config", s(&cfg), "--output-dir", s(&run_dir), "--stop-after", "1"]);
    let ckpt = run_dir.join("checkpoint.bin");
    let data = dir.path().join("data");
    ok(&["gen-data", "--config", s(&cfg), "--out", s(&data)]);
    let manifest = json(&fs::read_to_string(data.join("manifest.json")).unwrap());
    let id = manifest["val"][0]["id"].as_str().unwrap();
    let image = data.join("val").join(format!("{id}.ppm"));

    // an almost untrained model scores everything below the threshold
    let quiet = dir.path().join("quiet");
    ok(&["demo-refine", "--checkpoint", s(&ckpt), "--image", s(&image), "--out", s(&quiet)]);
    assert_eq!(fs::read(quiet.join("annotated.ppm")).unwrap(), fs::read(&image).unwrap());
    assert_eq!(fs::read_to_string(quiet.join("refine.jsonl")).unwrap(), "");

    let loud_cfg = dir.path().join("loud.toml");
    fs::write(&loud_cfg, "[inference]\nscore_threshold = 0.0\nmax_detections = 3\n[inference.refine]\nscore_floor = 0.0\n").unwrap();
    let loud = dir.path().join("loud");
    ok(&["demo-refine", "--checkpoint", s(&ckpt), "--image", s(&image), "--config", s(&loud_cfg), "--out", s(&loud)]);
    let log = fs::read_to_string(loud.join("refine.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);
    let entry = json(log.lines().next().unwrap());
    assert_eq!(entry["corners"].as_array().unwrap().len(), 2);
    for k in ["before", "after", "candidate_score"] {
        assert!(entry["corners"][0].get(k).is_some(), "{k}");
    }
    // green is drawn last, so it is visible wherever a box was drawn
    let img = Image::read(&loud.join("annotated.ppm")).unwrap();
    let green = (0..img.height).any(|y| (0..img.width).any(|x| img.pixel(x, y) == [40, 220, 60]));
    assert!(green, "no refined box drawn");
}

#[test]
fn bad_worker_count_is_a_usage_error() {
    let out = Command::new(env!("CARGO_BIN_EXE_reppoints"))
        .args(["gradcheck", "--cases", "1"])
        .env("REPPOINTS_WORKERS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
