use std::path::Path;
use std::process::{Command, Output};

use psformer::io::{read_ply, write_ply};
use psformer::train::{gen_synthetic_scene, parse_report};
use psformer::{PointCloud, Regime};

fn psformer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_psformer"))
        .args(args)
        .env("PSF_LOG_LEVEL", "error")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = psformer(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn fail(args: &[&str]) -> String {
    let out = psformer(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    String::from_utf8(out.stderr).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn log_lines(dir: &Path) -> Vec<String> {
    std::fs::read_to_string(dir.join("train.log")).unwrap().lines().map(String::from).collect()
}

fn field<'a>(line: &'a str, key: &str) -> &'a str {
    line.split_whitespace().find_map(|f| f.strip_prefix(&format!("{key}="))).unwrap()
}

/// `verb` on the tiny preset. The preset goes first because a `preset` key
/// resets every earlier override.
fn tiny<'a>(verb: &'a str, rest: &[&'a str]) -> Vec<&'a str> {
    [&[verb, "--set", "preset=tiny"][..], rest].concat()
}

fn train_tiny(out: &Path, epochs: usize) {
    let epochs = format!("train.epochs={epochs}");
    ok(&tiny("train", &["--out", s(out), "--set", &epochs]));
}

#[test]
fn five_epoch_run_leaves_checkpoint_and_log() {
    let dir = tempfile::tempdir().unwrap();
    train_tiny(dir.path(), 5);
    assert!(dir.path().join("checkpoint.bin").is_file());
    let lines = log_lines(dir.path());
    assert_eq!(lines.len(), 5);
    assert!(lines.iter().all(|l| l.contains("loss=")));
}

#[test]
fn fixed_seed_gives_identical_loss() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    train_tiny(a.path(), 3);
    train_tiny(b.path(), 3);
    assert_eq!(log_lines(a.path()), log_lines(b.path()));
}

#[test]
fn resume_continues_the_same_trajectory() {
    let (full, split) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    train_tiny(full.path(), 4);
    train_tiny(split.path(), 2);
    let ckpt = split.path().join("checkpoint.bin");
    ok(&["train", "--out", s(split.path()), "--checkpoint", s(&ckpt), "--set", "train.epochs=4"]);
    let (a, b) = (log_lines(full.path()), log_lines(split.path()));
    assert_eq!(b.len(), 4);
    let step = |l: &str| field(l, "step").parse::<u64>().unwrap();
    assert_eq!(step(&b[2]), step(&b[1]) + step(&b[0]));
    assert_eq!(a, b);
}

#[test]
fn unknown_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "preset = tiny\nmodel.bogus_width = 3\n").unwrap();
    let err = fail(&["train", "--config", s(&cfg), "--out", s(dir.path())]);
    assert!(err.contains("model.bogus_width"), "{err}");
}

#[test]
fn empty_dataset_dir_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    std::fs::create_dir(&data).unwrap();
    let key = format!("data.dir={}", s(&data));
    let err = fail(&tiny("train", &["--out", s(dir.path()), "--set", &key]));
    assert!(err.contains("no .ply files"), "{err}");
}

#[test]
fn trains_and_evaluates_on_ply_directory() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&tiny("gen-data", &["--out", s(&data), "--count", "2"]));
    let key = format!("data.dir={}", s(&data));
    let run = dir.path().join("run");
    ok(&tiny("train", &["--out", s(&run), "--set", &key, "--set", "train.epochs=2"]));
    let report = dir.path().join("report.txt");
    ok(&["eval", "--checkpoint", s(&run.join("checkpoint.bin")), s(&data), "--out", s(&report)]);
    let rows = parse_report(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(rows.len(), 1);
    let m = &rows[0].metrics;
    for v in [m.mae, m.f_measure, m.e_measure, m.iou] {
        assert!((0.0..=1.0).contains(&v));
    }
    assert_eq!(m.samples, 2);
}

#[test]
fn eval_rejects_unlabeled_data() {
    let dir = tempfile::tempdir().unwrap();
    train_tiny(dir.path(), 1);
    let scene = gen_synthetic_scene(5, 64, Regime::Default).unwrap();
    let unlabeled = PointCloud::new(scene.coords, scene.colors, None).unwrap();
    let ply = dir.path().join("u.ply");
    write_ply(&unlabeled, None, &ply, true).unwrap();
    let err = fail(&["eval", "--checkpoint", s(&dir.path().join("checkpoint.bin")), s(&ply)]);
    assert!(err.contains("label"), "{err}");
}

#[test]
fn predict_covers_every_point_and_ties_duplicates() {
    let dir = tempfile::tempdir().unwrap();
    train_tiny(dir.path(), 1);
    // 150 points over a 64-point patch size, with the first 10 points repeated
    let mut scene = gen_synthetic_scene(9, 140, Regime::Default).unwrap();
    for i in 0..10 {
        scene.coords.push(scene.coords[i]);
        scene.colors.push(scene.colors[i]);
    }
    let cloud = PointCloud::new(scene.coords, scene.colors, None).unwrap();
    let input = dir.path().join("in.ply");
    write_ply(&cloud, None, &input, false).unwrap();
    let output = dir.path().join("out.ply");
    ok(&["predict", "--checkpoint", s(&dir.path().join("checkpoint.bin")), s(&input), "--out", s(&output)]);
    let back = read_ply(&output).unwrap();
    assert_eq!(back.cloud.len(), 150);
    assert_eq!(back.cloud.coords, cloud.coords);
    let sal = back.saliency.unwrap();
    assert!(sal.iter().all(|p| (0.0..=1.0).contains(p)));
    for i in 0..10 {
        assert_eq!(sal[i], sal[140 + i], "duplicate of point {i}");
    }
}

#[test]
fn gradcheck_passes_and_negative_control_fails() {
    let out = ok(&["gradcheck"]);
    for group in ["encoder", "fn", "psi_pre", "psi_post", "ut", "ut.trans", "mca", "head"] {
        assert!(out.contains(&format!("group {group} ")), "missing group {group}\n{out}");
    }
    assert!(out.trim_end().ends_with("PASS"));
    let bad = psformer(&["gradcheck", "--corrupt-backward"]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stdout).trim_end().ends_with("FAIL"));
}

#[test]
fn rejects_unknown_log_level() {
    let out = Command::new(env!("CARGO_BIN_EXE_psformer"))
        .args(["gen-data", "--out", "unused"])
        .env("PSF_LOG_LEVEL", "verbose")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("PSF_LOG_LEVEL"));
}
