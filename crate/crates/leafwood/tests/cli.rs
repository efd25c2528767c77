use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use leafwood::pcio::read_point_file;

fn leafwood(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_leafwood"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn generate_writes_cloud_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let o = leafwood(dir.path(), &["generate", "--seed", "4", "--trees", "1", "--out", "plot.ply"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let cloud = read_point_file(&dir.path().join("plot.ply")).unwrap().cloud;
    assert!(cloud.len() > 1000);
    assert!(cloud.labels.is_some() && cloud.tree_id.is_some() && cloud.ground.is_some());
    let manifest = fs::read_to_string(dir.path().join("plot.ply.manifest.toml")).unwrap();
    assert!(manifest.contains("subcommand = \"generate\""));
    assert!(manifest.contains("seed = 4"));
}

#[test]
fn generate_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a.ply", "b.ply"] {
        assert_eq!(code(&leafwood(dir.path(), &["generate", "--seed", "8", "--trees", "1", "--out", name])), 0);
    }
    assert_eq!(fs::read(dir.path().join("a.ply")).unwrap(), fs::read(dir.path().join("b.ply")).unwrap());
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&leafwood(dir.path(), &["generate", "--bogus"])), 1);
    assert_eq!(code(&leafwood(dir.path(), &["nonsense"])), 1);
    assert_eq!(code(&leafwood(dir.path(), &["train", "--out", "w.lwt"])), 1);
    assert_eq!(code(&leafwood(dir.path(), &["--help"])), 0);
    assert_eq!(code(&leafwood(dir.path(), &["--version"])), 0);
}

#[test]
fn data_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.csv"), "x,y,z,label\n0,0,0,7\n").unwrap();
    let o = leafwood(dir.path(), &["preprocess", "--input", "bad.csv", "--out", "store"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"));
    let o = leafwood(dir.path(), &["preprocess", "--input", "missing.ply", "--out", "store"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn evaluate_rejects_mismatched_clouds() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("pred.csv"), "x,y,z,label\n0,0,0,1\n1,0,0,0\n").unwrap();
    fs::write(dir.path().join("truth.csv"), "x,y,z,label\n0,0,0,1\n1,0,0,0\n2,0,0,0\n").unwrap();
    let o = leafwood(dir.path(), &["evaluate", "--pred", "pred.csv", "--truth", "truth.csv", "--out", "ev"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("2 predicted points against 3"));
}

#[test]
fn evaluate_and_report_write_tables() {
    let dir = tempfile::tempdir().unwrap();
    let mut truth = String::from("x,y,z,label,tree_id\n");
    let mut pred = String::from("x,y,z,label\n");
    for i in 0..40 {
        let wood = (i < 20) as u8;
        truth.push_str(&format!("0,0,{},{wood},1\n", i as f64 * 0.1));
        pred.push_str(&format!("0,0,{},{}\n", i as f64 * 0.1, if i == 0 { 0 } else { wood }));
    }
    fs::write(dir.path().join("truth.csv"), truth).unwrap();
    fs::write(dir.path().join("pred.csv"), pred).unwrap();
    let o = leafwood(
        dir.path(),
        &["evaluate", "--pred", "pred.csv", "--truth", "truth.csv", "--paths", "--out", "ev"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report = fs::read_to_string(dir.path().join("ev/report.csv")).unwrap();
    assert!(report.contains("fn,1\n"));
    assert!(report.contains("ba,0.975\n"));
    let deciles = fs::read_to_string(dir.path().join("ev/deciles.csv")).unwrap();
    assert_eq!(deciles.lines().count(), 11);
    assert!(dir.path().join("ev/run_manifest.toml").exists());
    let o = leafwood(dir.path(), &["report", "ev/deciles.csv", "--out", "rep"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let svg = fs::read_to_string(dir.path().join("rep/deciles.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("polyline"));
}

/// One epoch over 35 samples at batch 10 is 4 optimiser steps; the trained
/// weights then drive `predict`, whose output `evaluate` accepts.
#[test]
fn preprocess_train_predict_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let run = |args: &[&str]| {
        let o = leafwood(d, args);
        assert_eq!(code(&o), 0, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    };
    run(&["generate", "--seed", "5", "--trees", "1", "--out", "plot.ply"]);
    run(&["preprocess", "--input", "plot.ply", "--out", "store", "--max-points", "1024"]);
    let (mut samples, _) = leafwood::store::read_sample_store(&d.join("store")).unwrap();
    assert!(samples.len() >= 35, "{} samples", samples.len());
    samples.truncate(35);
    leafwood::store::write_sample_store(&d.join("train35"), &samples, "plot.ply", 0, "").unwrap();
    run(&[
        "train", "--train", "train35", "--val", "store", "--out", "w.lwt", "--epochs", "1", "--reduced",
    ]);
    let log = fs::read_to_string(d.join("w.lwt.log.csv")).unwrap();
    let row: Vec<&str> = log.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[0], "1");
    assert_eq!(row[5], "4");
    assert!(d.join("w.lwt.net.toml").exists());
    assert!(d.join("w.lwt.checkpoints/epoch_0001.lwt").exists());
    assert!(fs::read_to_string(d.join("w.lwt.checkpoints/best")).unwrap().starts_with("epoch_0001.lwt"));

    run(&["predict", "--input", "plot.ply", "--weights", "w.lwt", "--out", "pred.ply", "--excluded", "excl.ply"]);
    let pred = read_point_file(&d.join("pred.ply")).unwrap().cloud;
    assert!(pred.labels.is_some() && pred.wood_probability.is_some());
    run(&["predict", "--input", "plot.ply", "--weights", "w.lwt", "--out", "pred2.ply", "--threads", "2"]);
    assert_eq!(fs::read(d.join("pred.ply")).unwrap(), fs::read(d.join("pred2.ply")).unwrap());
    run(&[
        "evaluate", "--pred", "pred.ply", "--truth", "plot.ply", "--filter-truth", "--paths", "--out", "ev",
    ]);
    assert!(fs::read_to_string(d.join("ev/report.txt")).unwrap().contains("BAP"));
}
