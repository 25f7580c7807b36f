use std::path::Path;
use std::process::{Command, Output};

fn voxmt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_voxmt")).args(args).output().expect("spawn voxmt")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn synth_init_run_eval() {
    let dir = tempfile::tempdir().unwrap();
    let scene = dir.path().join("scene.pcb");
    let weights = dir.path().join("w.wts");
    let pred = dir.path().join("pred.pan");
    let boxes = dir.path().join("pred.box");
    let cfg = dir.path().join("toy.cfg");

    let o = voxmt(&["synth", "--seed", "3", "--out", s(&scene), "--points", "4000"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("scene.lbl").exists() && dir.path().join("scene.box").exists());

    let o = voxmt(&["config", "--config", "toy"]);
    std::fs::write(&cfg, &o.stdout).unwrap();
    let o = voxmt(&["init", "--config", s(&cfg), "--seed", "1", "--out", s(&weights)]);
    assert!(o.status.success());

    let gt = dir.path().join("scene.lbl");
    let gtb = dir.path().join("scene.box");
    let o = voxmt(&[
        "run", "--config", s(&cfg), "--weights", s(&weights), "--input", s(&scene), "--out", s(&pred),
        "--boxes", s(&boxes), "--gt", s(&gt), "--gt-boxes", s(&gtb),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("loss.total="), "{text}");
    assert!(pred.exists() && boxes.exists());

    let csv = dir.path().join("m.csv");
    let o = voxmt(&["eval", "--pred", s(&pred), "--gt", s(&gt), "--input", s(&scene), "--csv", s(&csv)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("miou=") && text.contains("pq="));
    assert!(std::fs::read_to_string(&csv).unwrap().starts_with("class,iou,pq"));

    let o = voxmt(&["eval", "--pred", s(&gt), "--gt", s(&gt)]);
    assert_eq!(o.status.code(), Some(1), "a label file is not a panoptic file");
}

#[test]
fn tta_run_matches_shape() {
    let dir = tempfile::tempdir().unwrap();
    let scene = dir.path().join("a.pcb");
    let weights = dir.path().join("w.wts");
    let pred = dir.path().join("a.pan");
    assert!(voxmt(&["synth", "--seed", "5", "--out", s(&scene), "--points", "1500"]).status.success());
    assert!(voxmt(&["init", "--out", s(&weights)]).status.success());
    let o = voxmt(&["run", "--config", "toy", "--weights", s(&weights), "--input", s(&scene), "--out", s(&pred), "--tta"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let l = voxmt_core::io::load_panoptic(&pred).unwrap();
    assert_eq!(l.len(), 1500);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad_cfg = dir.path().join("bad.cfg");
    std::fs::write(&bad_cfg, "profile=toy\nnot_a_key=3\n").unwrap();
    let o = voxmt(&["init", "--config", s(&bad_cfg), "--out", s(&dir.path().join("w"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("not_a_key"));

    let junk = dir.path().join("junk.pcb");
    std::fs::write(&junk, b"nonsense").unwrap();
    let weights = dir.path().join("w.wts");
    assert!(voxmt(&["init", "--out", s(&weights)]).status.success());
    let o = voxmt(&["run", "--config", "toy", "--weights", s(&weights), "--input", s(&junk), "--out", s(&dir.path().join("p"))]);
    assert_eq!(o.status.code(), Some(1));

    let nuscenes_weights = dir.path().join("n.wts");
    let small = dir.path().join("small.cfg");
    std::fs::write(&small, "profile=nuscenes\nthing_classes=2,9\n").unwrap();
    let o = voxmt(&["init", "--config", s(&small), "--out", s(&nuscenes_weights)]);
    assert_eq!(o.status.code(), Some(2), "thing class outside the class range");
    let o = voxmt(&["run", "--config", "nuscenes", "--weights", s(&weights), "--input", s(&junk), "--out", s(&dir.path().join("p"))]);
    assert_eq!(o.status.code(), Some(2), "toy weights do not fit the nuscenes shapes");
}

#[test]
fn selftest_single_criterion() {
    let o = voxmt(&["selftest", "--criterion", "5"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("criterion  5") && text.contains("PASS"));
}
