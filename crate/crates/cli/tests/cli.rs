//! End-to-end runs of the `mdsp` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mdsp::eval::detection_metrics;
use mdsp::postprocess::{BBox, Detection};
use mdsp::synth::read_dataset;

fn mdsp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mdsp")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = mdsp(args);
    assert!(out.status.success(), "{:?} failed: {}", args, String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn failure(args: &[&str]) -> (i32, String) {
    let out = mdsp(args);
    assert!(!out.status.success(), "{:?} should fail", args);
    (out.status.code().unwrap(), String::from_utf8(out.stderr).unwrap())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn synth(dir: &Path, count: usize, extra: &[&str]) {
    let n = count.to_string();
    let mut args = vec!["synth", "--out", s(dir), "--count", &n];
    args.extend_from_slice(extra);
    ok(&args);
}

#[test]
fn synth_counts_and_reproducibility() {
    let t = tempfile::tempdir().unwrap();
    let empty = t.path().join("empty");
    synth(&empty, 0, &[]);
    assert_eq!(std::fs::read(empty.join("annotations.jsonl")).unwrap(), b"");
    assert!(read_dataset(&empty).unwrap().is_empty());

    let hundred = t.path().join("hundred");
    synth(&hundred, 100, &[]);
    assert_eq!(std::fs::read_dir(hundred.join("images")).unwrap().count(), 100);
    assert_eq!(std::fs::read_to_string(hundred.join("annotations.jsonl")).unwrap().lines().count(), 100);

    let (a, b, c) = (t.path().join("a"), t.path().join("b"), t.path().join("c"));
    synth(&a, 5, &["--seed", "9"]);
    synth(&b, 5, &["--seed", "9"]);
    synth(&c, 5, &["--seed", "10"]);
    assert_eq!(files(&a), files(&b));
    assert_ne!(files(&a), files(&c));
    assert!(std::fs::read_to_string(a.join("resolved-config.toml")).unwrap().contains("seed = 9"));

    let stats = ok(&["synth", "--out", s(&t.path().join("d")), "--count", "3"]);
    assert!(stats.contains("Person") && stats.contains("Everyday objects"), "{}", stats);
}

#[test]
fn synth_reports_unwritable_paths() {
    let t = tempfile::tempdir().unwrap();
    let file = t.path().join("file");
    std::fs::write(&file, "x").unwrap();
    let (code, err) = failure(&["synth", "--out", s(&file.join("sub")), "--count", "1"]);
    assert_eq!(code, 1);
    assert!(err.starts_with("error[io]:"), "{}", err);
}

#[test]
fn anchors_are_sorted_by_area() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path().join("d");
    synth(&d, 12, &[]);
    let out = ok(&["anchors", "--data", s(&d)]);
    let rows: Vec<(f64, f64)> = out
        .lines()
        .filter_map(|l| {
            let f: Vec<&str> = l.split_whitespace().collect();
            (f.len() == 3 && f[0].parse::<usize>().is_ok()).then(|| (f[1].parse().unwrap(), f[2].parse().unwrap()))
        })
        .collect();
    assert_eq!(rows.len(), 9);
    assert!(rows.windows(2).all(|w| w[0].0 * w[0].1 <= w[1].0 * w[1].1 + 1e-6));
    assert!(out.contains("mean best IoU"));

    let few = t.path().join("few");
    synth(&few, 1, &[]);
    let (code, _) = failure(&["anchors", "--data", s(&few), "-k", "9"]);
    assert_ne!(code, 0);
}

#[test]
fn segment_only_training_evaluates_segmentation_only() {
    let t = tempfile::tempdir().unwrap();
    let (d, run) = (t.path().join("d"), t.path().join("run"));
    synth(&d, 4, &[]);
    ok(&["train", "--data", s(&d), "--out", s(&run), "--tasks", "segment", "--set", "train.epochs=1", "--set", "train.batch_size=2"]);
    for f in ["model.ckpt", "train_log.csv", "resolved-config.toml"] {
        assert!(run.join(f).is_file(), "{} missing", f);
    }
    let resolved = std::fs::read_to_string(run.join("resolved-config.toml")).unwrap();
    assert!(resolved.contains("tasks = [\"segment\"]") && resolved.contains("epochs = 1"), "{}", resolved);
    let log = std::fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert!(log.starts_with("epoch,l_dct,l_seg,l_pose,lam_dct,lam_seg,lam_pose,total"));

    let ckpt = run.join("model.ckpt");
    let report: serde_json::Value = serde_json::from_str(&ok(&["eval", "--checkpoint", s(&ckpt), "--data", s(&d), "--format", "json"])).unwrap();
    assert!(report["detection"].is_null() && report["pose"].is_null());
    assert!(report["segmentation"]["miou"].is_number());

    let (code, err) = failure(&["eval", "--checkpoint", s(&ckpt), "--data", s(&d), "--tasks", "pose"]);
    assert_eq!(code, 2, "{}", err);
}

#[test]
fn checkpoint_mismatch_names_both_shapes() {
    let t = tempfile::tempdir().unwrap();
    let (d, run) = (t.path().join("d"), t.path().join("run"));
    synth(&d, 2, &[]);
    ok(&["train", "--data", s(&d), "--out", s(&run), "--set", "train.epochs=1", "--tasks", "detect"]);
    let ckpt = run.join("model.ckpt");
    let (code, err) = failure(&["eval", "--checkpoint", s(&ckpt), "--data", s(&d), "--set", "model.width_mult=0.25"]);
    assert_eq!(code, 3);
    assert!(err.starts_with("error[mismatch]:"), "{}", err);
    assert!(err.contains("[4, 3, 3, 3]") && err.contains("[8, 3, 3, 3]"), "{}", err);

    let big = t.path().join("big");
    synth(&big, 1, &["--set", "model.input_size=128"]);
    let (code, err) = failure(&["eval", "--checkpoint", s(&ckpt), "--data", s(&big)]);
    assert_eq!(code, 1);
    assert!(err.contains("128x128") && err.contains("64x64"), "{}", err);
}

#[test]
fn bad_configuration_is_rejected() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path().join("d");
    synth(&d, 1, &[]);
    let cfg = t.path().join("c.toml");
    std::fs::write(&cfg, "[train]\nepochs = 1\nlearning_rate = 0.1\n").unwrap();
    let out = s(&t.path().join("o")).to_string();
    for args in [
        vec!["train", "--data", s(&d), "--out", &out, "--config", s(&cfg)],
        vec!["train", "--data", s(&d), "--out", &out, "--set", "model.widht=1"],
        vec!["train", "--data", s(&d), "--out", &out, "--set", "novalue"],
        vec!["train", "--data", s(&d), "--out", &out, "--tasks", "depth"],
        vec!["train", "--data", s(&d), "--out", &out, "--set", "train.lr_head=0"],
    ] {
        let (code, err) = failure(&args);
        assert_eq!(code, 2, "{:?}: {}", args, err);
        assert!(err.starts_with("error["), "{}", err);
    }
    assert!(failure(&["frobnicate"]).0 != 0);
}

#[test]
fn bench_total_is_never_below_cnn() {
    let out = ok(&["bench", "--images", "1", "--repeats", "5", "--format", "csv", "--set", "model.input_size=32"]);
    let rows: Vec<(f64, f64)> = out
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<f64> = l.split(',').map(|x| x.parse().unwrap()).collect();
            (f[1], f[2])
        })
        .collect();
    assert_eq!(rows.len(), 5);
    assert!(rows.iter().all(|(c, t)| t >= c));
    let table = ok(&["bench", "--images", "1", "--repeats", "5", "--tasks", "detect", "--set", "model.input_size=32"]);
    assert!(table.contains("cnn") && table.contains("total") && table.contains("tasks detect"), "{}", table);
    assert_eq!(failure(&["bench", "--repeats", "2"]).0, 2);
}

fn detections(rec: &serde_json::Value) -> Vec<Detection> {
    rec["detections"]
        .as_array()
        .unwrap()
        .iter()
        .map(|d| {
            let b: Vec<f64> = d["bbox"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
            Detection { bbox: BBox::new(b[0], b[1], b[2], b[3]), class_id: d["class_id"].as_u64().unwrap() as usize, score: d["score"].as_f64().unwrap() }
        })
        .collect()
}

#[test]
fn infer_after_overfitting_matches_the_ground_truth() {
    let t = tempfile::tempdir().unwrap();
    let cfg = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/overfit.toml");
    let (d, run, inf) = (t.path().join("d"), t.path().join("run"), t.path().join("inf"));
    ok(&["synth", "--config", cfg, "--out", s(&d), "--count", "16"]);
    ok(&["train", "--config", cfg, "--data", s(&d), "--out", s(&run)]);
    ok(&["infer", "--checkpoint", s(&run.join("model.ckpt")), "--out", s(&inf), "--data", s(&d)]);

    let lines: Vec<serde_json::Value> = std::fs::read_to_string(inf.join("predictions.jsonl")).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 16);
    assert_eq!(std::fs::read_dir(inf.join("overlays")).unwrap().count(), 16);
    assert!(inf.join("resolved-config.toml").is_file());
    let data = read_dataset(&d).unwrap();
    let preds: Vec<Vec<Detection>> = lines.iter().map(detections).collect();
    let gts: Vec<_> = data.iter().map(|s| s.ann.boxes.clone()).collect();
    let m = detection_metrics(&preds, &gts, 4).unwrap();
    assert!(m.ap50 >= 0.8, "AP50 {}", m.ap50);
    for (rec, sample) in lines.iter().zip(&data) {
        assert_eq!(rec["segmentation"]["width"].as_u64().unwrap() as usize, sample.ann.width);
        assert!(rec["skeletons"].is_array() && rec["detections"].is_array());
    }
}

#[test]
fn infer_reads_ppm_files_and_checks_their_size() {
    let t = tempfile::tempdir().unwrap();
    let (d, run) = (t.path().join("d"), t.path().join("run"));
    synth(&d, 2, &[]);
    ok(&["train", "--data", s(&d), "--out", s(&run), "--set", "train.epochs=1"]);
    let ckpt = run.join("model.ckpt");
    let img = d.join("images/0001.ppm");
    ok(&["infer", "--checkpoint", s(&ckpt), "--out", s(&t.path().join("i")), s(&img)]);
    assert!(t.path().join("i/overlays/0001.ppm").is_file());

    let big = t.path().join("big");
    synth(&big, 1, &["--set", "model.input_size=96"]);
    let (code, err) = failure(&["infer", "--checkpoint", s(&ckpt), "--out", s(&t.path().join("j")), s(&big.join("images/0000.ppm"))]);
    assert_eq!(code, 1);
    assert!(err.contains("[3, 96, 96]") && err.contains("[3, 64, 64]"), "{}", err);
    assert_eq!(failure(&["infer", "--checkpoint", s(&ckpt), "--out", s(&t.path().join("k"))]).0, 2);
}
