//! End-to-end tests driving the built `nabla` binary.

use std::path::Path;
use std::process::{Command, Output};

fn nabla(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nabla"))
        .args(args)
        .output()
        .expect("spawn nabla")
}

fn assert_success(out: &Output) {
    assert!(
        out.status.success(),
        "expected exit 0, got {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Domain failures must print exactly one `error: ...` line and exit nonzero.
fn assert_one_line_error(out: &Output) {
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.starts_with("error: "), "stderr was: {stderr}");
    assert_eq!(stderr.trim_end_matches('\n').lines().count(), 1, "stderr was: {stderr}");
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn synth_writes_segmentation_layout() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    let res = nabla(&["synth", "--out", out.to_str().unwrap(), "--n", "3", "--size", "24", "--seed", "9"]);
    assert_success(&res);
    for i in 0..3 {
        assert!(out.join(format!("images/synth_{i:04}.png")).is_file());
        assert!(out.join(format!("masks/synth_{i:04}.png")).is_file());
    }
}

#[test]
fn synth_writes_classification_layout() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    let res = nabla(&[
        "synth", "--out", out.to_str().unwrap(), "--n", "4", "--size", "24", "--seed", "9",
        "--classes", "2",
    ]);
    assert_success(&res);
    let csv = std::fs::read_to_string(out.join("labels.csv")).unwrap();
    assert!(csv.starts_with("filename,label\n"));
    assert_eq!(csv.lines().count(), 5);
    assert!(out.join("images/synth_0003.png").is_file());
    assert!(!out.join("masks").exists());
}

#[test]
fn synth_is_seed_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        assert_success(&nabla(&["synth", "--out", out.to_str().unwrap(), "--n", "2", "--size", "16", "--seed", "5"]));
    }
    let img_a = std::fs::read(a.join("images/synth_0000.png")).unwrap();
    let img_b = std::fs::read(b.join("images/synth_0000.png")).unwrap();
    assert_eq!(img_a, img_b);
}

#[test]
fn train_evaluate_predict_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_success(&nabla(&["synth", "--out", data.to_str().unwrap(), "--n", "4", "--size", "16", "--seed", "3"]));

    let run = dir.path().join("run");
    let cfg = write_config(
        dir.path(),
        "run.json",
        &format!(
            r#"{{"task":"segment","widths":[4,8],"input_size":16,"n_decoders":1,"t":1,
                "images":"{img}","masks":"{msk}","epochs":2,"batch_size":4,"lr":0.01,
                "augment":false,"val_fraction":0.0,"out_dir":"{run}"}}"#,
            img = data.join("images").display(),
            msk = data.join("masks").display(),
            run = run.display()
        ),
    );
    let res = nabla(&["train", "--config", &cfg]);
    assert_success(&res);
    let stdout = String::from_utf8_lossy(&res.stdout);
    assert!(stdout.contains("final checkpoint:"), "stdout: {stdout}");
    let ckpt = run.join("final.nbln");
    assert!(ckpt.is_file());
    assert!(run.join("train_log.csv").is_file());

    let report = dir.path().join("report.csv");
    let res = nabla(&[
        "evaluate", "--checkpoint", ckpt.to_str().unwrap(), "--data", data.to_str().unwrap(),
        "--out", report.to_str().unwrap(),
    ]);
    assert_success(&res);
    let csv = std::fs::read_to_string(&report).unwrap();
    assert!(csv.starts_with("aggregation,tp,fp,fn,tn,"), "csv: {csv}");
    assert!(csv.contains("\nmicro,"));
    assert!(csv.contains("\nper-image-mean,"));

    let pred = dir.path().join("pred");
    let res = nabla(&[
        "predict", "--checkpoint", ckpt.to_str().unwrap(),
        "--image", data.join("images/synth_0000.png").to_str().unwrap(),
        "--gt", data.join("masks/synth_0000.png").to_str().unwrap(),
        "--out", pred.to_str().unwrap(),
    ]);
    assert_success(&res);
    let mask = image::open(pred.join("synth_0000_mask.png")).unwrap().to_luma8();
    assert_eq!((mask.width(), mask.height()), (16, 16));
    assert!(mask.pixels().all(|p| p.0[0] == 0 || p.0[0] == 255));
    assert!(pred.join("synth_0000_overlay.png").is_file());
}

#[test]
fn train_override_takes_precedence_over_file() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let cfg = write_config(
        dir.path(),
        "run.json",
        &format!(
            r#"{{"task":"segment","widths":[4,8],"input_size":16,"n_decoders":1,"t":1,
                "synth_n":4,"epochs":5,"batch_size":4,"augment":false,"val_fraction":0.0,
                "out_dir":"{}"}}"#,
            run.display()
        ),
    );
    assert_success(&nabla(&["train", "--config", &cfg, "--override", "epochs=2"]));
    let log = std::fs::read_to_string(run.join("train_log.csv")).unwrap();
    // Header plus one row per epoch.
    assert_eq!(log.trim_end().lines().count(), 3);
}

#[test]
fn inspect_config_prints_recipe_and_layers() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.json",
        r#"{"task":"classify","widths":[4,4,8,8],"input_size":16,"classes":3,"t":1}"#,
    );
    let res = nabla(&["inspect", "--config", &cfg]);
    assert_success(&res);
    let stdout = String::from_utf8_lossy(&res.stdout);
    assert!(stdout.contains("task: classify"));
    assert!(stdout.contains("model: irrcnn t=1 input=16 channels=3 classes=3"));
    assert!(stdout.contains("optimizer: sgd"));
    assert!(stdout.contains("lr: 0.01 (/10 at epochs 50, 100)"));
    assert!(stdout.contains("trainable parameters:"));
    assert!(stdout.contains("layers:\n"));
    assert!(stdout.contains("head.w"));
}

#[test]
fn inspect_checkpoint_prints_stored_state() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let cfg = write_config(
        dir.path(),
        "run.json",
        &format!(
            r#"{{"task":"segment","widths":[4,8],"input_size":16,"n_decoders":1,"t":1,
                "synth_n":4,"epochs":2,"batch_size":4,"augment":false,"val_fraction":0.0,
                "out_dir":"{}"}}"#,
            run.display()
        ),
    );
    assert_success(&nabla(&["train", "--config", &cfg]));
    let res = nabla(&["inspect", "--checkpoint", run.join("final.nbln").to_str().unwrap()]);
    assert_success(&res);
    let stdout = String::from_utf8_lossy(&res.stdout);
    assert!(stdout.contains("model: nabla variant=AB decoders=1 t=1 input=16 channels=1"));
    assert!(stdout.contains("epoch: 2"));
    assert!(stdout.contains("optimizer state: adam step"));
    assert!(stdout.contains("trainable parameters:"));
    assert!(stdout.contains("enc0.proj.w [4, 1, 1, 1] trainable"));
    assert!(stdout.contains("bn.running_mean [1, 4, 1, 1] fixed"));
}

#[test]
fn missing_checkpoint_is_one_line_error() {
    let dir = tempfile::tempdir().unwrap();
    let res = nabla(&[
        "evaluate", "--checkpoint", "/definitely/not/here.nbln",
        "--data", dir.path().to_str().unwrap(),
    ]);
    assert_one_line_error(&res);
}

#[test]
fn malformed_config_is_one_line_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.json", r#"{"task":"segment", oops}"#);
    assert_one_line_error(&nabla(&["train", "--config", &cfg]));
    let cfg = write_config(dir.path(), "unknown.json", r#"{"task":"segment","wat":1}"#);
    assert_one_line_error(&nabla(&["train", "--config", &cfg]));
}

#[test]
fn unknown_override_is_one_line_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", r#"{"task":"segment","synth_n":4}"#);
    let res = nabla(&["train", "--config", &cfg, "--override", "bogus=1"]);
    assert_one_line_error(&res);
    let stderr = String::from_utf8_lossy(&res.stderr);
    assert!(stderr.contains("bogus"), "stderr: {stderr}");
}

#[test]
fn corrupt_checkpoint_is_one_line_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("junk.nbln");
    std::fs::write(&path, b"JUNKJUNKJUNK").unwrap();
    let res = nabla(&["inspect", "--checkpoint", path.to_str().unwrap()]);
    assert_one_line_error(&res);
}

#[test]
fn predict_rejects_classifier_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let cfg = write_config(
        dir.path(),
        "cls.json",
        &format!(
            r#"{{"task":"classify","widths":[4,4,8,8],"input_size":16,"classes":2,"t":1,
                "synth_n":4,"epochs":1,"batch_size":4,"lr":0.01,"augment":false,
                "val_fraction":0.0,"out_dir":"{}"}}"#,
            run.display()
        ),
    );
    assert_success(&nabla(&["train", "--config", &cfg]));
    let data = dir.path().join("data");
    assert_success(&nabla(&["synth", "--out", data.to_str().unwrap(), "--n", "1", "--size", "16", "--seed", "1"]));
    let res = nabla(&[
        "predict", "--checkpoint", run.join("final.nbln").to_str().unwrap(),
        "--image", data.join("images/synth_0000.png").to_str().unwrap(),
        "--out", dir.path().join("pred").to_str().unwrap(),
    ]);
    assert_one_line_error(&res);
}

#[test]
fn inspect_requires_exactly_one_source() {
    let res = nabla(&["inspect"]);
    assert!(!res.status.success());
    let res = nabla(&["inspect", "--checkpoint", "a", "--config", "b"]);
    assert!(!res.status.success());
}
