//! Subcommand-level tests driving the compiled binary.

use std::path::Path;
use std::process::{Command, Output};

fn sbcnn(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sbcnn"))
        .args(args)
        .current_dir(dir)
        .env_remove("SBCNN_CACHE_DIR")
        .output()
        .expect("binary runs")
}

fn stdout_json(out: &Output) -> serde_json::Value {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is one JSON object")
}

#[test]
fn synth_writes_the_advertised_files_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let out = sbcnn(
        &["synth", "--classes", "2", "--per-class", "3", "--seed", "7", "--out", "d1"],
        dir.path(),
    );
    let json = stdout_json(&out);
    assert_eq!(json["clips"], 6);
    assert!(dir.path().join("d1/metadata.csv").exists());
    assert!(dir.path().join("d1/run_config.json").exists());

    let out2 = sbcnn(
        &["synth", "--classes", "2", "--per-class", "3", "--seed", "7", "--out", "d2"],
        dir.path(),
    );
    stdout_json(&out2);
    let a = std::fs::read(dir.path().join("d1/audio/fold1/synth_c0_i000.wav")).unwrap();
    let b = std::fs::read(dir.path().join("d2/audio/fold1/synth_c0_i000.wav")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn synth_without_out_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = sbcnn(&["synth", "--classes", "2"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn augment_two_sets_produces_eighty_variants() {
    let dir = tempfile::tempdir().unwrap();
    stdout_json(&sbcnn(
        &["synth", "--classes", "2", "--per-class", "5", "--seed", "1", "--out", "data"],
        dir.path(),
    ));
    let out = sbcnn(
        &[
            "augment",
            "--metadata",
            "data/metadata.csv",
            "--audio-root",
            "data/audio",
            "--out",
            "aug",
            "--ts",
            "--ps1",
            "--seed",
            "2",
        ],
        dir.path(),
    );
    let json = stdout_json(&out);
    assert_eq!(json["variants"], 80);
    assert_eq!(json["entries"], 90);
    let manifests = std::fs::read_to_string(dir.path().join("aug/manifests.jsonl")).unwrap();
    assert_eq!(manifests.lines().count(), 80);
}

#[test]
fn augment_bg_without_backgrounds_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = sbcnn(
        &[
            "augment",
            "--metadata",
            "m.csv",
            "--audio-root",
            "a",
            "--out",
            "o",
            "--bg",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn augment_without_any_set_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = sbcnn(
        &[
            "augment",
            "--metadata",
            "m.csv",
            "--audio-root",
            "a",
            "--out",
            "o",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_smoke_writes_logs_and_is_seed_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    stdout_json(&sbcnn(
        &["synth", "--classes", "2", "--per-class", "5", "--seed", "4", "--out", "data"],
        dir.path(),
    ));
    let train_args = |out: &str| {
        vec![
            "train".to_string(),
            "--metadata".into(),
            "data/metadata.csv".into(),
            "--audio-root".into(),
            "data/audio".into(),
            "--out".into(),
            out.into(),
            "--fold".into(),
            "1".into(),
            "--epochs".into(),
            "2".into(),
            "--epoch-fraction".into(),
            "0.02".into(),
            "--seed".into(),
            "9".into(),
        ]
    };
    let run = |out: &str| {
        let args = train_args(out);
        let refs: Vec<&str> = args.iter().map(|s| s.as_str()).collect();
        stdout_json(&sbcnn(&refs, dir.path()))
    };
    let j1 = run("r1");
    assert_eq!(j1["fold"], 1);
    let log = std::fs::read_to_string(dir.path().join("r1/train_log_fold1.json")).unwrap();
    let parsed: serde_json::Value = serde_json::from_str(&log).unwrap();
    assert_eq!(parsed["epochs"].as_array().unwrap().len(), 2);
    assert!(dir.path().join("r1/checkpoints/fold1/best.ckpt").exists());
    assert!(dir.path().join("r1/run_config.json").exists());

    run("r2");
    let a = std::fs::read(dir.path().join("r1/train_log_fold1.json")).unwrap();
    let b = std::fs::read(dir.path().join("r2/train_log_fold1.json")).unwrap();
    assert_eq!(a, b, "same seed must reproduce the training log byte for byte");
    let ra = std::fs::read(dir.path().join("r1/report_fold1.json")).unwrap();
    let rb = std::fs::read(dir.path().join("r2/report_fold1.json")).unwrap();
    assert_eq!(ra, rb);
}

#[test]
fn predict_emits_a_probability_vector() {
    let dir = tempfile::tempdir().unwrap();
    stdout_json(&sbcnn(
        &["synth", "--classes", "3", "--per-class", "2", "--seed", "5", "--out", "data"],
        dir.path(),
    ));
    // A fresh (untrained) checkpoint is enough to exercise the surface.
    let model = sbcnn_core::sbcnn::build(
        &sbcnn_core::sbcnn::SbcnnConfig {
            n_classes: 3,
            ..Default::default()
        },
        1,
    );
    sbcnn_core::nn::save_checkpoint(&model, &dir.path().join("m.ckpt")).unwrap();

    let out = sbcnn(
        &[
            "predict",
            "--checkpoint",
            "m.ckpt",
            "--wav",
            "data/audio/fold1/synth_c0_i000.wav",
        ],
        dir.path(),
    );
    let json = stdout_json(&out);
    let posteriors = json["posteriors"].as_array().unwrap();
    assert_eq!(posteriors.len(), 3);
    let sum: f64 = posteriors.iter().map(|v| v.as_f64().unwrap()).sum();
    assert!((sum - 1.0).abs() < 1e-6);
    assert!(json["class_name"].is_string());
}

#[test]
fn predict_short_clip_uses_the_padded_patch() {
    let dir = tempfile::tempdir().unwrap();
    // 2-second clip: shorter than the 3-second patch extent.
    let clip = sbcnn_core::testsupport::sine_clip(700.0, 0.5, 2.0, 44_100);
    sbcnn_core::audio::write_wav(&clip, &dir.path().join("short.wav")).unwrap();
    let model = sbcnn_core::sbcnn::build(&Default::default(), 2);
    sbcnn_core::nn::save_checkpoint(&model, &dir.path().join("m.ckpt")).unwrap();
    let out = sbcnn(
        &["predict", "--checkpoint", "m.ckpt", "--wav", "short.wav"],
        dir.path(),
    );
    let json = stdout_json(&out);
    assert_eq!(json["posteriors"].as_array().unwrap().len(), 10);
}

#[test]
fn predict_with_missing_checkpoint_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = sbcnn(
        &["predict", "--checkpoint", "absent.ckpt", "--wav", "x.wav"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.ckpt"));
}

#[test]
fn report_on_identical_inputs_gives_zero_deltas() {
    let dir = tempfile::tempdir().unwrap();
    // Build a small evaluation report through the library.
    let index = sbcnn_core::pipeline::synth_dataset(2, 2, 6, &dir.path().join("data")).unwrap();
    let store = sbcnn_core::pipeline::FeatureStore::build(&index, None).unwrap();
    let model = sbcnn_core::sbcnn::build(
        &sbcnn_core::sbcnn::SbcnnConfig {
            n_classes: 2,
            ..Default::default()
        },
        3,
    );
    let folds: Vec<_> = index
        .folds()
        .into_iter()
        .map(|f| sbcnn_core::pipeline::evaluate(&model, &index, f, &store).unwrap())
        .collect();
    let report = sbcnn_core::pipeline::report_from_folds(index.class_names.clone(), folds);
    std::fs::write(
        dir.path().join("base.json"),
        serde_json::to_string(&report).unwrap(),
    )
    .unwrap();

    let out = sbcnn(
        &[
            "report",
            "--baseline",
            "base.json",
            "--augmented",
            "ts=base.json",
            "--out",
            "rep",
        ],
        dir.path(),
    );
    stdout_json(&out);
    let delta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("rep/delta_report.json")).unwrap())
            .unwrap();
    for row in delta["per_class_delta"].as_array().unwrap() {
        for v in row.as_array().unwrap() {
            assert_eq!(v.as_f64().unwrap(), 0.0);
        }
    }
    assert!(dir.path().join("rep/boxplot.json").exists());
    assert!(dir.path().join("rep/confusion_delta_ts.json").exists());
}
