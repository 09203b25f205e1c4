use std::path::Path;
use std::process::{Command, Output};

use latentmotion::dataio::{read_sequences, LatentDataset};
use latentmotion::training::RunManifest;
use serde_json::Value;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_latentmotion"))
        .current_dir(dir)
        .env_remove("LATENTMOTION_SEED")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const TOY: &str = r#"{
  "model": {"layers": 2, "dim": 8, "noise_dim": 8, "hidden_dim": 8, "train_window_t": 8},
  "train": {"epochs": 2, "checkpoint_every_epochs": 1, "seed": 4}
}"#;

fn toy_run(dir: &Path) {
    std::fs::write(dir.join("toy.json"), TOY).unwrap();
    ok(
        dir,
        &[
            "synth", "--out", "ds", "--frames", "120", "--layers", "2", "--dim", "8", "--seed", "1",
        ],
    );
    ok(dir, &["--config", "toy.json", "train", "--data", "ds", "--run", "run"]);
}

fn last_checkpoint(dir: &Path) -> String {
    let (_, d) = latentmotion::training::latest_checkpoint(&dir.join("run"))
        .unwrap()
        .unwrap();
    d.strip_prefix(dir).unwrap().join("ema.ckpt").display().to_string()
}

#[test]
fn synth_writes_a_loadable_dataset_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let args = [
        "synth", "--frames", "2000", "--layers", "4", "--dim", "16", "--seed", "7", "--out",
    ];
    ok(d, &[&args[..], &["a"]].concat());
    ok(d, &[&args[..], &["b"]].concat());
    let ds = LatentDataset::load(&d.join("a")).unwrap();
    assert_eq!((ds.num_frames(), ds.layers, ds.dim), (2000, 4, 16));
    let a = std::fs::read(d.join("a/latents.bin")).unwrap();
    let b = std::fs::read(d.join("b/latents.bin")).unwrap();
    assert_eq!(a, b);
    assert!(d.join("a/command.json").is_file());
}

#[test]
fn zero_frames_is_a_validation_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(tmp.path(), &["synth", "--out", "x", "--frames", "0"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("num_frames"));
}

#[test]
fn unknown_config_field_is_named() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("c.json"), r#"{"loss": {"lambda_gapp": 1}}"#).unwrap();
    let out = run(tmp.path(), &["--config", "c.json", "inspect", "."]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lambda_gapp"));
}

#[test]
fn missing_files_exit_with_io_code() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(tmp.path(), &["pca", "--data", "nowhere", "--out", "b.lmt"]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn default_training_config_round_trips_through_the_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(
        d,
        &["synth", "--out", "ds", "--frames", "40", "--layers", "2", "--dim", "8"],
    );
    // Only the model shape and epoch count differ from the defaults.
    std::fs::write(
        d.join("c.json"),
        r#"{"model": {"layers": 2, "dim": 8, "noise_dim": 4, "hidden_dim": 4, "train_window_t": 8}}"#,
    )
    .unwrap();
    ok(
        d,
        &[
            "--config", "c.json", "train", "--data", "ds", "--run", "run", "--epochs", "1",
        ],
    );
    let text = std::fs::read_to_string(d.join("run/manifest.json")).unwrap();
    let m: RunManifest = serde_json::from_str(&text).unwrap();
    assert_eq!(m.config.train.ema_momentum, 0.995);
    assert_eq!(m.config.train.epochs, 1);
    let defaults: Value = serde_json::from_str(&ok(d, &["inspect", "run"])).unwrap();
    assert_eq!(defaults["kind"], "run");

    ok(d, &["--config", "c.json", "train", "--data", "ds", "--run", "run2"]);
    let m: RunManifest = serde_json::from_str(&std::fs::read_to_string(d.join("run2/manifest.json")).unwrap()).unwrap();
    assert_eq!(m.config.train.epochs, 350);
}

#[test]
fn toy_training_writes_ema_checkpoints_and_resume_is_a_noop() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    toy_run(d);
    let steps: Vec<_> = std::fs::read_dir(d.join("run"))
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().starts_with("step_"))
        .collect();
    assert_eq!(steps.len(), 2);
    for s in &steps {
        assert!(s.path().join("ema.ckpt").is_file());
    }
    let report = std::fs::read_to_string(d.join("run/report.jsonl")).unwrap();
    let out = ok(
        d,
        &[
            "--config", "toy.json", "train", "--data", "ds", "--run", "run", "--resume",
        ],
    );
    assert!(out.contains("already finished"), "{out}");
    assert_eq!(std::fs::read_to_string(d.join("run/report.jsonl")).unwrap(), report);
}

#[test]
fn sample_writes_count_by_t_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    toy_run(d);
    let ckpt = last_checkpoint(d);
    ok(d, &["sample", "--checkpoint", &ckpt, "--out", "s.lmt"]);
    let seqs = read_sequences(&d.join("s.lmt")).unwrap();
    assert_eq!(seqs.len(), 128);
    assert!(seqs
        .iter()
        .all(|s| s.len() == 250 && s.data().iter().all(|v| v.is_finite())));
    assert!(d.join("s.lmt.manifest.json").is_file());
}

#[test]
fn transfer_with_zero_offset_returns_the_input() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    toy_run(d);
    let ckpt = last_checkpoint(d);
    ok(
        d,
        &[
            "sample",
            "--checkpoint",
            &ckpt,
            "--out",
            "s.lmt",
            "--t",
            "12",
            "--count",
            "3",
        ],
    );
    std::fs::write(
        d.join("zero.json"),
        serde_json::to_string(&vec![vec![0.0; 8]; 2]).unwrap(),
    )
    .unwrap();
    ok(
        d,
        &[
            "transfer",
            "--trajectory",
            "s.lmt",
            "--offset",
            "zero.json",
            "--out",
            "t.lmt",
        ],
    );
    assert_eq!(
        read_sequences(&d.join("s.lmt")).unwrap(),
        read_sequences(&d.join("t.lmt")).unwrap()
    );
}

#[test]
fn transfer_reports_both_shapes_on_mismatch() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(
        d,
        &["synth", "--out", "ds", "--frames", "50", "--layers", "2", "--dim", "8"],
    );
    ok(d, &["pca", "--data", "ds", "--k", "3", "--out", "b.lmt"]);
    std::fs::write(d.join("w.json"), serde_json::to_string(&vec![vec![0.0; 4]; 2]).unwrap()).unwrap();
    let out = run(
        d,
        &[
            "transfer",
            "--trajectory",
            "ds",
            "--basis",
            "b.lmt",
            "--code",
            "w.json",
            "--out",
            "t.lmt",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("2x4") && err.contains("2x8"), "{err}");
}

#[test]
fn eval_defaults_follow_the_protocol() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    toy_run(d);
    let ckpt = last_checkpoint(d);
    let fvd: Value = serde_json::from_str(&ok(
        d,
        &["eval", "--metric", "fvd", "--data", "ds", "--checkpoint", &ckpt],
    ))
    .unwrap();
    assert_eq!(fvd["n"], 2048);
    assert_eq!(fvd["clip_len"], 25);
    assert_eq!(fvd["extractor"], "random-projection-64");
    let explicit: Value = serde_json::from_str(&ok(
        d,
        &[
            "eval",
            "--metric",
            "fvd",
            "--n",
            "2048",
            "--clip",
            "25",
            "--data",
            "ds",
            "--checkpoint",
            &ckpt,
        ],
    ))
    .unwrap();
    assert_eq!(explicit, fvd);
    let fid: Value = serde_json::from_str(&ok(
        d,
        &["eval", "--metric", "fid", "--data", "ds", "--checkpoint", &ckpt],
    ))
    .unwrap();
    assert_eq!(fid["n"], 8000);
    let acd: Value = serde_json::from_str(&ok(
        d,
        &["eval", "--metric", "acd", "--checkpoint", &ckpt, "--out", "acd.json"],
    ))
    .unwrap();
    assert_eq!(acd["n"], 128);
    assert!(d.join("acd.json.manifest.json").is_file());
}

#[test]
fn seed_falls_back_to_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(
        d,
        &["synth", "--out", "ds", "--frames", "60", "--layers", "2", "--dim", "8"],
    );
    let eval = |env: Option<&str>, extra: &[&str]| -> Value {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_latentmotion"));
        cmd.current_dir(d).env_remove("LATENTMOTION_SEED");
        if let Some(s) = env {
            cmd.env("LATENTMOTION_SEED", s);
        }
        let args = [
            &[
                "eval",
                "--metric",
                "fid",
                "--data",
                "ds",
                "--samples",
                "ds.lmt",
                "--n",
                "40",
            ][..],
            extra,
        ]
        .concat();
        let out = cmd.args(args).output().unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        serde_json::from_slice(&out.stdout).unwrap()
    };
    std::fs::write(
        d.join("zero.json"),
        serde_json::to_string(&vec![vec![0.0; 8]; 2]).unwrap(),
    )
    .unwrap();
    ok(
        d,
        &[
            "transfer",
            "--trajectory",
            "ds",
            "--offset",
            "zero.json",
            "--out",
            "ds.lmt",
        ],
    );
    assert_eq!(eval(Some("11"), &[])["seed"], 11);
    assert_eq!(eval(Some("11"), &["--seed", "3"])["seed"], 3);
    assert_eq!(eval(None, &[])["seed"], 0);
}

#[test]
fn decode_renders_png_frames() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(
        d,
        &["synth", "--out", "ds", "--frames", "25", "--layers", "2", "--dim", "8"],
    );
    ok(d, &["decode", "--input", "ds", "--out", "frames"]);
    let pngs = std::fs::read_dir(d.join("frames"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png"))
        .count();
    assert_eq!(pngs, 25);
    let img = image::open(d.join("frames/frame_00000.png")).unwrap();
    assert_eq!((img.width(), img.height()), (64, 64));
}
