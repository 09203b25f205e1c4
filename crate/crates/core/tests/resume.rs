use std::path::Path;

use latentmotion::dataio::{generate_synthetic, SyntheticSpec};
use latentmotion::latent_model::ModelConfig;
use latentmotion::losses::LossWeights;
use latentmotion::training::{self, RunOptions, TrainConfig};

fn checkpoints(run: &Path) -> Vec<String> {
    let mut dirs: Vec<String> = std::fs::read_dir(run)
        .unwrap()
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with("step_"))
        .collect();
    dirs.sort();
    dirs
}

#[test]
fn interrupted_runs_resume_bit_exactly() {
    let ds = generate_synthetic(&SyntheticSpec {
        num_frames: 150,
        layers: 2,
        dim: 8,
        seed: 3,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let model = ModelConfig {
        layers: 2,
        dim: 8,
        noise_dim: 8,
        hidden_dim: 8,
        train_window_t: 8,
        ..ModelConfig::default()
    };
    let train = TrainConfig {
        epochs: 3,
        checkpoint_every_epochs: 1,
        seed: 3,
        ..TrainConfig::default()
    };
    let loss = LossWeights::default();
    let tmp = tempfile::tempdir().unwrap();
    let (full, cut) = (tmp.path().join("full"), tmp.path().join("cut"));
    let opts = |dir: &Path, resume| RunOptions {
        run_dir: Some(dir.to_path_buf()),
        resume,
        dataset_label: None,
    };
    training::train(&ds, &model, &train, &loss, &opts(&full, false)).unwrap();
    training::train(&ds, &model, &train, &loss, &opts(&cut, false)).unwrap();

    // Pretend the second run died after its first checkpoint.
    let steps = checkpoints(&cut);
    assert_eq!(steps.len(), 3);
    for s in &steps[1..] {
        std::fs::remove_dir_all(cut.join(s)).unwrap();
    }
    training::train(&ds, &model, &train, &loss, &opts(&cut, true)).unwrap();

    assert_eq!(checkpoints(&full), checkpoints(&cut));
    for s in checkpoints(&full) {
        for f in ["raw.ckpt", "ema.ckpt", "state.ckpt"] {
            let a = std::fs::read(full.join(&s).join(f)).unwrap();
            let b = std::fs::read(cut.join(&s).join(f)).unwrap();
            assert!(a == b, "{s}/{f} differs after resume");
        }
    }
    assert_eq!(
        training::read_report(&full).unwrap(),
        training::read_report(&cut).unwrap()
    );

    let err = training::train(&ds, &model, &train, &loss, &opts(&cut, true)).unwrap_err();
    assert!(err.to_string().contains(training::ALREADY_FINISHED));
}

#[test]
fn checkpoints_reload_to_the_same_samples() {
    let ds = generate_synthetic(&SyntheticSpec {
        num_frames: 80,
        layers: 2,
        dim: 8,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let model = ModelConfig {
        layers: 2,
        dim: 8,
        noise_dim: 4,
        hidden_dim: 4,
        train_window_t: 6,
        ..ModelConfig::default()
    };
    let train = TrainConfig {
        epochs: 1,
        ..TrainConfig::default()
    };
    let tmp = tempfile::tempdir().unwrap();
    let opts = RunOptions {
        run_dir: Some(tmp.path().to_path_buf()),
        ..RunOptions::default()
    };
    training::train(&ds, &model, &train, &LossWeights::default(), &opts).unwrap();
    let (_, dir) = training::latest_checkpoint(tmp.path()).unwrap().unwrap();
    let a = training::sample(&dir.join("ema.ckpt"), 20, 3, 5).unwrap();
    let b = training::sample(&dir.join("ema.ckpt"), 20, 3, 5).unwrap();
    assert_eq!(a, b);
    assert!(a
        .iter()
        .all(|s| s.len() == 20 && s.data().iter().all(|v| v.is_finite())));
    let (g, info) = training::load_generator(&dir.join("raw.ckpt")).unwrap();
    assert_eq!(g.config(), &model);
    assert!(!format!("{info:?}").is_empty());
}
