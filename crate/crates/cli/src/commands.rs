use std::path::{Path, PathBuf};

use latentmotion::archive::Archive;
use latentmotion::dataio::{
    decode_sequence, decoder_from_config, generate_synthetic, read_code, read_sequences, write_code, write_sequences,
    LatentDataset, SyntheticSpec,
};
use latentmotion::latent_model::LatentSequence;
use latentmotion::metrics::{eval_acd, eval_acd_model, eval_fid, eval_fvd, Extractor, MetricReport, Source};
use latentmotion::motion_transfer::{apply_offset, fit_motion_basis, MotionBasis};
use latentmotion::training::{self, RunOptions, ALREADY_FINISHED};
use latentmotion::{Error, Result};
use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::config::{resolve_seed, Config};
use crate::{DecodeArgs, EvalArgs, InspectArgs, Metric, PcaArgs, SampleArgs, SynthArgs, TrainArgs, TransferArgs};

/// Everything needed to rerun a command: its resolved arguments and config.
#[derive(Serialize)]
struct CommandManifest<'a, A: Serialize> {
    tool_version: &'static str,
    command: &'static str,
    arguments: &'a A,
    #[serde(skip_serializing_if = "Option::is_none")]
    config: Option<&'a Config>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    created_unix: u64,
}

fn write_manifest<A: Serialize>(
    path: &Path,
    command: &'static str,
    args: &A,
    config: Option<&Config>,
    seed: Option<u64>,
) -> Result<()> {
    let m = CommandManifest {
        tool_version: env!("CARGO_PKG_VERSION"),
        command,
        arguments: args,
        config,
        seed,
        created_unix: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
    };
    let text = serde_json::to_string_pretty(&m).expect("serializable manifest");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `out.ckpt` -> `out.ckpt.manifest.json`
fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn print_json(v: &impl Serialize) {
    println!("{}", serde_json::to_string(v).expect("serializable output"));
}

/// A dataset directory becomes one sequence; anything else is read as a sequence archive.
fn load_trajectories(path: &Path) -> Result<Vec<LatentSequence>> {
    if path.is_dir() {
        Ok(vec![LatentDataset::load(path)?.to_sequence()])
    } else {
        read_sequences(path)
    }
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let d = SyntheticSpec::default();
    let spec = SyntheticSpec {
        latent_dim_motion: a.motion_dim.unwrap_or(d.latent_dim_motion),
        num_frames: a.frames.unwrap_or(d.num_frames),
        layers: a.layers.unwrap_or(d.layers),
        dim: a.dim.unwrap_or(d.dim),
        num_sinusoids: a.sinusoids.unwrap_or(d.num_sinusoids),
        noise_scale: a.noise.unwrap_or(d.noise_scale),
        motif_frames: a.motif.unwrap_or(d.motif_frames),
        fps: a.fps.unwrap_or(d.fps),
        seed: resolve_seed(a.seed, None)?,
    };
    let ds = generate_synthetic(&spec)?;
    ds.save(&a.out)?;
    write_manifest(&a.out.join("command.json"), "synth", &spec, None, Some(spec.seed))?;
    print_json(&json!({
        "dataset": a.out,
        "frames": ds.num_frames(),
        "layers": ds.layers,
        "dim": ds.dim,
    }));
    Ok(())
}

pub fn train(a: &TrainArgs, mut cfg: Config) -> Result<()> {
    let t = &mut cfg.train;
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.lr {
        t.learning_rate_gen = v;
        t.learning_rate_critic = v;
    }
    if let Some(v) = a.checkpoint_every {
        t.checkpoint_every_epochs = v;
    }
    let seed_in_file = cfg.train_seed();
    cfg.train.seed = resolve_seed(a.seed, seed_in_file)?;
    if let Some(v) = a.window {
        cfg.model.train_window_t = v;
    }
    if let Some(v) = a.lambda_gp {
        cfg.loss.lambda_gp = v;
    }
    if let Some(v) = a.lambda_gap {
        cfg.loss.lambda_gap = v;
    }
    cfg.validate()?;
    let ds = LatentDataset::load(&a.data)?;
    // Model shape follows the dataset unless the config pins it.
    if cfg.model.layers != ds.layers || cfg.model.dim != ds.dim {
        return Err(Error::shape(
            format!("{}x{} codes (model config)", cfg.model.layers, cfg.model.dim),
            format!("{}x{} codes (dataset {})", ds.layers, ds.dim, a.data.display()),
        ));
    }
    let opts = RunOptions {
        run_dir: Some(a.run.clone()),
        resume: a.resume,
        dataset_label: Some(a.data.display().to_string()),
    };
    match training::train(&ds, &cfg.model, &cfg.train, &cfg.loss, &opts) {
        Ok(report) => {
            let last = report.records.last();
            print_json(&json!({
                "run": a.run,
                "generator_steps": last.map_or(0, |r| r.step),
                "checkpoints": report.checkpoints,
                "wall_clock_secs": report.wall_clock_secs,
                "last": last,
            }));
            Ok(())
        }
        Err(Error::Argument(msg)) if msg.starts_with(ALREADY_FINISHED) => {
            println!("nothing to do: {msg}");
            Ok(())
        }
        Err(e) => Err(e),
    }
}

pub fn sample(a: &SampleArgs, cfg: &Config) -> Result<()> {
    let seed = resolve_seed(a.seed, cfg.train_seed())?;
    let seqs = training::sample(&a.checkpoint, a.t, a.count, seed)?;
    let mut meta = Map::new();
    meta.insert("checkpoint".into(), json!(a.checkpoint));
    meta.insert("seed".into(), json!(seed));
    write_sequences(&a.out, &seqs, meta)?;
    write_manifest(&sidecar(&a.out), "sample", a, None, Some(seed))?;
    print_json(&json!({"samples": a.out, "count": seqs.len(), "t": a.t}));
    Ok(())
}

pub fn transfer(a: &TransferArgs) -> Result<()> {
    let trajectories = load_trajectories(&a.trajectory)?;
    let delta = match (&a.offset, &a.basis, &a.code) {
        (Some(path), _, _) => read_code(path)?,
        (None, Some(basis), Some(code)) => {
            let basis = MotionBasis::load(basis)?;
            let w_new = read_code(code)?;
            basis.compute_offset(&w_new)?
        }
        _ => {
            return Err(Error::Argument(
                "pass either --offset or both --basis and --code".into(),
            ))
        }
    };
    let shifted = trajectories
        .iter()
        .map(|t| apply_offset(t, &delta))
        .collect::<Result<Vec<_>>>()?;
    write_sequences(&a.out, &shifted, Map::new())?;
    if let Some(path) = &a.save_offset {
        write_code(path, &delta)?;
    }
    write_manifest(&sidecar(&a.out), "transfer", a, None, None)?;
    let norm = delta.values.iter().map(|v| v * v).sum::<f64>().sqrt();
    print_json(&json!({"out": a.out, "sequences": shifted.len(), "offset_norm": norm}));
    Ok(())
}

pub fn pca(a: &PcaArgs) -> Result<()> {
    let ds = LatentDataset::load(&a.data)?;
    let basis = fit_motion_basis(&ds, a.k)?;
    basis.save(&a.out)?;
    write_manifest(&sidecar(&a.out), "pca", a, None, None)?;
    print_json(&json!({
        "basis": a.out,
        "k": basis.k(),
        "explained_variance": basis.explained_variance,
    }));
    Ok(())
}

pub fn eval(a: &EvalArgs, cfg: &Config) -> Result<()> {
    let e = &cfg.eval;
    let seed = resolve_seed(a.seed, e.seed)?;
    let ex = Extractor::parse(a.extractor.as_deref().unwrap_or(&e.extractor))?;
    let generator = match &a.checkpoint {
        Some(p) => Some(training::load_generator(p)?.0),
        None => None,
    };
    let samples = match &a.samples {
        Some(p) => Some(read_sequences(p)?),
        None => None,
    };
    let fake = match (&generator, &samples) {
        (Some(g), _) => Source::Model(g),
        (None, Some(s)) => Source::Sequences(s),
        (None, None) => return Err(Error::Argument("pass --checkpoint or --samples".into())),
    };
    let real = || -> Result<LatentDataset> {
        let path = a
            .data
            .as_ref()
            .ok_or_else(|| Error::Argument(format!("{:?} needs --data with the real dataset", a.metric)))?;
        LatentDataset::load(path)
    };
    let report = match a.metric {
        Metric::Fid => eval_fid(&real()?, fake, &ex, a.n.unwrap_or(e.fid_frames), seed)?,
        Metric::Fvd => eval_fvd(
            &real()?,
            fake,
            &ex,
            a.n.unwrap_or(e.fvd_videos),
            a.clip.unwrap_or(e.fvd_clip_len),
            seed,
        )?,
        Metric::Acd => match fake {
            Source::Model(g) => eval_acd_model(g, &ex, a.n.unwrap_or(e.acd_samples), a.len.unwrap_or(e.acd_len), seed)?,
            Source::Sequences(s) => MetricReport {
                metric: "acd".into(),
                value: eval_acd(s, &ex)?,
                n: s.len(),
                seed,
                extractor: ex.name(),
                ridge_applied: false,
                clip_len: None,
                sample_len: s.first().map(|q| q.len()),
            },
            Source::Dataset(_) => unreachable!("eval never samples a dataset as the fake side"),
        },
    };
    if let Some(out) = &a.out {
        let text = serde_json::to_string_pretty(&report).expect("serializable report");
        std::fs::write(out, text).map_err(|e| Error::io(out, e))?;
        write_manifest(&sidecar(out), "eval", a, Some(cfg), Some(seed))?;
    }
    print_json(&report);
    Ok(())
}

pub fn decode(a: &DecodeArgs, cfg: &Config) -> Result<()> {
    let adapter = decoder_from_config(&cfg.decoder)?;
    let mut seqs = load_trajectories(&a.input)?;
    if a.index >= seqs.len() {
        return Err(Error::Argument(format!(
            "--index {} but {} holds {} sequences",
            a.index,
            a.input.display(),
            seqs.len()
        )));
    }
    let mut seq = seqs.swap_remove(a.index);
    if let Some(n) = a.frames {
        seq = seq.window(0, n.min(seq.len()));
    }
    let images = decode_sequence(adapter.as_ref(), &seq)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    for (k, img) in images.into_iter().enumerate() {
        let path = a.out.join(format!("frame_{k:05}.png"));
        let buf = image::RgbImage::from_raw(img.width, img.height, img.pixels)
            .ok_or_else(|| Error::Numeric(format!("frame {k}: pixel buffer does not match its size")))?;
        buf.save(&path)
            .map_err(|e| Error::io(&path, std::io::Error::other(e.to_string())))?;
    }
    write_manifest(&a.out.join("command.json"), "decode", a, Some(cfg), None)?;
    print_json(&json!({"out": a.out, "frames": seq.len(), "adapter": adapter.name()}));
    Ok(())
}

pub fn inspect(a: &InspectArgs) -> Result<()> {
    let p = &a.path;
    let summary = if p.join(latentmotion::dataio::MANIFEST_FILE).is_file()
        && p.join(latentmotion::dataio::PAYLOAD_FILE).is_file()
    {
        let ds = LatentDataset::load(p)?;
        json!({
            "kind": "dataset",
            "frames": ds.num_frames(),
            "layers": ds.layers,
            "dim": ds.dim,
            "fps": ds.fps,
            "source_id": ds.source_id,
        })
    } else if p.is_dir() {
        let manifest_path = p.join(training::RUN_MANIFEST_FILE);
        let manifest: Value = match std::fs::read_to_string(&manifest_path) {
            Ok(text) => serde_json::from_str(&text).map_err(|e| Error::format(&manifest_path, e.to_string()))?,
            Err(e) => return Err(Error::io(&manifest_path, e)),
        };
        let records = training::read_report(p)?;
        json!({
            "kind": "run",
            "manifest": manifest,
            "latest_checkpoint": training::latest_checkpoint(p)?.map(|(_, d)| d),
            "records": records.len(),
            "last": records.last(),
        })
    } else {
        let archive = Archive::read(p)?;
        let tensors: Vec<Value> = archive
            .tensors
            .iter()
            .map(|t| json!({"name": t.name, "shape": t.shape, "dtype": t.dtype}))
            .collect();
        json!({"kind": "archive", "meta": archive.meta, "tensors": tensors})
    };
    println!(
        "{}",
        serde_json::to_string_pretty(&summary).expect("serializable summary")
    );
    Ok(())
}
