//! Alternating critic/generator optimization with weight averaging,
//! checkpoints, and exact resume.
//!
//! Run directory layout:
//!
//! ```text
//! {run}/manifest.json
//! {run}/report.jsonl
//! {run}/step_{n}/raw.ckpt     generator, critic, and angle statistics (f32)
//! {run}/step_{n}/ema.ckpt     averaged generator (f32)
//! {run}/step_{n}/state.ckpt   full optimizer state for resuming (f64)
//! ```
//!
//! `n` counts generator updates. Checkpoints are written at epoch ends.

use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::archive::{Archive, Dtype};
use crate::autodiff::{grad, no_grad, Var};
use crate::dataio::{LatentDataset, WindowSampler};
use crate::error::{Error, Result};
use crate::latent_model::{pack_time_major, Critic, Generator, LatentSequence, ModelConfig, NoiseBatch};
use crate::losses::{
    angle_penalty_on_rollout, critic_wgan_term, generator_wgan_term, gradient_penalty_with, noise_leaves, LossWeights,
    RunningStats,
};
use crate::nn::{apply_buffer_updates, TensorStore};
use crate::optim::{ema_update, Adam};
use crate::rng;
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
pub const REPORT_FILE: &str = "report.jsonl";
pub const RUN_MANIFEST_FILE: &str = "manifest.json";
const RECALIBRATE_BATCHES: usize = 16;
const RECALIBRATE_BATCH: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub critic_steps_per_gen_step: usize,
    pub learning_rate_gen: f64,
    pub learning_rate_critic: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub ema_momentum: f64,
    pub seed: u64,
    pub checkpoint_every_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 350,
            batch_size: 16,
            critic_steps_per_gen_step: 5,
            learning_rate_gen: 1e-4,
            learning_rate_critic: 1e-4,
            adam_beta1: 0.0,
            adam_beta2: 0.9,
            ema_momentum: 0.995,
            seed: 0,
            checkpoint_every_epochs: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("train.epochs", self.epochs),
            ("train.batch_size", self.batch_size),
            ("train.critic_steps_per_gen_step", self.critic_steps_per_gen_step),
            ("train.checkpoint_every_epochs", self.checkpoint_every_epochs),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        for (field, v) in [
            ("train.learning_rate_gen", self.learning_rate_gen),
            ("train.learning_rate_critic", self.learning_rate_critic),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(field, format!("must be positive, got {v}")));
            }
        }
        for (field, v) in [
            ("train.adam_beta1", self.adam_beta1),
            ("train.adam_beta2", self.adam_beta2),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(field, format!("must lie in [0, 1), got {v}")));
            }
        }
        if !(self.ema_momentum > 0.0 && self.ema_momentum < 1.0) {
            return Err(Error::config("train.ema_momentum", "must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// One line of `report.jsonl`, written after every generator update.
///
/// Critic figures are means over the critic updates since the previous
/// generator update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u64,
    pub critic_steps: u64,
    pub critic_loss: f64,
    pub generator_loss: f64,
    pub gp: f64,
    pub gap: f64,
    pub phi: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub records: Vec<StepRecord>,
    pub wall_clock_secs: f64,
    pub checkpoints: Vec<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossWeights,
}

/// Snapshot written to `{run}/manifest.json`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config: RunConfig,
    pub dataset: Option<String>,
    pub seed: u64,
    pub created_unix: u64,
    pub updated_unix: u64,
    pub epochs_completed: u64,
    pub generator_steps: u64,
    pub checkpoints: Vec<String>,
}

fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

#[derive(Clone, Debug, Default, PartialEq)]
struct CriticAccumulator {
    loss: f64,
    gp: f64,
    grad_norm: f64,
    count: u64,
}

impl CriticAccumulator {
    fn mean(&self, v: f64) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            v / self.count as f64
        }
    }
}

/// Complete training state; stepping it is deterministic given the dataset.
pub struct Trainer<'d> {
    dataset: &'d LatentDataset,
    sampler: WindowSampler,
    pub model_cfg: ModelConfig,
    pub train_cfg: TrainConfig,
    pub loss: LossWeights,
    pub generator: Generator,
    pub critic: Critic,
    pub ema: TensorStore,
    gen_opt: Adam,
    critic_opt: Adam,
    pub gap_stats: RunningStats,
    pub critic_steps: u64,
    pub gen_steps: u64,
    pub epochs_done: u64,
    acc: CriticAccumulator,
    pub records: Vec<StepRecord>,
}

impl<'d> Trainer<'d> {
    pub fn new(
        dataset: &'d LatentDataset,
        model_cfg: &ModelConfig,
        train_cfg: &TrainConfig,
        loss: &LossWeights,
    ) -> Result<Self> {
        model_cfg.validate()?;
        train_cfg.validate()?;
        loss.validate()?;
        if (dataset.layers, dataset.dim) != (model_cfg.layers, model_cfg.dim) {
            return Err(Error::shape(
                format!("{}x{} codes (model)", model_cfg.layers, model_cfg.dim),
                format!("{}x{} codes (dataset)", dataset.layers, dataset.dim),
            ));
        }
        let sampler = WindowSampler::new(dataset, model_cfg.train_window_t, train_cfg.seed)?;
        let generator = Generator::new(model_cfg, train_cfg.seed)?;
        let critic = Critic::new(model_cfg, train_cfg.seed)?;
        let gen_opt = Adam::new(
            &generator.params,
            train_cfg.learning_rate_gen,
            train_cfg.adam_beta1,
            train_cfg.adam_beta2,
        );
        let critic_opt = Adam::new(
            &critic.params,
            train_cfg.learning_rate_critic,
            train_cfg.adam_beta1,
            train_cfg.adam_beta2,
        );
        Ok(Trainer {
            dataset,
            sampler,
            model_cfg: model_cfg.clone(),
            train_cfg: train_cfg.clone(),
            loss: loss.clone(),
            ema: generator.params.clone(),
            gap_stats: RunningStats::new(model_cfg.hidden_dim),
            generator,
            critic,
            gen_opt,
            critic_opt,
            critic_steps: 0,
            gen_steps: 0,
            epochs_done: 0,
            acc: CriticAccumulator::default(),
            records: Vec::new(),
        })
    }

    /// Generator carrying the averaged weights, with running statistics
    /// re-estimated for those weights.
    pub fn ema_generator(&self) -> Generator {
        let mut g = self.generator.clone();
        g.params = self.ema.clone();
        if self.gen_steps > 0 {
            let seed = rng::derive_seed(self.train_cfg.seed, rng::RECALIBRATE, self.gen_steps);
            g.recalibrate_batch_norm(
                RECALIBRATE_BATCHES,
                RECALIBRATE_BATCH,
                self.model_cfg.train_window_t,
                seed,
            );
        }
        g
    }

    pub fn windows_per_epoch(&self) -> usize {
        self.sampler.windows_per_epoch()
    }

    fn real_batch(&self, starts: &[usize]) -> Tensor {
        let t = self.model_cfg.train_window_t;
        let windows: Vec<Vec<f64>> = starts
            .iter()
            .map(|&s| self.dataset.window_values(s, t).iter().map(|&v| v as f64).collect())
            .collect();
        let refs: Vec<&[f64]> = windows.iter().map(|w| w.as_slice()).collect();
        pack_time_major(&refs, t, self.model_cfg.code_len())
    }

    /// One critic update on the given window starts.
    pub fn critic_step(&mut self, starts: &[usize]) -> Result<()> {
        let b = starts.len();
        let t = self.model_cfg.train_window_t;
        let mut r = rng::stream(self.train_cfg.seed, rng::CRITIC_STEP, self.critic_steps);
        let noise = NoiseBatch::sample(&mut r, b, self.model_cfg.noise_dim, t);
        let u: Vec<f64> = (0..b).map(|_| r.random::<f64>()).collect();

        let (fake, updates) = no_grad(|| {
            let ctx = self.generator.ctx(false, true);
            let steps: Vec<Var> = noise.steps.iter().cloned().map(Var::constant).collect();
            let out = self
                .generator
                .rollout_vars(&ctx, &Var::constant(noise.identity.clone()), &steps);
            (out.codes.value().clone(), ctx.take_updates())
        });
        apply_buffer_updates(&mut self.generator.buffers, updates);
        let real = self.real_batch(starts);

        let ctx = self.critic.ctx(true);
        let real_scores = self.critic.score_vars(&ctx, &Var::constant(real.clone()), b);
        let fake_scores = self.critic.score_vars(&ctx, &Var::constant(fake.clone()), b);
        let wgan = critic_wgan_term(&real_scores, &fake_scores);
        let gp = gradient_penalty_with(|x| self.critic.score_vars(&ctx, x, b), &real, &fake, b, &u)?;
        let total = wgan.add(&gp.value.scale(self.loss.lambda_gp));
        let loss = total.item();
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "critic loss is not finite at critic step {}",
                self.critic_steps
            )));
        }
        let params: Vec<&Var> = ctx.params().iter().collect();
        let grads: Vec<Tensor> = grad(&total, &params, false).iter().map(|g| g.value().clone()).collect();
        drop(ctx);
        self.critic_opt.update(&mut self.critic.params, &grads);

        self.acc.loss += loss;
        self.acc.gp += gp.value.item();
        self.acc.grad_norm += gp.grad_norms.iter().sum::<f64>() / b as f64;
        self.acc.count += 1;
        self.critic_steps += 1;
        Ok(())
    }

    /// One generator update, followed by the weight-average update.
    pub fn generator_step(&mut self) -> Result<StepRecord> {
        let b = self.train_cfg.batch_size;
        let t = self.model_cfg.train_window_t;
        let mut r = rng::stream(self.train_cfg.seed, rng::GENERATOR_STEP, self.gen_steps);
        let noise = NoiseBatch::sample(&mut r, b, self.model_cfg.noise_dim, t);

        let ctx = self.generator.ctx(true, true);
        let (identity, steps) = noise_leaves(&noise);
        let rollout = self.generator.rollout_vars(&ctx, &identity, &steps);
        let critic_ctx = self.critic.ctx(false);
        let fake_scores = self.critic.score_vars(&critic_ctx, &rollout.codes, b);
        let wgan = generator_wgan_term(&fake_scores);
        let gap = angle_penalty_on_rollout(&rollout, &identity, &steps, &mut self.gap_stats, true)?;
        let total = if self.loss.lambda_gap > 0.0 {
            wgan.add(&gap.loss.scale(self.loss.lambda_gap))
        } else {
            wgan.clone()
        };
        let loss = total.item();
        let record = StepRecord {
            step: self.gen_steps + 1,
            epoch: self.epochs_done,
            critic_steps: self.critic_steps,
            critic_loss: self.acc.mean(self.acc.loss),
            generator_loss: loss,
            gp: self.acc.mean(self.acc.gp),
            gap: gap.loss.item(),
            phi: gap.mean_phi(),
            grad_norm: self.acc.mean(self.acc.grad_norm),
        };
        if !loss.is_finite() {
            self.records.push(record);
            return Err(Error::Numeric(format!(
                "generator loss is not finite at generator step {}",
                self.gen_steps + 1
            )));
        }
        let params: Vec<&Var> = ctx.params().iter().collect();
        let grads: Vec<Tensor> = grad(&total, &params, false).iter().map(|g| g.value().clone()).collect();
        let updates = ctx.take_updates();
        drop(ctx);
        apply_buffer_updates(&mut self.generator.buffers, updates);
        self.gen_opt.update(&mut self.generator.params, &grads);
        ema_update(&mut self.ema, &self.generator.params, self.train_cfg.ema_momentum);

        self.gen_steps += 1;
        self.acc = CriticAccumulator::default();
        self.records.push(record.clone());
        Ok(record)
    }

    /// Run one full pass over all window starts.
    pub fn run_epoch(&mut self) -> Result<()> {
        let order = self.sampler.epoch(self.epochs_done);
        let w = order.len();
        let b = self.train_cfg.batch_size;
        for j in 0..w.div_ceil(b) {
            // The last batch wraps around to stay full.
            let starts: Vec<usize> = (0..b).map(|i| order[(j * b + i) % w]).collect();
            self.critic_step(&starts)?;
            if self
                .critic_steps
                .is_multiple_of(self.train_cfg.critic_steps_per_gen_step as u64)
            {
                self.generator_step()?;
            }
        }
        self.epochs_done += 1;
        Ok(())
    }

    fn generator_archive(&self, generator: &Generator, ema: bool) -> Archive {
        let mut meta = Map::new();
        meta.insert("format_version".into(), json!(CHECKPOINT_FORMAT_VERSION));
        meta.insert(
            "model_config".into(),
            serde_json::to_value(&self.model_cfg).expect("serializable"),
        );
        meta.insert("training_step".into(), json!(self.gen_steps));
        meta.insert("ema".into(), json!(ema));
        let mut a = Archive::new(meta);
        push_store(&mut a, "generator/", &generator.params, Dtype::F32);
        push_store(&mut a, "generator/", &generator.buffers, Dtype::F32);
        a
    }

    /// Write `raw.ckpt`, `ema.ckpt`, and `state.ckpt` into `dir`.
    pub fn write_checkpoint(&self, dir: &Path) -> Result<()> {
        let mut raw = self.generator_archive(&self.generator, false);
        push_store(&mut raw, "critic/", &self.critic.params, Dtype::F32);
        raw.push(
            "gap/mean",
            vec![self.gap_stats.features()],
            Dtype::F32,
            self.gap_stats.mean.clone(),
        );
        raw.push(
            "gap/variance",
            vec![self.gap_stats.features()],
            Dtype::F32,
            self.gap_stats.variance.clone(),
        );
        raw.write(&dir.join("raw.ckpt"))?;
        self.generator_archive(&self.ema_generator(), true)
            .write(&dir.join("ema.ckpt"))?;
        self.state_archive().write(&dir.join("state.ckpt"))
    }

    fn state_archive(&self) -> Archive {
        let mut meta = Map::new();
        meta.insert("format_version".into(), json!(CHECKPOINT_FORMAT_VERSION));
        meta.insert(
            "config".into(),
            serde_json::to_value(RunConfig {
                model: self.model_cfg.clone(),
                train: self.train_cfg.clone(),
                loss: self.loss.clone(),
            })
            .expect("serializable"),
        );
        meta.insert("critic_steps".into(), json!(self.critic_steps));
        meta.insert("gen_steps".into(), json!(self.gen_steps));
        meta.insert("epochs_done".into(), json!(self.epochs_done));
        meta.insert("gen_adam_step".into(), json!(self.gen_opt.step));
        meta.insert("critic_adam_step".into(), json!(self.critic_opt.step));
        meta.insert("gap_count".into(), json!(self.gap_stats.count));
        // f64 bit patterns keep the accumulators exact through JSON.
        meta.insert(
            "critic_accumulator".into(),
            json!([
                self.acc.loss.to_bits(),
                self.acc.gp.to_bits(),
                self.acc.grad_norm.to_bits(),
                self.acc.count
            ]),
        );
        let mut a = Archive::new(meta);
        push_store(&mut a, "generator/", &self.generator.params, Dtype::F64);
        push_store(&mut a, "generator/", &self.generator.buffers, Dtype::F64);
        push_store(&mut a, "critic/", &self.critic.params, Dtype::F64);
        push_store(&mut a, "ema/", &self.ema, Dtype::F64);
        for (name, opt) in [("adam_gen", &self.gen_opt), ("adam_critic", &self.critic_opt)] {
            for (i, (m, v)) in opt.m.iter().zip(&opt.v).enumerate() {
                a.push(
                    format!("{name}/m/{i}"),
                    vec![m.rows(), m.cols()],
                    Dtype::F64,
                    m.data().to_vec(),
                );
                a.push(
                    format!("{name}/v/{i}"),
                    vec![v.rows(), v.cols()],
                    Dtype::F64,
                    v.data().to_vec(),
                );
            }
        }
        a.push(
            "gap/mean",
            vec![self.gap_stats.features()],
            Dtype::F64,
            self.gap_stats.mean.clone(),
        );
        a.push(
            "gap/variance",
            vec![self.gap_stats.features()],
            Dtype::F64,
            self.gap_stats.variance.clone(),
        );
        a
    }

    /// Rebuild a trainer from a `state.ckpt`. Records are not restored.
    pub fn from_state(dataset: &'d LatentDataset, path: &Path) -> Result<Self> {
        let a = Archive::read(path)?;
        let cfg: RunConfig = a.meta_field("config", path)?;
        let mut tr = Trainer::new(dataset, &cfg.model, &cfg.train, &cfg.loss)?;
        fill_store(&a, "generator/", &mut tr.generator.params, path)?;
        fill_store(&a, "generator/", &mut tr.generator.buffers, path)?;
        fill_store(&a, "critic/", &mut tr.critic.params, path)?;
        fill_store(&a, "ema/", &mut tr.ema, path)?;
        for (name, opt) in [("adam_gen", &mut tr.gen_opt), ("adam_critic", &mut tr.critic_opt)] {
            for i in 0..opt.m.len() {
                for (kind, slot) in [("m", &mut opt.m[i]), ("v", &mut opt.v[i])] {
                    let t = a.require(&format!("{name}/{kind}/{i}"), path)?;
                    if t.data.len() != slot.len() {
                        return Err(Error::format(path, format!("{name}/{kind}/{i} has the wrong size")));
                    }
                    *slot = Tensor::from_vec(slot.rows(), slot.cols(), t.data.clone());
                }
            }
        }
        tr.gen_opt.step = a.meta_field("gen_adam_step", path)?;
        tr.critic_opt.step = a.meta_field("critic_adam_step", path)?;
        tr.critic_steps = a.meta_field("critic_steps", path)?;
        tr.gen_steps = a.meta_field("gen_steps", path)?;
        tr.epochs_done = a.meta_field("epochs_done", path)?;
        tr.gap_stats.count = a.meta_field("gap_count", path)?;
        tr.gap_stats.mean = a.require("gap/mean", path)?.data.clone();
        tr.gap_stats.variance = a.require("gap/variance", path)?.data.clone();
        let acc: (u64, u64, u64, u64) = a.meta_field("critic_accumulator", path)?;
        tr.acc = CriticAccumulator {
            loss: f64::from_bits(acc.0),
            gp: f64::from_bits(acc.1),
            grad_norm: f64::from_bits(acc.2),
            count: acc.3,
        };
        Ok(tr)
    }
}

fn push_store(a: &mut Archive, prefix: &str, store: &TensorStore, dtype: Dtype) {
    for (name, t) in store.iter() {
        a.push(
            format!("{prefix}{name}"),
            vec![t.rows(), t.cols()],
            dtype,
            t.data().to_vec(),
        );
    }
}

fn fill_store(a: &Archive, prefix: &str, store: &mut TensorStore, path: &Path) -> Result<()> {
    let names = store.names().to_vec();
    for (name, slot) in names.iter().zip(store.values_mut()) {
        let t = a.require(&format!("{prefix}{name}"), path)?;
        if t.shape != [slot.rows(), slot.cols()] {
            return Err(Error::format(
                path,
                format!(
                    "tensor {prefix}{name}: expected shape {:?}, found {:?}",
                    slot.shape(),
                    t.shape
                ),
            ));
        }
        *slot = Tensor::from_vec(slot.rows(), slot.cols(), t.data.clone());
    }
    Ok(())
}

/// Header fields of a generator checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointInfo {
    pub format_version: u32,
    pub model_config: ModelConfig,
    pub training_step: u64,
    pub ema: bool,
}

/// Load the generator stored in a `raw.ckpt` or `ema.ckpt`.
pub fn load_generator(path: &Path) -> Result<(Generator, CheckpointInfo)> {
    let a = Archive::read(path)?;
    let info = CheckpointInfo {
        format_version: a.meta_field("format_version", path)?,
        model_config: a.meta_field("model_config", path)?,
        training_step: a.meta_field("training_step", path)?,
        ema: a.meta_field("ema", path)?,
    };
    if info.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::format(
            path,
            format!("unknown format_version {}", info.format_version),
        ));
    }
    info.model_config
        .validate()
        .map_err(|e| Error::format(path, format!("stored model config: {e}")))?;
    let mut g = Generator::new(&info.model_config, 0)?;
    fill_store(&a, "generator/", &mut g.params, path)?;
    fill_store(&a, "generator/", &mut g.buffers, path)?;
    Ok((g, info))
}

/// Load the critic stored in a `raw.ckpt`.
pub fn load_critic(path: &Path) -> Result<Critic> {
    let a = Archive::read(path)?;
    let cfg: ModelConfig = a.meta_field("model_config", path)?;
    let mut c = Critic::new(&cfg, 0)?;
    fill_store(&a, "critic/", &mut c.params, path)?;
    Ok(c)
}

/// `count` sequences of length `t` from a generator checkpoint.
pub fn sample(checkpoint: &Path, t: usize, count: usize, seed: u64) -> Result<Vec<LatentSequence>> {
    let (g, _) = load_generator(checkpoint)?;
    g.generate(count, t, seed)
}

fn step_dir(run: &Path, step: u64) -> PathBuf {
    run.join(format!("step_{step}"))
}

/// Latest checkpoint directory containing a resumable state, by step number.
pub fn latest_checkpoint(run: &Path) -> Result<Option<(u64, PathBuf)>> {
    let entries = match std::fs::read_dir(run) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(Error::io(run, e)),
    };
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(run, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let Some(step) = name.strip_prefix("step_").and_then(|s| s.parse::<u64>().ok()) else {
            continue;
        };
        if entry.path().join("state.ckpt").is_file() && best.as_ref().is_none_or(|(b, _)| step > *b) {
            best = Some((step, entry.path()));
        }
    }
    Ok(best)
}

pub fn read_report(run: &Path) -> Result<Vec<StepRecord>> {
    let path = run.join(REPORT_FILE);
    let text = match std::fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(&path, e)),
    };
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::format(&path, e.to_string())))
        .collect()
}

fn write_report(run: &Path, records: &[StepRecord], append: bool) -> Result<()> {
    let path = run.join(REPORT_FILE);
    let mut f = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(&path)
        .map_err(|e| Error::io(&path, e))?;
    let mut buf = String::new();
    for r in records {
        buf.push_str(&serde_json::to_string(r).expect("serializable record"));
        buf.push('\n');
    }
    f.write_all(buf.as_bytes()).map_err(|e| Error::io(&path, e))
}

/// Options for a training run on disk.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub run_dir: Option<PathBuf>,
    pub resume: bool,
    pub dataset_label: Option<String>,
}

/// Outcome of `train` when resuming finds nothing left to do.
pub const ALREADY_FINISHED: &str = "run already finished";

fn write_manifest(run: &Path, tr: &Trainer, opts: &RunOptions, checkpoints: &[PathBuf]) -> Result<()> {
    let path = run.join(RUN_MANIFEST_FILE);
    let created = std::fs::read_to_string(&path)
        .ok()
        .and_then(|t| serde_json::from_str::<Value>(&t).ok())
        .and_then(|v| v.get("created_unix").and_then(Value::as_u64))
        .unwrap_or_else(unix_now);
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config: RunConfig {
            model: tr.model_cfg.clone(),
            train: tr.train_cfg.clone(),
            loss: tr.loss.clone(),
        },
        dataset: opts.dataset_label.clone(),
        seed: tr.train_cfg.seed,
        created_unix: created,
        updated_unix: unix_now(),
        epochs_completed: tr.epochs_done,
        generator_steps: tr.gen_steps,
        checkpoints: checkpoints
            .iter()
            .map(|p| p.strip_prefix(run).unwrap_or(p).display().to_string())
            .collect(),
    };
    let text = serde_json::to_string_pretty(&manifest).expect("serializable manifest");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Train from scratch, or continue from the latest checkpoint when
/// `opts.resume` is set. Returns the records produced by this call.
pub fn train(
    dataset: &LatentDataset,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    loss: &LossWeights,
    opts: &RunOptions,
) -> Result<TrainReport> {
    let started = Instant::now();
    let mut checkpoints = Vec::new();
    let mut tr = match (&opts.run_dir, opts.resume) {
        (Some(run), true) => match latest_checkpoint(run)? {
            Some((step, dir)) => {
                let tr = Trainer::from_state(dataset, &dir.join("state.ckpt"))?;
                // Drop report lines written after the checkpoint.
                let kept: Vec<StepRecord> = read_report(run)?.into_iter().filter(|r| r.step <= step).collect();
                write_report(run, &kept, false)?;
                checkpoints.push(dir);
                tr
            }
            None => Trainer::new(dataset, model_cfg, train_cfg, loss)?,
        },
        _ => Trainer::new(dataset, model_cfg, train_cfg, loss)?,
    };
    if let Some(run) = &opts.run_dir {
        std::fs::create_dir_all(run).map_err(|e| Error::io(run, e))?;
        if !opts.resume {
            write_report(run, &[], false)?;
        }
    }
    let total = tr.train_cfg.epochs as u64;
    if opts.resume && tr.epochs_done >= total {
        return Err(Error::Argument(format!(
            "{ALREADY_FINISHED} ({} of {total} epochs)",
            tr.epochs_done
        )));
    }
    let every = tr.train_cfg.checkpoint_every_epochs as u64;
    let mut flushed = 0;
    while tr.epochs_done < total {
        let result = tr.run_epoch();
        if let Some(run) = &opts.run_dir {
            if let Err(e) = result {
                write_report(run, &tr.records[flushed..], true)?;
                return Err(e);
            }
            if tr.epochs_done % every == 0 || tr.epochs_done == total {
                write_report(run, &tr.records[flushed..], true)?;
                flushed = tr.records.len();
                let dir = step_dir(run, tr.gen_steps);
                tr.write_checkpoint(&dir)?;
                checkpoints.push(dir);
                write_manifest(run, &tr, opts, &checkpoints)?;
            }
        } else {
            result?;
        }
    }
    Ok(TrainReport {
        records: std::mem::take(&mut tr.records),
        wall_clock_secs: started.elapsed().as_secs_f64(),
        checkpoints,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{generate_synthetic, SyntheticSpec};

    fn toy() -> (LatentDataset, ModelConfig, TrainConfig) {
        let ds = generate_synthetic(&SyntheticSpec {
            num_frames: 60,
            layers: 2,
            dim: 8,
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
            epochs: 2,
            batch_size: 8,
            seed: 3,
            ..TrainConfig::default()
        };
        (ds, model, train)
    }

    #[test]
    fn toy_run_has_finite_losses_and_is_deterministic() {
        let (ds, model, train_cfg) = toy();
        let a = train(&ds, &model, &train_cfg, &LossWeights::default(), &RunOptions::default()).unwrap();
        assert!(!a.records.is_empty());
        for r in &a.records {
            assert!(r.critic_loss.is_finite() && r.generator_loss.is_finite() && r.phi.is_finite());
        }
        assert!(a.records.windows(2).all(|w| w[0].step < w[1].step));
        let b = train(&ds, &model, &train_cfg, &LossWeights::default(), &RunOptions::default()).unwrap();
        assert_eq!(a.records, b.records);
    }

    #[test]
    fn dataset_shorter_than_window_is_rejected() {
        let (ds, model, train_cfg) = toy();
        let model = ModelConfig {
            train_window_t: 61,
            ..model
        };
        assert!(matches!(
            Trainer::new(&ds, &model, &train_cfg, &LossWeights::default()),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn steps_touch_only_their_network() {
        let (ds, model, train_cfg) = toy();
        let mut tr = Trainer::new(&ds, &model, &train_cfg, &LossWeights::default()).unwrap();
        let gen_before = tr.generator.params.clone();
        let critic_before = tr.critic.params.clone();
        tr.critic_step(&[0, 1, 2, 3, 4, 5, 6, 7]).unwrap();
        assert_eq!(tr.generator.params.values(), gen_before.values());
        assert_ne!(tr.critic.params.values(), critic_before.values());
        let critic_after = tr.critic.params.clone();
        tr.generator_step().unwrap();
        assert_eq!(tr.critic.params.values(), critic_after.values());
        assert_ne!(tr.generator.params.values(), gen_before.values());
    }
}
