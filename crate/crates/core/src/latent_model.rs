//! The recurrent generator (hallucinator, GRU stack, latent mapper) and the
//! temporal critic, plus the latent-code value types they exchange.
//!
//! Batched tensors use a time-major row layout: row `k * batch + b` holds time
//! step `k` of sample `b`. Both networks and the training loop agree on it.

use serde::{Deserialize, Serialize};

use crate::autodiff::{no_grad, Var};
use crate::error::{Error, Result};
use crate::nn::{
    pixel_norm, Affine, BatchNorm, BufferId, Builder, Conv1d, Ctx, GruCell, Linear, Mlp, ParamId, TensorStore,
};
use crate::parallel;
use crate::rng;
use crate::tensor::Tensor;

/// Samples per chunk when generating sequences in inference mode.
const GENERATE_CHUNK: usize = 64;
/// Frame rate attached to generated sequences.
pub const DEFAULT_FPS: f64 = 25.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub dim: usize,
    pub noise_dim: usize,
    pub hidden_dim: usize,
    pub num_gru_cells: usize,
    pub train_window_t: usize,
    pub leaky_slope: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 18,
            dim: 512,
            noise_dim: 32,
            hidden_dim: 32,
            num_gru_cells: 4,
            train_window_t: 25,
            leaky_slope: 0.2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, value) in [
            ("model.layers", self.layers),
            ("model.dim", self.dim),
            ("model.noise_dim", self.noise_dim),
            ("model.hidden_dim", self.hidden_dim),
        ] {
            if value == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.num_gru_cells < 2 {
            return Err(Error::config("model.num_gru_cells", "must be at least 2"));
        }
        if self.noise_dim != self.hidden_dim {
            return Err(Error::config(
                "model.noise_dim",
                format!(
                    "must equal hidden_dim ({}) because the top GRU cell is initialized with the identity noise, got {}",
                    self.hidden_dim, self.noise_dim
                ),
            ));
        }
        if self.train_window_t < 2 {
            return Err(Error::config("model.train_window_t", "must be at least 2"));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::config("model.leaky_slope", "must lie in (0, 1)"));
        }
        Ok(())
    }

    /// Flattened length of one latent code.
    pub fn code_len(&self) -> usize {
        self.layers * self.dim
    }
}

/// One latent code: a `layers x dim` matrix stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode {
    pub layers: usize,
    pub dim: usize,
    pub values: Vec<f64>,
}

impl LatentCode {
    pub fn new(layers: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != layers * dim {
            return Err(Error::shape(
                format!("{layers}x{dim} code ({} values)", layers * dim),
                format!("{} values", values.len()),
            ));
        }
        crate::error::ensure_finite(&values, "latent code")?;
        Ok(LatentCode { layers, dim, values })
    }

    pub fn zeros(layers: usize, dim: usize) -> Self {
        LatentCode {
            layers,
            dim,
            values: vec![0.0; layers * dim],
        }
    }

    pub fn get(&self, layer: usize, d: usize) -> f64 {
        self.values[layer * self.dim + d]
    }
}

/// Ordered latent codes with frame-rate metadata, stored as one flat buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSequence {
    pub layers: usize,
    pub dim: usize,
    pub fps: f64,
    data: Vec<f64>,
}

impl LatentSequence {
    pub fn new(layers: usize, dim: usize, fps: f64, data: Vec<f64>) -> Result<Self> {
        let code_len = layers * dim;
        if code_len == 0 || !data.len().is_multiple_of(code_len) {
            return Err(Error::shape(
                format!("a multiple of {layers}x{dim}"),
                format!("{} values", data.len()),
            ));
        }
        Ok(LatentSequence { layers, dim, fps, data })
    }

    pub fn from_codes(codes: &[LatentCode], fps: f64) -> Result<Self> {
        let first = codes.first().ok_or_else(|| Error::Argument("empty code list".into()))?;
        let mut data = Vec::with_capacity(codes.len() * first.values.len());
        for c in codes {
            if (c.layers, c.dim) != (first.layers, first.dim) {
                return Err(Error::shape(
                    format!("{}x{}", first.layers, first.dim),
                    format!("{}x{}", c.layers, c.dim),
                ));
            }
            data.extend_from_slice(&c.values);
        }
        LatentSequence::new(first.layers, first.dim, fps, data)
    }

    pub fn code_len(&self) -> usize {
        self.layers * self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.code_len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn frame(&self, k: usize) -> &[f64] {
        let n = self.code_len();
        &self.data[k * n..(k + 1) * n]
    }

    pub fn frame_mut(&mut self, k: usize) -> &mut [f64] {
        let n = self.code_len();
        &mut self.data[k * n..(k + 1) * n]
    }

    pub fn frames(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.code_len())
    }

    pub fn code(&self, k: usize) -> LatentCode {
        LatentCode {
            layers: self.layers,
            dim: self.dim,
            values: self.frame(k).to_vec(),
        }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn window(&self, start: usize, len: usize) -> LatentSequence {
        let n = self.code_len();
        LatentSequence {
            layers: self.layers,
            dim: self.dim,
            fps: self.fps,
            data: self.data[start * n..(start + len) * n].to_vec(),
        }
    }
}

/// Per-step output of the GRU stack, before mapping to a latent code.
#[derive(Clone, Debug, PartialEq)]
pub struct IntermediateCode {
    pub values: Vec<f64>,
}

/// Hidden vectors of the stacked GRU cells, bottom cell first.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorState {
    pub hidden: Vec<Vec<f64>>,
}

/// Identity noise plus one noise column per recurrent step.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseInputs {
    pub identity_noise: Vec<f64>,
    /// `t - 1` columns, each of length `noise_dim`.
    pub step_noise: Vec<Vec<f64>>,
}

impl NoiseInputs {
    pub fn sample<R: rand::Rng>(rng: &mut R, noise_dim: usize, t: usize) -> Self {
        NoiseInputs {
            identity_noise: rng::normal_vec(rng, noise_dim),
            step_noise: (1..t).map(|_| rng::normal_vec(rng, noise_dim)).collect(),
        }
    }
}

/// A batch of noise inputs: identity noise as batch x noise_dim, step noise as
/// `t - 1` matrices of the same shape.
#[derive(Clone, Debug)]
pub struct NoiseBatch {
    pub identity: Tensor,
    pub steps: Vec<Tensor>,
}

impl NoiseBatch {
    pub fn sample<R: rand::Rng>(rng: &mut R, batch: usize, noise_dim: usize, t: usize) -> Self {
        let samples: Vec<NoiseInputs> = (0..batch).map(|_| NoiseInputs::sample(rng, noise_dim, t)).collect();
        Self::from_inputs(&samples).expect("uniformly shaped samples")
    }

    pub fn from_inputs(inputs: &[NoiseInputs]) -> Result<Self> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Argument("empty noise batch".into()))?;
        let n = first.identity_noise.len();
        let steps = first.step_noise.len();
        if inputs.iter().any(|x| {
            x.identity_noise.len() != n || x.step_noise.len() != steps || x.step_noise.iter().any(|c| c.len() != n)
        }) {
            return Err(Error::Argument("noise inputs differ in shape".into()));
        }
        let identity = Tensor::from_vec(
            inputs.len(),
            n,
            inputs.iter().flat_map(|x| x.identity_noise.iter().copied()).collect(),
        );
        let steps = (0..steps)
            .map(|k| {
                Tensor::from_vec(
                    inputs.len(),
                    n,
                    inputs.iter().flat_map(|x| x.step_noise[k].iter().copied()).collect(),
                )
            })
            .collect();
        Ok(NoiseBatch { identity, steps })
    }

    pub fn batch(&self) -> usize {
        self.identity.rows()
    }

    /// Rollout length implied by the number of step-noise columns.
    pub fn len(&self) -> usize {
        self.steps.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Graph outputs of a batched rollout.
pub struct Rollout {
    /// `t` tensors of shape batch x hidden_dim.
    pub intermediates: Vec<Var>,
    /// (t * batch) x (layers * dim), time-major.
    pub codes: Var,
    pub batch: usize,
}

impl Rollout {
    pub fn len(&self) -> usize {
        self.intermediates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.intermediates.is_empty()
    }
}

/// Split time-major rows into per-sample sequences.
pub fn unpack_time_major(codes: &Tensor, batch: usize, layers: usize, dim: usize, fps: f64) -> Vec<LatentSequence> {
    let t = codes.rows() / batch;
    (0..batch)
        .map(|b| {
            let mut data = Vec::with_capacity(t * codes.cols());
            for k in 0..t {
                data.extend_from_slice(codes.row_slice(k * batch + b));
            }
            LatentSequence::new(layers, dim, fps, data).expect("consistent shape")
        })
        .collect()
}

/// Stack equal-length windows into a time-major (t * batch) x code_len tensor.
pub fn pack_time_major(windows: &[&[f64]], t: usize, code_len: usize) -> Tensor {
    let batch = windows.len();
    let mut data = vec![0.0; t * batch * code_len];
    for (b, w) in windows.iter().enumerate() {
        debug_assert_eq!(w.len(), t * code_len);
        for k in 0..t {
            let dst = (k * batch + b) * code_len;
            data[dst..dst + code_len].copy_from_slice(&w[k * code_len..(k + 1) * code_len]);
        }
    }
    Tensor::from_vec(t * batch, code_len, data)
}

fn replace_values(store: &mut TensorStore, loaded: &TensorStore, what: &str) -> Result<()> {
    if store.len() != loaded.len() {
        return Err(Error::Argument(format!(
            "{what}: expected {} tensors, got {}",
            store.len(),
            loaded.len()
        )));
    }
    let names = store.names().to_vec();
    for (slot, name) in store.values_mut().iter_mut().zip(&names) {
        let value = loaded
            .get(name)
            .ok_or_else(|| Error::Argument(format!("{what}: missing tensor {name}")))?;
        if value.shape() != slot.shape() {
            return Err(Error::shape(
                format!("{name} {:?}", slot.shape()),
                format!("{:?}", value.shape()),
            ));
        }
        *slot = value.clone();
    }
    Ok(())
}

/// Hallucinator H, stacked GRU cells P, and latent mapper T.
#[derive(Clone, Debug)]
pub struct Generator {
    cfg: ModelConfig,
    pub params: TensorStore,
    pub buffers: TensorStore,
    hallucinator: Mlp,
    hallucinator_bn: BatchNorm,
    cells: Vec<GruCell>,
    input_bn: BatchNorm,
    input_affine: Affine,
    trunk: Mlp,
    trunk_bn: BatchNorm,
    trunk_affine: Affine,
    /// All `layers` independent heads packed column-wise: block j feeds row j of the code.
    heads: Linear,
    heads_bn: BatchNorm,
}

impl Generator {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng::stream(seed, rng::GENERATOR_INIT, 0);
        let mut b = Builder::new(&mut rng);
        let h = cfg.hidden_dim;
        let memory = (cfg.num_gru_cells - 1) * h;
        let slope = cfg.leaky_slope;

        let (hallucinator, hallucinator_bn) = b.scoped("hallucinator", |b| {
            let mlp = Mlp::new(b, "mlp", &[cfg.noise_dim, memory, memory, memory, memory], slope);
            let bn = BatchNorm::new(b, "bn", memory, true);
            (mlp, bn)
        });
        let cells = b.scoped("gru", |b| {
            (0..cfg.num_gru_cells)
                .map(|j| {
                    let input = if j == 0 { cfg.noise_dim } else { h };
                    GruCell::new(b, &j.to_string(), input, h)
                })
                .collect()
        });
        let (input_bn, input_affine, trunk, trunk_bn, trunk_affine, heads, heads_bn) = b.scoped("mapper", |b| {
            let input_bn = BatchNorm::new(b, "input_bn", h, false);
            let input_affine = Affine::new(b, "input_affine", h);
            let trunk = Mlp::new(b, "trunk", &[h, cfg.dim, cfg.dim, cfg.dim, cfg.dim], slope);
            let trunk_bn = BatchNorm::new(b, "trunk_bn", cfg.dim, false);
            let trunk_affine = Affine::new(b, "trunk_affine", cfg.dim);
            let heads = Linear::new(b, "heads", cfg.dim, cfg.code_len());
            let heads_bn = BatchNorm::new(b, "heads_bn", cfg.code_len(), true);
            (input_bn, input_affine, trunk, trunk_bn, trunk_affine, heads, heads_bn)
        });
        Ok(Generator {
            cfg: cfg.clone(),
            params: b.params,
            buffers: b.buffers,
            hallucinator,
            hallucinator_bn,
            cells,
            input_bn,
            input_affine,
            trunk,
            trunk_bn,
            trunk_affine,
            heads,
            heads_bn,
        })
    }

    /// Rebuild from stored tensors; names and shapes must match the layout for `cfg`.
    pub fn from_tensors(cfg: &ModelConfig, params: &TensorStore, buffers: &TensorStore) -> Result<Self> {
        let mut g = Generator::new(cfg, 0)?;
        replace_values(&mut g.params, params, "generator parameters")?;
        replace_values(&mut g.buffers, buffers, "generator buffers")?;
        Ok(g)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn num_parameters(&self) -> usize {
        self.params.numel()
    }

    /// Parameters of the bottom GRU cell that multiply the step noise.
    pub fn step_noise_weight(&self) -> ParamId {
        self.cells[0].w_input
    }

    /// A forward context over this generator's parameters.
    pub fn ctx(&self, trainable: bool, train: bool) -> Ctx<'_> {
        Ctx::new(&self.params, &self.buffers, trainable, train)
    }

    pub fn hallucinate_vars(&self, ctx: &Ctx, identity: &Var) -> Vec<Var> {
        let h = self.cfg.hidden_dim;
        let memory = self.hallucinator.forward(ctx, identity);
        let memory = self.hallucinator_bn.forward(ctx, &memory);
        let mut hidden: Vec<Var> = (0..self.cfg.num_gru_cells - 1)
            .map(|j| memory.slice_cols(j * h, h))
            .collect();
        hidden.push(identity.clone());
        hidden
    }

    /// One step of the GRU stack; the top cell's new hidden vector is the intermediate code.
    pub fn step_vars(&self, ctx: &Ctx, input: &Var, state: &[Var]) -> Vec<Var> {
        let mut x = input.clone();
        let mut next = Vec::with_capacity(state.len());
        for (cell, h) in self.cells.iter().zip(state) {
            x = cell.forward(ctx, &x, h);
            next.push(x.clone());
        }
        next
    }

    pub fn map_latent_vars(&self, ctx: &Ctx, l: &Var) -> Var {
        let x = self.input_bn.forward(ctx, l);
        let x = pixel_norm(&self.input_affine.forward(ctx, &x));
        let v = self.trunk.forward(ctx, &x);
        let v = self.trunk_affine.forward(ctx, &self.trunk_bn.forward(ctx, &v));
        let w = self.heads.forward(ctx, &v).leaky_relu(self.cfg.leaky_slope);
        self.heads_bn.forward(ctx, &w)
    }

    /// Roll the generator out for `steps.len() + 1` time steps.
    ///
    /// The first intermediate code comes from one step on an all-zeros input,
    /// so it depends on the identity noise only; step noise `k` then produces
    /// intermediate code `k + 1`.
    pub fn rollout_vars(&self, ctx: &Ctx, identity: &Var, steps: &[Var]) -> Rollout {
        let batch = identity.shape().0;
        let mut state = self.hallucinate_vars(ctx, identity);
        let zero = Var::constant(Tensor::zeros(batch, self.cfg.noise_dim));
        let mut intermediates = Vec::with_capacity(steps.len() + 1);
        for input in std::iter::once(&zero).chain(steps) {
            state = self.step_vars(ctx, input, &state);
            intermediates.push(state.last().expect("non-empty stack").clone());
        }
        let codes = self.map_latent_vars(ctx, &Var::concat_rows(&intermediates));
        Rollout {
            intermediates,
            codes,
            batch,
        }
    }

    fn check_noise_len(&self, len: usize, what: &str) -> Result<()> {
        if len != self.cfg.noise_dim {
            return Err(Error::config(
                what,
                format!("expected length {}, got {len}", self.cfg.noise_dim),
            ));
        }
        Ok(())
    }

    /// Initial GRU memory for one identity noise vector (inference mode).
    pub fn hallucinate(&self, identity_noise: &[f64]) -> Result<GeneratorState> {
        self.check_noise_len(identity_noise.len(), "identity_noise")?;
        no_grad(|| {
            let ctx = self.ctx(false, false);
            let i = Var::constant(Tensor::row(identity_noise));
            let hidden = self
                .hallucinate_vars(&ctx, &i)
                .iter()
                .map(|v| v.value().data().to_vec())
                .collect();
            Ok(GeneratorState { hidden })
        })
    }

    /// Intermediate and latent codes for a single noise input (inference mode).
    pub fn rollout(&self, noise: &NoiseInputs, t: usize) -> Result<(Vec<IntermediateCode>, Vec<LatentCode>)> {
        if t < 2 {
            return Err(Error::Argument(format!("rollout length must be at least 2, got {t}")));
        }
        if noise.step_noise.len() != t - 1 {
            return Err(Error::Argument(format!(
                "step noise has {} columns, rollout of length {t} needs {}",
                noise.step_noise.len(),
                t - 1
            )));
        }
        self.check_noise_len(noise.identity_noise.len(), "identity_noise")?;
        for col in &noise.step_noise {
            self.check_noise_len(col.len(), "step_noise")?;
        }
        let batch = NoiseBatch::from_inputs(std::slice::from_ref(noise))?;
        no_grad(|| {
            let ctx = self.ctx(false, false);
            let steps: Vec<Var> = batch.steps.iter().cloned().map(Var::constant).collect();
            let out = self.rollout_vars(&ctx, &Var::constant(batch.identity.clone()), &steps);
            let intermediates = out
                .intermediates
                .iter()
                .map(|v| IntermediateCode {
                    values: v.value().data().to_vec(),
                })
                .collect();
            let codes = (0..t)
                .map(|k| LatentCode {
                    layers: self.cfg.layers,
                    dim: self.cfg.dim,
                    values: out.codes.value().row_slice(k).to_vec(),
                })
                .collect();
            Ok((intermediates, codes))
        })
    }

    /// Map one intermediate code to a latent code (inference mode).
    pub fn map_latent(&self, l: &IntermediateCode) -> Result<LatentCode> {
        if l.values.len() != self.cfg.hidden_dim {
            return Err(Error::config(
                "intermediate code",
                format!("expected length {}, got {}", self.cfg.hidden_dim, l.values.len()),
            ));
        }
        no_grad(|| {
            let ctx = self.ctx(false, false);
            let w = self.map_latent_vars(&ctx, &Var::constant(Tensor::row(&l.values)));
            LatentCode::new(self.cfg.layers, self.cfg.dim, w.value().data().to_vec())
        })
    }

    /// Roll out a noise batch in inference mode.
    pub fn generate_from_noise(&self, noise: &NoiseBatch, fps: f64) -> Vec<LatentSequence> {
        no_grad(|| {
            let ctx = self.ctx(false, false);
            let steps: Vec<Var> = noise.steps.iter().cloned().map(Var::constant).collect();
            let out = self.rollout_vars(&ctx, &Var::constant(noise.identity.clone()), &steps);
            unpack_time_major(out.codes.value(), out.batch, self.cfg.layers, self.cfg.dim, fps)
        })
    }

    /// Re-estimate every batch-norm running statistic from `batches` fresh
    /// training-mode rollouts of length `len`. Weight averaging leaves the
    /// stored statistics describing some other set of weights; this puts
    /// them back in agreement. Batch statistics never read the running ones,
    /// so a plain average over batches is the estimate.
    pub fn recalibrate_batch_norm(&mut self, batches: usize, batch: usize, len: usize, seed: u64) {
        let mut sums: Vec<(BufferId, Tensor)> = Vec::new();
        for k in 0..batches {
            let mut r = rng::stream(seed, rng::RECALIBRATE, k as u64);
            let noise = NoiseBatch::sample(&mut r, batch, self.cfg.noise_dim, len);
            let updates = no_grad(|| {
                let ctx = self.ctx(false, true);
                let steps: Vec<Var> = noise.steps.iter().cloned().map(Var::constant).collect();
                self.rollout_vars(&ctx, &Var::constant(noise.identity.clone()), &steps);
                ctx.take_updates()
            });
            if sums.is_empty() {
                sums = updates;
            } else {
                for ((_, acc), (_, v)) in sums.iter_mut().zip(updates) {
                    *acc = acc.zip(&v, |a, b| a + b);
                }
            }
        }
        let inv = 1.0 / batches.max(1) as f64;
        for (id, total) in sums {
            self.buffers.values_mut()[id.index()] = total.map(|v| v * inv);
        }
    }

    /// Samples `range` of the stream for `seed`, rolled out as one batch.
    pub fn generate_range(&self, range: std::ops::Range<usize>, len: usize, seed: u64) -> Vec<LatentSequence> {
        let inputs: Vec<NoiseInputs> = range
            .map(|k| {
                let mut r = rng::stream(seed, rng::SAMPLE, k as u64);
                NoiseInputs::sample(&mut r, self.cfg.noise_dim, len)
            })
            .collect();
        let batch = NoiseBatch::from_inputs(&inputs).expect("uniform noise");
        self.generate_from_noise(&batch, DEFAULT_FPS)
    }

    /// `count` sequences of length `len`; sample k draws its noise from stream
    /// `(seed, k)`, so the output does not depend on chunking or threads.
    pub fn generate(&self, count: usize, len: usize, seed: u64) -> Result<Vec<LatentSequence>> {
        if len < 2 {
            return Err(Error::Argument(format!("rollout length must be at least 2, got {len}")));
        }
        let chunks = count.div_ceil(GENERATE_CHUNK);
        let parts = parallel::map_indexed(chunks, |c| {
            let lo = c * GENERATE_CHUNK;
            self.generate_range(lo..(lo + GENERATE_CHUNK).min(count), len, seed)
        });
        let out: Vec<LatentSequence> = parts.into_iter().flatten().collect();
        for s in &out {
            crate::error::ensure_finite(s.data(), "generated sequence")?;
        }
        Ok(out)
    }
}

/// Per-step feature extractor E followed by a strided temporal convolution stack.
#[derive(Clone, Debug)]
pub struct Critic {
    cfg: ModelConfig,
    pub params: TensorStore,
    pub buffers: TensorStore,
    features: Mlp,
    convs: Vec<Conv1d>,
    head_weight: ParamId,
    head_bias: ParamId,
    final_len: usize,
}

impl Critic {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng::stream(seed, rng::CRITIC_INIT, 0);
        let mut b = Builder::new(&mut rng);
        let h = cfg.hidden_dim;
        let slope = cfg.leaky_slope;
        let features = Mlp::new(
            &mut b,
            "features",
            &[cfg.code_len(), cfg.dim, cfg.dim, h, h, h, h],
            slope,
        );
        // Kernel 4, stride 2, padding 1 halves the length; widths double from hidden_dim.
        let mut convs = Vec::new();
        let mut len = cfg.train_window_t;
        let mut channels = h;
        b.scoped("conv", |b| loop {
            let out = h << convs.len();
            convs.push(Conv1d::new(b, &convs.len().to_string(), channels, out, 4, 2, 1));
            len = convs.last().expect("just pushed").geometry(1, len).out_len();
            channels = out;
            if len <= 4 {
                break;
            }
        });
        let bound = 1.0 / ((len * channels) as f64).sqrt();
        let (head_weight, head_bias) = b.scoped("head", |b| {
            let w = b.normal(len * channels, 1, 0.02);
            let bias = b.uniform(1, 1, bound);
            (b.param("weight", w), b.param("bias", bias))
        });
        Ok(Critic {
            cfg: cfg.clone(),
            params: b.params,
            buffers: b.buffers,
            features,
            convs,
            head_weight,
            head_bias,
            final_len: len,
        })
    }

    pub fn from_tensors(cfg: &ModelConfig, params: &TensorStore) -> Result<Self> {
        let mut c = Critic::new(cfg, 0)?;
        replace_values(&mut c.params, params, "critic parameters")?;
        Ok(c)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn window(&self) -> usize {
        self.cfg.train_window_t
    }

    pub fn num_conv_layers(&self) -> usize {
        self.convs.len()
    }

    pub fn ctx(&self, trainable: bool) -> Ctx<'_> {
        Ctx::new(&self.params, &self.buffers, trainable, false)
    }

    /// Scores for a time-major (window * batch) x code_len input, as batch x 1.
    pub fn score_vars(&self, ctx: &Ctx, codes: &Var, batch: usize) -> Var {
        let slope = self.cfg.leaky_slope;
        let mut x = self.features.forward(ctx, codes);
        let mut len = self.window();
        for conv in &self.convs {
            let (y, out_len) = conv.forward(ctx, &x, batch, len);
            x = y.leaky_relu(slope);
            len = out_len;
        }
        debug_assert_eq!(len, self.final_len);
        let channels = x.shape().1;
        let flat = x.unfold1d(crate::tensor::Conv1dGeometry {
            batch,
            len,
            channels,
            kernel: len,
            stride: 1,
            pad: 0,
        });
        flat.matmul(ctx.param(self.head_weight))
            .add_row(ctx.param(self.head_bias))
    }

    fn check_sequence(&self, seq: &LatentSequence) -> Result<()> {
        if seq.len() != self.window() {
            return Err(Error::Argument(format!(
                "critic expects sequences of length {}, got {}",
                self.window(),
                seq.len()
            )));
        }
        if seq.code_len() != self.cfg.code_len() {
            return Err(Error::shape(
                format!("{}x{}", self.cfg.layers, self.cfg.dim),
                format!("{}x{}", seq.layers, seq.dim),
            ));
        }
        Ok(())
    }

    pub fn critic_score(&self, seq: &LatentSequence) -> Result<f64> {
        Ok(self.scores(std::slice::from_ref(seq))?[0])
    }

    pub fn scores(&self, seqs: &[LatentSequence]) -> Result<Vec<f64>> {
        for s in seqs {
            self.check_sequence(s)?;
        }
        let windows: Vec<&[f64]> = seqs.iter().map(|s| s.data()).collect();
        let x = pack_time_major(&windows, self.window(), self.cfg.code_len());
        Ok(no_grad(|| {
            let ctx = self.ctx(false);
            self.score_vars(&ctx, &Var::constant(x), seqs.len())
                .value()
                .data()
                .to_vec()
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            layers: 2,
            dim: 8,
            noise_dim: 4,
            hidden_dim: 4,
            num_gru_cells: 4,
            train_window_t: 4,
            leaky_slope: 0.2,
        }
    }

    #[test]
    fn config_rejects_mismatched_noise_and_hidden() {
        let cfg = ModelConfig {
            noise_dim: 16,
            ..ModelConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config { .. })));
        let cfg = ModelConfig {
            num_gru_cells: 1,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
        assert!(ModelConfig::default().validate().is_ok());
    }

    #[test]
    fn hallucinate_default_shapes_keep_identity() {
        let g = Generator::new(&ModelConfig::default(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let i = rng::normal_vec(&mut rng, 32);
        let state = g.hallucinate(&i).unwrap();
        assert_eq!(state.hidden.len(), 4);
        assert!(state.hidden.iter().all(|h| h.len() == 32));
        assert_eq!(state.hidden[3], i);
        assert!(g.hallucinate(&[0.0; 31]).is_err());
    }

    #[test]
    fn hallucinate_matches_hand_rolled_mlp() {
        let cfg = tiny();
        let g = Generator::new(&cfg, 11).unwrap();
        let i = [0.3, -1.2, 0.7, 2.0];
        let state = g.hallucinate(&i).unwrap();

        // Independent dense forward pass over the raw stored tensors.
        let p = |name: &str| g.params.get(name).unwrap().clone();
        let mut x = i.to_vec();
        for layer in 0..4 {
            let w = p(&format!("hallucinator.mlp.{layer}.weight"));
            let b = p(&format!("hallucinator.mlp.{layer}.bias"));
            let mut y = b.data().to_vec();
            for (r, xv) in x.iter().enumerate() {
                for (c, yv) in y.iter_mut().enumerate() {
                    *yv += xv * w.get(r, c);
                }
            }
            x = y.into_iter().map(|v| if v > 0.0 { v } else { 0.2 * v }).collect();
        }
        let mean = g.buffers.get("hallucinator.bn.running_mean").unwrap();
        let var = g.buffers.get("hallucinator.bn.running_var").unwrap();
        let gamma = p("hallucinator.bn.weight");
        let beta = p("hallucinator.bn.bias");
        let expected: Vec<f64> = (0..x.len())
            .map(|c| (x[c] - mean.data()[c]) / (var.data()[c] + 1e-5).sqrt() * gamma.data()[c] + beta.data()[c])
            .collect();
        let got: Vec<f64> = state.hidden[..3].concat();
        for (a, b) in got.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rollout_shapes_and_shared_first_step() {
        let g = Generator::new(&ModelConfig::default(), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = NoiseInputs::sample(&mut rng, 32, 25);
        let mut b = NoiseInputs::sample(&mut rng, 32, 25);
        b.identity_noise = a.identity_noise.clone();
        let (la, wa) = g.rollout(&a, 25).unwrap();
        let (lb, wb) = g.rollout(&b, 25).unwrap();
        assert_eq!(wa.len(), 25);
        assert_eq!((wa[0].layers, wa[0].dim), (18, 512));
        assert_eq!(la[0], lb[0]);
        assert_eq!(wa[0], wb[0]);
        assert_ne!(la[1], lb[1]);
    }

    #[test]
    fn rollout_rejects_bad_lengths() {
        let g = Generator::new(&tiny(), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let noise = NoiseInputs::sample(&mut rng, 4, 5);
        assert!(matches!(g.rollout(&noise, 4), Err(Error::Argument(_))));
        let short = NoiseInputs::sample(&mut rng, 4, 1);
        assert!(matches!(g.rollout(&short, 1), Err(Error::Argument(_))));
    }

    #[test]
    fn long_rollouts_extend_short_ones() {
        let g = Generator::new(&tiny(), 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let long = NoiseInputs::sample(&mut rng, 4, 250);
        let short = NoiseInputs {
            identity_noise: long.identity_noise.clone(),
            step_noise: long.step_noise[..9].to_vec(),
        };
        let (ll, wl) = g.rollout(&long, 250).unwrap();
        let (ls, ws) = g.rollout(&short, 10).unwrap();
        assert_eq!(wl.len(), 250);
        assert_eq!(&ll[..10], &ls[..]);
        assert_eq!(&wl[..10], &ws[..]);
    }

    #[test]
    fn map_latent_shapes_and_injectivity() {
        let g = Generator::new(&ModelConfig::default(), 1).unwrap();
        let a = g.map_latent(&IntermediateCode { values: vec![0.5; 32] }).unwrap();
        assert_eq!(a.values.len(), 18 * 512);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = IntermediateCode {
            values: rng::normal_vec(&mut rng, 32),
        };
        let y = IntermediateCode {
            values: rng::normal_vec(&mut rng, 32),
        };
        assert_ne!(g.map_latent(&x).unwrap(), g.map_latent(&y).unwrap());
        assert!(g.map_latent(&IntermediateCode { values: vec![0.0; 3] }).is_err());
    }

    #[test]
    fn parameter_count_is_independent_of_window() {
        let a = Generator::new(&tiny(), 0).unwrap();
        let b = Generator::new(
            &ModelConfig {
                train_window_t: 40,
                ..tiny()
            },
            0,
        )
        .unwrap();
        assert_eq!(a.num_parameters(), b.num_parameters());
    }

    #[test]
    fn critic_scores_default_window() {
        let cfg = ModelConfig::default();
        let c = Critic::new(&cfg, 2).unwrap();
        assert_eq!(c.num_conv_layers(), 3);
        let seq = LatentSequence::new(18, 512, 25.0, vec![0.1; 25 * 18 * 512]).unwrap();
        let a = c.critic_score(&seq).unwrap();
        assert!(a.is_finite());
        assert_eq!(a, c.critic_score(&seq).unwrap());
        let short = seq.window(0, 24);
        assert!(matches!(c.critic_score(&short), Err(Error::Argument(_))));
    }

    #[test]
    fn zeroed_critic_scores_zero() {
        let cfg = tiny();
        let mut c = Critic::new(&cfg, 2).unwrap();
        let names = c.params.names().to_vec();
        for (name, v) in names.iter().zip(c.params.values_mut()) {
            if name.starts_with("conv.") || name.starts_with("head.") {
                *v = Tensor::zeros(v.rows(), v.cols());
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let seq = LatentSequence::new(2, 8, 25.0, rng::normal_vec(&mut rng, 4 * 16)).unwrap();
        assert_eq!(c.critic_score(&seq).unwrap(), 0.0);
    }

    #[test]
    fn generate_is_chunking_invariant() {
        let g = Generator::new(&tiny(), 8).unwrap();
        let all = g.generate(70, 6, 42).unwrap();
        let few = g.generate(3, 6, 42).unwrap();
        assert_eq!(&all[..3], &few[..]);
        assert!(all.iter().all(|s| s.len() == 6));
    }
}
