//! Layers, parameter storage, and the forward-pass context they share.

use std::cell::RefCell;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::autodiff::Var;
use crate::tensor::{Conv1dGeometry, Tensor};

pub const BATCH_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_MOMENTUM: f64 = 0.1;
pub const PIXEL_NORM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    /// Position in the owning store.
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(usize);

impl BufferId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named tensors. Order is the registration order and is stable
/// across runs, which keeps checkpoints and optimizer state aligned.
#[derive(Clone, Debug, Default)]
pub struct TensorStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl TensorStore {
    /// Append a named tensor, returning its position.
    pub fn push(&mut self, name: String, value: Tensor) -> usize {
        debug_assert!(!self.names.contains(&name), "duplicate tensor name {name}");
        self.names.push(name);
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.values[i])
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }
}

/// Registers parameters and buffers while a model is being built.
pub struct Builder<'r, R: Rng> {
    pub params: TensorStore,
    pub buffers: TensorStore,
    rng: &'r mut R,
    prefix: Vec<String>,
}

impl<'r, R: Rng> Builder<'r, R> {
    pub fn new(rng: &'r mut R) -> Self {
        Builder {
            params: TensorStore::default(),
            buffers: TensorStore::default(),
            rng,
            prefix: Vec::new(),
        }
    }

    pub fn scoped<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> T) -> T {
        self.prefix.push(name.to_string());
        let out = f(self);
        self.prefix.pop();
        out
    }

    fn full_name(&self, leaf: &str) -> String {
        let mut parts = self.prefix.clone();
        parts.push(leaf.to_string());
        parts.join(".")
    }

    pub fn param(&mut self, name: &str, value: Tensor) -> ParamId {
        let full = self.full_name(name);
        ParamId(self.params.push(full, value))
    }

    pub fn buffer(&mut self, name: &str, value: Tensor) -> BufferId {
        let full = self.full_name(name);
        BufferId(self.buffers.push(full, value))
    }

    pub fn uniform(&mut self, rows: usize, cols: usize, bound: f64) -> Tensor {
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| dist.sample(self.rng)).collect())
    }

    pub fn normal(&mut self, rows: usize, cols: usize, std: f64) -> Tensor {
        let dist = Normal::new(0.0, std).expect("finite std");
        Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| dist.sample(self.rng)).collect())
    }
}

/// Per-call state of a forward pass: bound parameters, the running
/// statistics to read, and the batch statistics produced in training mode.
pub struct Ctx<'m> {
    params: Vec<Var>,
    buffers: &'m TensorStore,
    train: bool,
    updates: RefCell<Vec<(BufferId, Tensor)>>,
}

impl<'m> Ctx<'m> {
    /// Bind `params` as graph leaves (`trainable`) or constants.
    pub fn new(params: &TensorStore, buffers: &'m TensorStore, trainable: bool, train: bool) -> Self {
        let params = params
            .values()
            .iter()
            .map(|t| {
                if trainable {
                    Var::leaf(t.clone())
                } else {
                    Var::constant(t.clone())
                }
            })
            .collect();
        Ctx {
            params,
            buffers,
            train,
            updates: RefCell::new(Vec::new()),
        }
    }

    pub fn param(&self, id: ParamId) -> &Var {
        &self.params[id.0]
    }

    pub fn params(&self) -> &[Var] {
        &self.params
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    fn buffer(&self, id: BufferId) -> &Tensor {
        &self.buffers.values()[id.0]
    }

    /// Running-statistic updates collected so far, in layer order.
    pub fn take_updates(&self) -> Vec<(BufferId, Tensor)> {
        std::mem::take(&mut *self.updates.borrow_mut())
    }
}

/// Apply exponential running-statistic updates produced by a training forward pass.
pub fn apply_buffer_updates(buffers: &mut TensorStore, updates: Vec<(BufferId, Tensor)>) {
    for (id, batch_value) in updates {
        let running = &mut buffers.values_mut()[id.0];
        *running = running.zip(&batch_value, |r, b| {
            (1.0 - BATCH_NORM_MOMENTUM) * r + BATCH_NORM_MOMENTUM * b
        });
    }
}

/// Fully connected layer `y = x W + b` with `W` stored as in x out.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Weights and bias uniform in +-1/sqrt(fan_in).
    pub fn new<R: Rng>(b: &mut Builder<R>, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        b.scoped(name, |b| {
            let w = b.uniform(in_dim, out_dim, bound);
            let weight = b.param("weight", w);
            let bias_init = b.uniform(1, out_dim, bound);
            let bias = b.param("bias", bias_init);
            Linear {
                weight,
                bias,
                in_dim,
                out_dim,
            }
        })
    }

    pub fn forward(&self, ctx: &Ctx, x: &Var) -> Var {
        x.matmul(ctx.param(self.weight)).add_row(ctx.param(self.bias))
    }
}

/// A stack of Linear + LeakyReLU layers.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub slope: f64,
}

impl Mlp {
    pub fn new<R: Rng>(b: &mut Builder<R>, name: &str, widths: &[usize], slope: f64) -> Self {
        let layers = b.scoped(name, |b| {
            widths
                .windows(2)
                .enumerate()
                .map(|(i, w)| Linear::new(b, &i.to_string(), w[0], w[1]))
                .collect()
        });
        Mlp { layers, slope }
    }

    pub fn forward(&self, ctx: &Ctx, x: &Var) -> Var {
        self.layers
            .iter()
            .fold(x.clone(), |h, l| l.forward(ctx, &h).leaky_relu(self.slope))
    }
}

/// Per-feature batch normalization over rows, optionally with learned scale and shift.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub affine: Option<(ParamId, ParamId)>,
    pub features: usize,
}

impl BatchNorm {
    pub fn new<R: Rng>(b: &mut Builder<R>, name: &str, features: usize, affine: bool) -> Self {
        b.scoped(name, |b| {
            let running_mean = b.buffer("running_mean", Tensor::zeros(1, features));
            let running_var = b.buffer("running_var", Tensor::full(1, features, 1.0));
            let affine = affine.then(|| {
                (
                    b.param("weight", Tensor::full(1, features, 1.0)),
                    b.param("bias", Tensor::zeros(1, features)),
                )
            });
            BatchNorm {
                running_mean,
                running_var,
                affine,
                features,
            }
        })
    }

    pub fn forward(&self, ctx: &Ctx, x: &Var) -> Var {
        let normalized = if ctx.is_train() {
            let m = x.shape().0;
            let inv_m = 1.0 / m as f64;
            let mean = x.sum_rows().scale(inv_m);
            let centered = x.sub(&mean.broadcast_rows(m));
            let var = centered.square().sum_rows().scale(inv_m);
            let inv_std = var.add_scalar(BATCH_NORM_EPS).sqrt().recip();
            let unbiased = if m > 1 { m as f64 / (m - 1) as f64 } else { 1.0 };
            let mut updates = ctx.updates.borrow_mut();
            updates.push((self.running_mean, mean.value().clone()));
            updates.push((self.running_var, var.value().map(|v| v * unbiased)));
            centered.mul_row(&inv_std)
        } else {
            let shift = Var::constant(ctx.buffer(self.running_mean).map(|v| -v));
            let inv_std = Var::constant(ctx.buffer(self.running_var).map(|v| 1.0 / (v + BATCH_NORM_EPS).sqrt()));
            x.add_row(&shift).mul_row(&inv_std)
        };
        match self.affine {
            Some((w, b)) => normalized.mul_row(ctx.param(w)).add_row(ctx.param(b)),
            None => normalized,
        }
    }
}

/// Learned per-feature scale and shift.
#[derive(Clone, Debug)]
pub struct Affine {
    pub scale: ParamId,
    pub shift: ParamId,
}

impl Affine {
    pub fn new<R: Rng>(b: &mut Builder<R>, name: &str, features: usize) -> Self {
        b.scoped(name, |b| Affine {
            scale: b.param("scale", Tensor::full(1, features, 1.0)),
            shift: b.param("shift", Tensor::zeros(1, features)),
        })
    }

    pub fn forward(&self, ctx: &Ctx, x: &Var) -> Var {
        x.mul_row(ctx.param(self.scale)).add_row(ctx.param(self.shift))
    }
}

/// Rescale every row to unit mean square.
pub fn pixel_norm(x: &Var) -> Var {
    let n = x.shape().1 as f64;
    let inv_rms = x
        .square()
        .sum_cols()
        .scale(1.0 / n)
        .add_scalar(PIXEL_NORM_EPS)
        .sqrt()
        .recip();
    x.mul_col(&inv_rms)
}

/// Gated recurrent unit with reset, update, and candidate gates packed
/// column-wise as `[r | z | n]`.
#[derive(Clone, Debug)]
pub struct GruCell {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub b_input: ParamId,
    pub b_hidden: ParamId,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl GruCell {
    pub fn new<R: Rng>(b: &mut Builder<R>, name: &str, input_dim: usize, hidden_dim: usize) -> Self {
        let bound = 1.0 / (hidden_dim as f64).sqrt();
        b.scoped(name, |b| {
            let wi = b.uniform(input_dim, 3 * hidden_dim, bound);
            let wh = b.uniform(hidden_dim, 3 * hidden_dim, bound);
            let bi = b.uniform(1, 3 * hidden_dim, bound);
            let bh = b.uniform(1, 3 * hidden_dim, bound);
            GruCell {
                w_input: b.param("weight_input", wi),
                w_hidden: b.param("weight_hidden", wh),
                b_input: b.param("bias_input", bi),
                b_hidden: b.param("bias_hidden", bh),
                input_dim,
                hidden_dim,
            }
        })
    }

    pub fn forward(&self, ctx: &Ctx, x: &Var, h: &Var) -> Var {
        let hd = self.hidden_dim;
        let gi = x.matmul(ctx.param(self.w_input)).add_row(ctx.param(self.b_input));
        let gh = h.matmul(ctx.param(self.w_hidden)).add_row(ctx.param(self.b_hidden));
        let rz = gi.slice_cols(0, 2 * hd).add(&gh.slice_cols(0, 2 * hd)).sigmoid();
        let r = rz.slice_cols(0, hd);
        let z = rz.slice_cols(hd, hd);
        let n = gi.slice_cols(2 * hd, hd).add(&r.mul(&gh.slice_cols(2 * hd, hd))).tanh();
        // h' = (1 - z) * n + z * h
        n.add(&z.mul(&h.sub(&n)))
    }
}

/// Bias-free strided temporal convolution, weights stored as (kernel*in) x out.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub weight: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv1d {
    /// Weights drawn from N(0, 0.02).
    pub fn new<R: Rng>(
        b: &mut Builder<R>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        b.scoped(name, |b| {
            let w = b.normal(kernel * in_channels, out_channels, 0.02);
            Conv1d {
                weight: b.param("weight", w),
                in_channels,
                out_channels,
                kernel,
                stride,
                pad,
            }
        })
    }

    pub fn geometry(&self, batch: usize, len: usize) -> Conv1dGeometry {
        Conv1dGeometry {
            batch,
            len,
            channels: self.in_channels,
            kernel: self.kernel,
            stride: self.stride,
            pad: self.pad,
        }
    }

    /// `x` is (len*batch) x in_channels, time-major. Returns the output and its length.
    pub fn forward(&self, ctx: &Ctx, x: &Var, batch: usize, len: usize) -> (Var, usize) {
        let g = self.geometry(batch, len);
        (x.unfold1d(g).matmul(ctx.param(self.weight)), g.out_len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pixel_norm_has_unit_mean_square() {
        let x = Var::constant(Tensor::from_vec(3, 4, (0..12).map(|v| v as f64 - 5.5).collect()));
        let y = pixel_norm(&x);
        for r in 0..3 {
            let ms: f64 = y.value().row_slice(r).iter().map(|v| v * v).sum::<f64>() / 4.0;
            assert!((ms - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn batch_norm_train_mode_standardizes_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut b = Builder::new(&mut rng);
        let bn = BatchNorm::new(&mut b, "bn", 3, true);
        let (params, buffers) = (b.params, b.buffers);
        let ctx = Ctx::new(&params, &buffers, true, true);
        let x = Var::constant(Tensor::from_vec(4, 3, (0..12).map(|v| (v * v) as f64).collect()));
        let y = bn.forward(&ctx, &x);
        let mean = y.value().sum_rows();
        assert!(mean.data().iter().all(|m| m.abs() < 1e-12));
        assert_eq!(ctx.take_updates().len(), 2);
    }

    #[test]
    fn gru_gradients_flow_to_input_and_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut b = Builder::new(&mut rng);
        let cell = GruCell::new(&mut b, "gru", 3, 4);
        let params = b.params;
        let buffers = TensorStore::default();
        let ctx = Ctx::new(&params, &buffers, false, false);
        let x = Var::leaf(Tensor::full(2, 3, 0.5));
        let h = Var::leaf(Tensor::full(2, 4, -0.25));
        let out = cell.forward(&ctx, &x, &h).sum_all();
        let g = grad(&out, &[&x, &h], false);
        assert!(g[0].value().sum_sq() > 0.0);
        assert!(g[1].value().sum_sq() > 0.0);
    }
}
