//! Wasserstein losses, the interpolate gradient penalty, and the gradient
//! angle penalty with its running normalization statistics.

use std::f64::consts::FRAC_PI_4;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{grad, Var};
use crate::error::{Error, Result};
use crate::latent_model::{pack_time_major, Critic, Generator, LatentSequence, NoiseBatch, Rollout};
use crate::nn::Ctx;
use crate::tensor::Tensor;

/// Added to the identity-gradient norm before dividing.
pub const ANGLE_DIV_EPS: f64 = 1e-12;
/// Added under square roots of sums of squares so they stay differentiable at zero.
pub const NORM_FLOOR: f64 = 1e-24;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_gp: f64,
    pub lambda_gap: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_gp: 50.0,
            lambda_gap: 100.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [("loss.lambda_gp", self.lambda_gp), ("loss.lambda_gap", self.lambda_gap)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(field, format!("must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// `(critic_loss, generator_loss)` for plain score batches.
pub fn wgan_losses(real_scores: &[f64], fake_scores: &[f64]) -> Result<(f64, f64)> {
    if real_scores.is_empty() || fake_scores.is_empty() {
        return Err(Error::Argument("score batches must be non-empty".into()));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let fake = mean(fake_scores);
    Ok((fake - mean(real_scores), -fake))
}

pub fn critic_wgan_term(real_scores: &Var, fake_scores: &Var) -> Var {
    fake_scores.mean_all().sub(&real_scores.mean_all())
}

pub fn generator_wgan_term(fake_scores: &Var) -> Var {
    fake_scores.mean_all().scale(-1.0)
}

pub fn total_critic_loss(wgan: f64, gp: f64, weights: &LossWeights) -> f64 {
    wgan + weights.lambda_gp * gp
}

pub fn total_generator_loss(wgan: f64, gap: f64, weights: &LossWeights) -> f64 {
    wgan + weights.lambda_gap * gap
}

/// Exponential moving mean and variance of the endpoint displacement, per component.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub count: u64,
    pub momentum: f64,
    pub epsilon: f64,
}

impl RunningStats {
    pub fn new(features: usize) -> Self {
        Self::with_params(features, 0.99, 1e-6)
    }

    pub fn with_params(features: usize, momentum: f64, epsilon: f64) -> Self {
        RunningStats {
            mean: vec![0.0; features],
            variance: vec![1.0; features],
            count: 0,
            momentum,
            epsilon,
        }
    }

    pub fn features(&self) -> usize {
        self.mean.len()
    }

    /// Fold in a batch (rows are observations) using its mean and population variance.
    pub fn update(&mut self, batch: &Tensor) {
        assert_eq!(batch.cols(), self.features());
        let n = batch.rows() as f64;
        let m = self.momentum;
        for c in 0..self.features() {
            let mu = (0..batch.rows()).map(|r| batch.get(r, c)).sum::<f64>() / n;
            let var = (0..batch.rows()).map(|r| (batch.get(r, c) - mu).powi(2)).sum::<f64>() / n;
            self.mean[c] = m * self.mean[c] + (1.0 - m) * mu;
            self.variance[c] = (m * self.variance[c] + (1.0 - m) * var).max(0.0);
        }
        self.count += 1;
    }

    pub fn inv_std(&self) -> Vec<f64> {
        self.variance.iter().map(|v| 1.0 / (v + self.epsilon).sqrt()).collect()
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(self.inv_std())
            .map(|((x, m), s)| (x - m) * s)
            .collect()
    }

    /// Standardize each row of `x`; the statistics act as constants.
    pub fn normalize_var(&self, x: &Var) -> Var {
        let neg_mean = Var::constant(Tensor::row(&self.mean).map(|v| -v));
        let scale = Var::constant(Tensor::row(&self.inv_std()));
        x.add_row(&neg_mean).mul_row(&scale)
    }
}

/// Result of an interpolate gradient penalty evaluation.
pub struct GradientPenalty {
    /// Differentiable with respect to the critic parameters.
    pub value: Var,
    /// Per-sample input-gradient norms at the interpolates.
    pub grad_norms: Vec<f64>,
}

/// Penalty `mean_b (||grad_x critic(x_b)|| - 1)^2` at `x = u real + (1 - u) fake`.
///
/// `real` and `fake` are time-major (t * batch) x F tensors; `critic` maps such
/// a tensor to batch x 1 scores. `u` holds one mixing weight per sample.
pub fn gradient_penalty_with<F>(
    critic: F,
    real: &Tensor,
    fake: &Tensor,
    batch: usize,
    u: &[f64],
) -> Result<GradientPenalty>
where
    F: Fn(&Var) -> Var,
{
    if real.shape() != fake.shape() {
        return Err(Error::Argument(format!(
            "real and fake batches differ in shape: {:?} vs {:?}",
            real.shape(),
            fake.shape()
        )));
    }
    if batch == 0 || !real.rows().is_multiple_of(batch) || u.len() != batch {
        return Err(Error::Argument(format!(
            "{} rows cannot hold {} samples with {} weights",
            real.rows(),
            batch,
            u.len()
        )));
    }
    let t = real.rows() / batch;
    let cols = real.cols();
    let mut mixed = vec![0.0; real.len()];
    for r in 0..real.rows() {
        let w = u[r % batch];
        let (a, b) = (real.row_slice(r), fake.row_slice(r));
        for c in 0..cols {
            mixed[r * cols + c] = w * a[c] + (1.0 - w) * b[c];
        }
    }
    let x = Var::leaf(Tensor::from_vec(real.rows(), cols, mixed));
    let scores = critic(&x);
    let g = grad(&scores.sum_all(), &[&x], true).remove(0);
    let norms = g
        .square()
        .sum_cols()
        .reshape(t, batch)
        .sum_rows()
        .add_scalar(NORM_FLOOR)
        .sqrt();
    let grad_norms = norms.value().data().to_vec();
    crate::error::ensure_finite(&grad_norms, "gradient penalty")?;
    let value = norms.add_scalar(-1.0).square().mean_all();
    Ok(GradientPenalty { value, grad_norms })
}

/// Gradient penalty of `critic` between two equally sized batches of windows.
pub fn gradient_penalty<R: Rng>(
    critic: &Critic,
    real: &[LatentSequence],
    fake: &[LatentSequence],
    rng: &mut R,
) -> Result<f64> {
    if real.len() != fake.len() || real.is_empty() {
        return Err(Error::Argument(
            "real and fake batches must be non-empty and equally sized".into(),
        ));
    }
    for (a, b) in real.iter().zip(fake) {
        if (a.len(), a.layers, a.dim) != (b.len(), b.layers, b.dim) {
            return Err(Error::Argument(format!(
                "window shapes differ: {}x{}x{} vs {}x{}x{}",
                a.len(),
                a.layers,
                a.dim,
                b.len(),
                b.layers,
                b.dim
            )));
        }
    }
    let t = critic.window();
    let f = critic.config().code_len();
    let pack = |s: &[LatentSequence]| pack_time_major(&s.iter().map(|x| x.data()).collect::<Vec<_>>(), t, f);
    let u: Vec<f64> = (0..real.len()).map(|_| rng.random::<f64>()).collect();
    let ctx = critic.ctx(false);
    let gp = gradient_penalty_with(
        |x| critic.score_vars(&ctx, x, real.len()),
        &pack(real),
        &pack(fake),
        real.len(),
        &u,
    )?;
    Ok(gp.value.item())
}

/// Result of a gradient angle penalty evaluation.
pub struct AnglePenalty {
    /// Mean over the batch of `min(0, phi - pi/4)^2`, differentiable in the generator parameters.
    pub loss: Var,
    pub phi: Vec<f64>,
    pub distance: Vec<f64>,
    pub grad_identity_norm: Vec<f64>,
    pub grad_step_norm: Vec<f64>,
}

impl AnglePenalty {
    pub fn mean_phi(&self) -> f64 {
        self.phi.iter().sum::<f64>() / self.phi.len() as f64
    }
}

/// Per-sample normalized endpoint distance `d_b`, as batch x 1.
pub fn endpoint_distance(rollout: &Rollout, stats: &RunningStats) -> Var {
    let first = &rollout.intermediates[0];
    let last = rollout.intermediates.last().expect("non-empty rollout");
    stats.normalize_var(&last.sub(first)).row_norms(NORM_FLOOR)
}

/// Angle penalty on an existing rollout whose noise inputs `identity` and
/// `steps` are graph leaves.
///
/// Per-sample gradients are the rows of the gradient of `sum_b d_b`. They are
/// exact per-sample gradients when samples do not interact, i.e. with batch
/// normalization in inference mode or batch size one.
pub fn angle_penalty_on_rollout(
    rollout: &Rollout,
    identity: &Var,
    steps: &[Var],
    stats: &mut RunningStats,
    update_stats: bool,
) -> Result<AnglePenalty> {
    if rollout.len() < 2 || steps.len() + 1 != rollout.len() {
        return Err(Error::Argument(format!(
            "rollout of length {} does not match {} step-noise columns",
            rollout.len(),
            steps.len()
        )));
    }
    if update_stats {
        let first = rollout.intermediates[0].value();
        let last = rollout.intermediates.last().expect("checked").value();
        stats.update(&last.zip(first, |a, b| a - b));
    }
    let d = endpoint_distance(rollout, stats);
    let mut wrt: Vec<&Var> = vec![identity];
    wrt.extend(steps.iter());
    let grads = grad(&d.sum_all(), &wrt, true);
    let g_i = grads[0].row_norms(NORM_FLOOR);
    let mut step_sq = grads[1].square().sum_cols();
    for g in &grads[2..] {
        step_sq = step_sq.add(&g.square().sum_cols());
    }
    let g_s = step_sq.add_scalar(NORM_FLOOR).sqrt();
    let phi = g_s.mul(&g_i.add_scalar(ANGLE_DIV_EPS).recip()).atan();
    let loss = phi.add_scalar(-FRAC_PI_4).min_zero().square().mean_all();

    let out = AnglePenalty {
        phi: phi.value().data().to_vec(),
        distance: d.value().data().to_vec(),
        grad_identity_norm: g_i.value().data().to_vec(),
        grad_step_norm: g_s.value().data().to_vec(),
        loss,
    };
    for (v, what) in [
        (&out.phi, "gradient angle"),
        (&out.grad_identity_norm, "identity-noise gradient"),
        (&out.grad_step_norm, "step-noise gradient"),
    ] {
        crate::error::ensure_finite(v, what)?;
    }
    Ok(out)
}

/// Leaf variables for a noise batch.
pub fn noise_leaves(noise: &NoiseBatch) -> (Var, Vec<Var>) {
    (
        Var::leaf(noise.identity.clone()),
        noise.steps.iter().cloned().map(Var::leaf).collect(),
    )
}

/// Roll out `noise` under `ctx` and evaluate the angle penalty on it.
pub fn gradient_angle_penalty(
    generator: &Generator,
    ctx: &Ctx,
    noise: &NoiseBatch,
    stats: &mut RunningStats,
    update_stats: bool,
) -> Result<(AnglePenalty, Rollout)> {
    let (identity, steps) = noise_leaves(noise);
    let rollout = generator.rollout_vars(ctx, &identity, &steps);
    let gap = angle_penalty_on_rollout(&rollout, &identity, &steps, stats, update_stats)?;
    Ok((gap, rollout))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wgan_examples() {
        assert_eq!(wgan_losses(&[1.0], &[1.0]).unwrap(), (0.0, -1.0));
        assert_eq!(wgan_losses(&[2.0, 4.0], &[1.0, 1.0]).unwrap().0, -2.0);
        assert!(wgan_losses(&[], &[1.0]).is_err());
    }

    #[test]
    fn totals_follow_weights() {
        let w = LossWeights::default();
        assert!((total_critic_loss(-2.0, 0.1, &w) - 3.0).abs() < 1e-12);
        let gap = FRAC_PI_4 * FRAC_PI_4;
        assert!((total_generator_loss(0.0, gap, &w) - 61.685).abs() < 1e-3);
        let zero = LossWeights {
            lambda_gp: 0.0,
            lambda_gap: 0.0,
        };
        assert_eq!(total_critic_loss(-2.0, 0.7, &zero), -2.0);
    }

    #[test]
    fn negative_weight_is_rejected() {
        let w = LossWeights {
            lambda_gp: -1.0,
            ..LossWeights::default()
        };
        assert!(matches!(w.validate(), Err(Error::Config { .. })));
    }

    #[test]
    fn running_stats_start_as_identity() {
        let s = RunningStats::new(3);
        let x = [1.0, -2.0, 0.5];
        for (a, b) in s.normalize(&x).iter().zip(&x) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn linear_critic_penalties() {
        // critic(x) = k * <a, x> over the flattened window, with ||a|| = 1.
        let (t, batch, f) = (3, 2, 4);
        let a: Vec<f64> = (0..t * f).map(|i| ((i as f64) * 0.37).sin()).collect();
        let norm = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let a: Vec<f64> = a.iter().map(|v| v / norm).collect();
        // Tile a so row k*batch+b holds time step k.
        let mut tiled = Vec::new();
        for k in 0..t {
            for _ in 0..batch {
                tiled.extend_from_slice(&a[k * f..(k + 1) * f]);
            }
        }
        let weights = Var::constant(Tensor::from_vec(t * batch, f, tiled));
        let real = Tensor::from_vec(t * batch, f, (0..t * batch * f).map(|i| i as f64).collect());
        let fake = real.map(|v| -0.5 * v);
        for (k, expected) in [(1.0, 0.0), (2.0, 1.0)] {
            let critic = |x: &Var| {
                x.mul(&weights)
                    .sum_cols()
                    .reshape(t, batch)
                    .sum_rows()
                    .reshape(batch, 1)
                    .scale(k)
            };
            let gp = gradient_penalty_with(critic, &real, &fake, batch, &[0.3, 0.8]).unwrap();
            assert!((gp.value.item() - expected).abs() < 1e-10);
        }
    }
}
