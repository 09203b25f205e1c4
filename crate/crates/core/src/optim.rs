//! Adam and exponential weight averaging over a [`TensorStore`].

use crate::nn::TensorStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &TensorStore, lr: f64, beta1: f64, beta2: f64) -> Self {
        let zeros = || {
            params
                .values()
                .iter()
                .map(|t| Tensor::zeros(t.rows(), t.cols()))
                .collect::<Vec<_>>()
        };
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One bias-corrected update; `grads` aligns with the store's order.
    pub fn update(&mut self, params: &mut TensorStore, grads: &[Tensor]) {
        assert_eq!(grads.len(), params.len());
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let (lr, eps) = (self.lr, self.eps);
        for (((p, g), m), v) in params
            .values_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
    }
}

/// `ema <- momentum * ema + (1 - momentum) * current`, tensor by tensor.
pub fn ema_update(ema: &mut TensorStore, current: &TensorStore, momentum: f64) {
    assert_eq!(ema.len(), current.len());
    for (e, c) in ema.values_mut().iter_mut().zip(current.values()) {
        let e = e.data_mut();
        for (a, b) in e.iter_mut().zip(c.data()) {
            *a = momentum * *a + (1.0 - momentum) * b;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Builder;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store(values: &[f64]) -> TensorStore {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = Builder::new(&mut rng);
        b.param("w", Tensor::row(values));
        b.params
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = store(&[1.0, -1.0]);
        let mut opt = Adam::new(&p, 0.1, 0.0, 0.9);
        opt.update(&mut p, &[Tensor::row(&[3.0, -0.5])]);
        let w = p.values()[0].data();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = store(&[4.0]);
        let mut opt = Adam::new(&p, 0.05, 0.0, 0.9);
        for _ in 0..2000 {
            let w = p.values()[0].data()[0];
            opt.update(&mut p, &[Tensor::row(&[2.0 * (w - 1.5)])]);
        }
        assert!((p.values()[0].data()[0] - 1.5).abs() < 1e-2);
    }

    #[test]
    fn ema_decays_geometrically() {
        let theta = store(&[1.0, 2.0]);
        let mut ema = store(&[0.0, 0.0]);
        for _ in 0..100 {
            ema_update(&mut ema, &theta, 0.995);
        }
        let e = ema.values()[0].data();
        let ratio = ((e[0] - 1.0).powi(2) + (e[1] - 2.0).powi(2)).sqrt() / 5f64.sqrt();
        assert!((ratio - 0.995f64.powi(100)).abs() < 1e-9);
    }
}
