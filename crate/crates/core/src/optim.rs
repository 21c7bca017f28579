//! Adam and parameter averaging.

use alloc::vec::Vec;

use crate::error::{invalid, CoreError, Result};
use crate::nn::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const EMA_MOMENTUM: f64 = 0.998;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam over a fixed list of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub ids: Vec<ParamId>,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore, ids: Vec<ParamId>) -> Self {
        let m: Vec<Tensor> = ids.iter().map(|&id| Tensor::zeros(store.value(id).shape())).collect();
        Self {
            config,
            v: m.clone(),
            m,
            ids,
            t: 0,
        }
    }

    /// One update. `grads[k]` is the gradient for `self.ids[k]`; all
    /// gradients are validated before any parameter moves.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != self.ids.len() {
            return Err(invalid("adam", "one gradient per parameter required"));
        }
        for (&id, g) in self.ids.iter().zip(grads) {
            if g.shape() != store.value(id).shape() {
                return Err(CoreError::ShapeMismatch {
                    op: "adam",
                    lhs: store.value(id).shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !g.all_finite() {
                return Err(CoreError::NonFiniteGradient {
                    name: store.meta(id).name.clone(),
                });
            }
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - libm::pow(beta1, self.t as f64);
        let bc2 = 1.0 - libm::pow(beta2, self.t as f64);
        for (k, &id) in self.ids.iter().enumerate() {
            let g = grads[k].data();
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            let p = store.values_mut()[id.0].data_mut();
            for j in 0..g.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p[j] -= lr * mh / (libm::sqrt(vh) + eps);
            }
        }
        Ok(())
    }
}

/// Exponential moving average of a parameter subset.
#[derive(Clone, Debug, PartialEq)]
pub struct Ema {
    pub momentum: f64,
    pub ids: Vec<ParamId>,
    pub shadow: Vec<Tensor>,
}

impl Ema {
    pub fn new(momentum: f64, store: &ParamStore, ids: Vec<ParamId>) -> Self {
        let shadow = ids.iter().map(|&id| store.value(id).clone()).collect();
        Self { momentum, ids, shadow }
    }

    pub fn update(&mut self, store: &ParamStore) {
        let a = self.momentum;
        for (s, &id) in self.shadow.iter_mut().zip(&self.ids) {
            for (x, &p) in s.data_mut().iter_mut().zip(store.value(id).data()) {
                *x = a * *x + (1.0 - a) * p;
            }
        }
    }

    /// Full value list with averaged tensors substituted for tracked ids.
    pub fn values(&self, store: &ParamStore) -> Vec<Tensor> {
        let mut out = store.values().to_vec();
        for (s, &id) in self.shadow.iter().zip(&self.ids) {
            out[id.0] = s.clone();
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Group;

    fn scalar_store(w: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::vector(alloc::vec![w]), Group::Classifier);
        (s, id)
    }

    #[test]
    fn zero_gradient_leaves_parameters_and_counts_the_step() {
        let (mut s, id) = scalar_store(0.3);
        let mut adam = Adam::new(AdamConfig::default(), &s, alloc::vec![id]);
        adam.step(&mut s, &[Tensor::vector(alloc::vec![0.0])]).unwrap();
        assert_eq!(s.value(id).data()[0], 0.3);
        assert_eq!(adam.t, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate_against_the_sign() {
        for g in [5.0, -0.02, 1e3] {
            let (mut s, id) = scalar_store(0.0);
            let mut adam = Adam::new(AdamConfig::default(), &s, alloc::vec![id]);
            adam.step(&mut s, &[Tensor::vector(alloc::vec![g])]).unwrap();
            let w = s.value(id).data()[0];
            assert!((w + 1e-3 * g.signum()).abs() < 1e-9, "{g}: {w}");
        }
    }

    #[test]
    fn quadratic_trajectory_matches_scalar_recurrence() {
        let (mut s, id) = scalar_store(1.0);
        let mut adam = Adam::new(AdamConfig::default(), &s, alloc::vec![id]);
        let (mut w, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=10 {
            let g = 2.0 * s.value(id).data()[0];
            adam.step(&mut s, &[Tensor::vector(alloc::vec![g])]).unwrap();
            let go = 2.0 * w;
            m = 0.5 * m + 0.5 * go;
            v = 0.999 * v + 0.001 * go * go;
            let mh = m / (1.0 - libm::pow(0.5, t as f64));
            let vh = v / (1.0 - libm::pow(0.999, t as f64));
            w -= 1e-3 * mh / (libm::sqrt(vh) + 1e-8);
            assert!((w - s.value(id).data()[0]).abs() <= 1e-12);
        }
    }

    #[test]
    fn non_finite_gradient_names_the_parameter_and_changes_nothing() {
        let (mut s, id) = scalar_store(1.0);
        let mut adam = Adam::new(AdamConfig::default(), &s, alloc::vec![id]);
        match adam.step(&mut s, &[Tensor::vector(alloc::vec![f64::NAN])]) {
            Err(CoreError::NonFiniteGradient { name }) => assert_eq!(name, "w"),
            other => panic!("{other:?}"),
        }
        assert_eq!(adam.t, 0);
        assert_eq!(s.value(id).data()[0], 1.0);
    }

    #[test]
    fn ema_fixed_point_and_first_update() {
        let (s, id) = scalar_store(1.0);
        let mut ema = Ema::new(EMA_MOMENTUM, &s, alloc::vec![id]);
        ema.update(&s);
        assert_eq!(ema.shadow[0].data()[0], 1.0);
        ema.shadow[0].data_mut()[0] = 0.0;
        ema.update(&s);
        assert!((ema.shadow[0].data()[0] - 0.002).abs() < 1e-15);
    }

    #[test]
    fn ema_converges_geometrically() {
        let (s, id) = scalar_store(1.0);
        let mut ema = Ema::new(EMA_MOMENTUM, &s, alloc::vec![id]);
        ema.shadow[0].data_mut()[0] = 0.0;
        for n in 1..=100 {
            ema.update(&s);
            let gap = 1.0 - ema.shadow[0].data()[0];
            assert!((gap - libm::pow(0.998, n as f64)).abs() < 1e-12);
        }
    }
}
