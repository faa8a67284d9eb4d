use std::collections::HashMap;

use super::params::{Gradients, ParamId, ParamStore};
use super::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias-corrected moments. Moments are created lazily for the parameters that
/// appear in the gradients passed to [`Adam::step`].
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    t: u64,
    moments: HashMap<ParamId, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, t: 0, moments: HashMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update to every non-frozen parameter in `params`. Parameters without a
    /// gradient entry are treated as having zero gradient.
    pub fn step(&mut self, store: &mut ParamStore, params: &[ParamId], grads: &Gradients) {
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for &id in params {
            if store.is_frozen(id) {
                continue;
            }
            let (rows, cols) = store.value(id).shape();
            let (m, v) =
                self.moments.entry(id).or_insert_with(|| (Tensor::zeros(rows, cols), Tensor::zeros(rows, cols)));
            let g = grads.get(id);
            let w = store.value_mut(id).data_mut();
            for (k, (wk, (mk, vk))) in w.iter_mut().zip(m.data_mut().iter_mut().zip(v.data_mut())).enumerate() {
                let gk = g.map_or(0.0, |t| t.data()[k]);
                *mk = beta1 * *mk + (1.0 - beta1) * gk;
                *vk = beta2 * *vk + (1.0 - beta2) * gk * gk;
                let m_hat = *mk / bc1;
                let v_hat = *vk / bc2;
                *wk -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(w0: f64) -> (ParamStore, ParamId) {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::row_vector(vec![w0]));
        (store, id)
    }

    fn grad(id: ParamId, g: f64) -> Gradients {
        let mut grads = Gradients::new();
        grads.accumulate(id, &Tensor::row_vector(vec![g]));
        grads
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let (mut store, id) = scalar_store(1.5);
        let mut adam = Adam::new(AdamConfig::default());
        for _ in 0..10 {
            adam.step(&mut store, &[id], &grad(id, 0.0));
        }
        assert_eq!(store.value(id).data()[0], 1.5);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = g and v̂ = g², so the step is lr·g/(|g| + eps).
        for g in [0.01, 1.0, -250.0] {
            let (mut store, id) = scalar_store(0.0);
            let mut adam = Adam::new(AdamConfig::with_lr(0.1));
            adam.step(&mut store, &[id], &grad(id, g));
            let expected = -0.1 * g / (g.abs() + 1e-8);
            assert!((store.value(id).data()[0] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn converges_on_quadratic() {
        let (mut store, id) = scalar_store(0.0);
        let mut adam = Adam::new(AdamConfig::with_lr(0.1));
        for _ in 0..200 {
            let w = store.value(id).data()[0];
            adam.step(&mut store, &[id], &grad(id, 2.0 * (w - 3.0)));
        }
        assert!((store.value(id).data()[0] - 3.0).abs() < 0.1);
        assert_eq!(adam.steps(), 200);
    }

    #[test]
    fn frozen_parameters_are_skipped() {
        let (mut store, id) = scalar_store(2.0);
        store.set_frozen(id, true);
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut store, &[id], &grad(id, 1.0));
        assert_eq!(store.value(id).data()[0], 2.0);
    }
}
