//! Adam optimizer with parameter-scope freezing.

use super::params::{Gradients, ParamStore};
use crate::mat::Mat;

pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Per-scope learning-rate multipliers (prefix match on names).
    pub lr_scales: Vec<(String, f64)>,
    step_count: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr_scales: Vec::new(),
            step_count: 0,
            m: store.zero_gradients(),
            v: store.zero_gradients(),
        }
    }

    fn lr_for(&self, name: &str) -> f64 {
        for (prefix, scale) in &self.lr_scales {
            if name.starts_with(prefix.as_str()) {
                return self.lr * scale;
            }
        }
        self.lr
    }

    /// One update. Parameters whose name starts with any prefix in
    /// `frozen_scopes` keep their moments and values untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, frozen_scopes: &[String]) {
        self.step_count += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step_count as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step_count as i32);
        for pid in 0..store.len() {
            let name = store.name(pid);
            if frozen_scopes.iter().any(|scope| name.starts_with(scope.as_str())) {
                continue;
            }
            let lr = self.lr_for(name);
            let g = &grads[pid];
            let m = &mut self.m[pid];
            let v = &mut self.v[pid];
            for i in 0..g.data.len() {
                m.data[i] = self.beta1 * m.data[i] + (1.0 - self.beta1) * g.data[i];
                v.data[i] = self.beta2 * v.data[i] + (1.0 - self.beta2) * g.data[i] * g.data[i];
            }
            let value = store.value_mut(pid);
            for i in 0..value.data.len() {
                let m_hat = self.m[pid].data[i] / bc1;
                let v_hat = self.v[pid].data[i] / bc2;
                value.data[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Scales gradients in place so the global L2 norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut Gradients, max_norm: f64) {
    let total: f64 = grads.iter().map(|g| g.data.iter().map(|v| v * v).sum::<f64>()).sum();
    let norm = total.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            g.scale_assign(scale);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Prng;

    #[test]
    fn adam_descends_a_quadratic() {
        let mut store = ParamStore::new();
        let mut rng = Prng::seed_from_u64(1);
        let p = store.add_glorot("x", 1, 4, &mut rng);
        let mut adam = Adam::new(&store, 0.05);
        for _ in 0..300 {
            let grads = vec![store.value(p).map(|v| 2.0 * (v - 3.0))];
            adam.step(&mut store, &grads, &[]);
        }
        for &v in &store.value(p).data {
            assert!((v - 3.0).abs() < 1e-3, "converged to {v}");
        }
    }

    #[test]
    fn frozen_scopes_do_not_move() {
        let mut store = ParamStore::new();
        let mut rng = Prng::seed_from_u64(2);
        let frozen = store.add_glorot("decoder.w", 2, 2, &mut rng);
        let live = store.add_glorot("encoder.w", 2, 2, &mut rng);
        let before = store.value(frozen).clone();
        let mut adam = Adam::new(&store, 0.1);
        let grads = vec![
            Mat::from_vec(2, 2, vec![1.0; 4]),
            Mat::from_vec(2, 2, vec![1.0; 4]),
        ];
        adam.step(&mut store, &grads, &["decoder.".to_string()]);
        assert_eq!(store.value(frozen), &before);
        assert_ne!(store.value(live).data[0], 0.0);
        let _ = live;
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut grads = vec![Mat::from_vec(1, 2, vec![3.0, 4.0])];
        clip_global_norm(&mut grads, 1.0);
        let norm: f64 = grads[0].data.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
    }
}
