//! Adam with decoupled weight decay and global-norm clipping.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::ParameterStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub weight_decay: f64,
    /// Maximum global gradient norm; non-positive disables clipping.
    pub clip: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 1e-4,
            weight_decay: 0.01,
            clip: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Rescales all gradients of `store` so their global norm is at most
/// `max_norm`. Returns the factor applied.
pub fn clip_grad_norm(store: &mut ParameterStore, max_norm: f64) -> f64 {
    let norm = store.grad_norm();
    if max_norm <= 0.0 || norm <= max_norm || norm == 0.0 {
        return 1.0;
    }
    let scale = max_norm / norm;
    for (_, t) in store.iter_mut() {
        if let Some(g) = t.grad_mut() {
            g.iter_mut().for_each(|x| *x *= scale);
        }
    }
    scale
}

#[derive(Clone, Debug, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct AdamW {
    config: OptimizerConfig,
    t: u64,
    state: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(config: OptimizerConfig) -> Self {
        AdamW {
            config,
            t: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Clips, applies one update at learning rate `lr`, then zeroes grads.
    /// Parameters without a gradient only receive weight decay.
    pub fn step(&mut self, store: &mut ParameterStore, lr: f64) {
        let c = self.config;
        clip_grad_norm(store, c.clip);
        self.t += 1;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (name, tensor) in store.iter_mut() {
            let n = tensor.len();
            let st = self.state.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            let grad = tensor.grad().map(<[f64]>::to_vec);
            let values = tensor.values_mut();
            for i in 0..n {
                let g = grad.as_ref().map_or(0.0, |g| g[i]);
                st.m[i] = c.beta1 * st.m[i] + (1.0 - c.beta1) * g;
                st.v[i] = c.beta2 * st.v[i] + (1.0 - c.beta2) * g * g;
                let update = (st.m[i] / bc1) / ((st.v[i] / bc2).sqrt() + c.eps);
                values[i] -= lr * (update + c.weight_decay * values[i]);
            }
        }
        store.zero_grads();
    }
}

/// Learning rate after `step` of `total` steps under linear decay to zero.
pub fn linear_decay(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    base * (1.0 - step.min(total) as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn store_with_grad(values: Vec<f64>, grad: Vec<f64>) -> ParameterStore {
        let mut s = ParameterStore::new(0);
        let mut t = Tensor::vector(values);
        t.accumulate_grad(&grad);
        s.insert("w", t).unwrap();
        s
    }

    #[test]
    fn zero_grads_apply_only_weight_decay() {
        let mut s = store_with_grad(vec![1.0, -2.0], vec![0.0, 0.0]);
        let mut opt = AdamW::new(OptimizerConfig::default());
        opt.step(&mut s, 0.1);
        let w = s.get("w").unwrap().values();
        assert!((w[0] - (1.0 - 0.1 * 0.01)).abs() < 1e-15);
        assert!((w[1] - (-2.0 + 0.1 * 0.01 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn clip_scales_to_the_cap() {
        let mut s = store_with_grad(vec![0.0, 0.0], vec![6.0, 8.0]);
        let scale = clip_grad_norm(&mut s, 0.01);
        assert!((scale - 0.001).abs() < 1e-15);
        let g = s.get("w").unwrap().grad().unwrap();
        assert!((g[0] - 0.006).abs() < 1e-15 && (g[1] - 0.008).abs() < 1e-15);
        assert!((s.grad_norm() - 0.01).abs() < 1e-15);
    }

    #[test]
    fn first_step_moves_by_lr_against_the_gradient() {
        // With bias correction the first Adam step is lr * sign(g), up to eps.
        let mut s = store_with_grad(vec![0.5], vec![3.0]);
        let mut opt = AdamW::new(OptimizerConfig {
            weight_decay: 0.0,
            clip: 0.0,
            ..OptimizerConfig::default()
        });
        opt.step(&mut s, 0.01);
        assert!((s.get("w").unwrap().values()[0] - 0.49).abs() < 1e-9);
        assert!(s.get("w").unwrap().grad().is_none());
    }

    #[test]
    fn identical_runs_are_bitwise_equal() {
        let run = || {
            let mut s = store_with_grad(vec![0.3, -0.1, 0.7], vec![0.0; 3]);
            let mut opt = AdamW::new(OptimizerConfig::default());
            for k in 0..20 {
                let g: Vec<f64> = (0..3).map(|i| ((k * 3 + i) as f64).sin()).collect();
                s.get_mut("w").unwrap().accumulate_grad(&g);
                opt.step(&mut s, linear_decay(1e-2, k, 20));
            }
            s.get("w").unwrap().values().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn decay_schedule() {
        assert_eq!(linear_decay(1.0, 0, 4), 1.0);
        assert_eq!(linear_decay(1.0, 2, 4), 0.5);
        assert_eq!(linear_decay(1.0, 9, 4), 0.0);
    }
}
