//! Adam over a [`Params`] set.

use crate::model::Params;

#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    /// Standard moment decays (0.9, 0.999) and eps 1e-8.
    pub fn new(params: &Params) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .tensors()
            .iter()
            .map(|(_, _, v)| vec![0.0; v.len()])
            .collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update. Tensors whose name fails `trainable` are skipped.
    pub fn step(&mut self, params: &mut Params, grads: &Params, lr: f64, trainable: impl Fn(&str) -> bool) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let grads = grads.tensors();
        for (k, (name, values)) in params.tensors_mut().into_iter().enumerate() {
            if !trainable(&name) {
                continue;
            }
            let g = grads[k].2;
            let (m, v) = (&mut self.first[k], &mut self.second[k]);
            for i in 0..values.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                values[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelConfig};

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let cfg = ModelConfig::default();
        let mut params = init_params(&cfg, 0);
        let before = params.clone();
        let grads = params.zeros_like();
        let mut adam = Adam::new(&params);
        for _ in 0..3 {
            adam.step(&mut params, &grads, 1e-2, |_| true);
        }
        assert_eq!(params, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let cfg = ModelConfig {
            n_layers: 0,
            ..ModelConfig::default()
        };
        let mut params = init_params(&cfg, 0);
        let before = params.clone();
        let mut grads = params.zeros_like();
        grads.f1.bias[0] = 3.0;
        grads.f1.bias[1] = -0.5;
        let mut adam = Adam::new(&params);
        adam.step(&mut params, &grads, 1e-3, |_| true);
        assert!((params.f1.bias[0] - (before.f1.bias[0] - 1e-3)).abs() < 1e-9);
        assert!((params.f1.bias[1] - (before.f1.bias[1] + 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn frozen_tensors_are_skipped() {
        let cfg = ModelConfig::default();
        let mut params = init_params(&cfg, 1);
        let before = params.clone();
        let mut grads = params.zeros_like();
        grads.fill(1.0);
        let mut adam = Adam::new(&params);
        adam.step(&mut params, &grads, 1e-3, |n| n.starts_with("f1."));
        assert_eq!(params.f0, before.f0);
        assert_eq!(params.blocks, before.blocks);
        assert_ne!(params.f1, before.f1);
    }
}
