//! First-order optimizers over flat parameter vectors.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(len: usize, cfg: AdamConfig) -> Self {
        Self {
            cfg,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        debug_assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let AdamConfig {
            beta1,
            beta2,
            epsilon,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t);
        let bc2 = 1.0 - beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
        }
    }
}

/// SGD with classical momentum.
#[derive(Debug, Clone)]
pub struct Sgd {
    momentum: f64,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(len: usize, momentum: f64) -> Self {
        Self {
            momentum,
            velocity: vec![0.0; len],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        for ((p, v), g) in params.iter_mut().zip(&mut self.velocity).zip(grads) {
            *v = self.momentum * *v + g;
            *p -= lr * *v;
        }
    }
}

/// `base * 0.5^(epoch / every)`; `every == 0` disables decay.
pub fn halving_schedule(base: f64, epoch: usize, every: usize) -> f64 {
    if every == 0 {
        return base;
    }
    base * 0.5f64.powi((epoch / every) as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_halves_every_block() {
        assert_eq!(halving_schedule(0.01, 0, 10), 0.01);
        assert_eq!(halving_schedule(0.01, 9, 10), 0.01);
        assert_eq!(halving_schedule(0.01, 10, 10), 0.005);
        assert_eq!(halving_schedule(0.01, 25, 10), 0.0025);
        assert_eq!(halving_schedule(0.01, 25, 0), 0.01);
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        // bias-corrected first step moves by lr * sign(g)
        let mut adam = Adam::new(2, AdamConfig::default());
        let mut p = vec![1.0, 1.0];
        adam.step(&mut p, &[0.3, -40.0], 0.01);
        assert!((p[0] - 0.99).abs() < 1e-6);
        assert!((p[1] - 1.01).abs() < 1e-6);
    }

    #[test]
    fn adam_minimises_quadratic() {
        let mut adam = Adam::new(1, AdamConfig::default());
        let mut x = vec![5.0];
        for _ in 0..2000 {
            let g = [2.0 * (x[0] - 1.5)];
            adam.step(&mut x, &g, 0.05);
        }
        assert!((x[0] - 1.5).abs() < 1e-3);
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let mut sgd = Sgd::new(1, 0.9);
        let mut p = vec![0.0];
        sgd.step(&mut p, &[1.0], 0.1);
        sgd.step(&mut p, &[1.0], 0.1);
        assert!((p[0] + 0.1 + 0.19).abs() < 1e-12);
    }
}
