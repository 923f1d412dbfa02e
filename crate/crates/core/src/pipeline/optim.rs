//! Adaptive-moment gradient descent.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment state for one flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub params: AdamParams,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(params: AdamParams, len: usize) -> Self {
        Self {
            params,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One bias-corrected update of `x` with per-coordinate step sizes
    /// `lr[i]` (a zero rate leaves the coordinate and its moments untouched).
    pub fn step_with_rates(&mut self, x: &mut [f64], grad: &[f64], lr: &[f64]) {
        assert_eq!(x.len(), self.m.len());
        assert_eq!(grad.len(), x.len());
        self.t += 1;
        let AdamParams {
            beta1, beta2, eps, ..
        } = self.params;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for i in 0..x.len() {
            if lr[i] == 0.0 {
                continue;
            }
            let g = grad[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            x[i] -= lr[i] * mh / (vh.sqrt() + eps);
        }
    }

    pub fn step(&mut self, x: &mut [f64], grad: &[f64], lr: f64) {
        let rates = vec![lr; x.len()];
        self.step_with_rates(x, grad, &rates);
    }
}
