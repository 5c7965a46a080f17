use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use super::Param;
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adaptive-moment optimizer. Moment buffers are matched to parameters by
/// visit order, which is fixed for a given model structure.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub first: Vec<ArrayD<T>>,
    pub second: Vec<ArrayD<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, first: Vec::new(), second: Vec::new() }
    }

    /// Starts a step; returns the bias-corrected step size for `lr`.
    pub fn begin_step(&mut self, lr: f64) -> f64 {
        self.step += 1;
        let t = self.step as i32;
        lr * (1.0 - self.config.beta2.powi(t)).sqrt() / (1.0 - self.config.beta1.powi(t))
    }

    /// Updates the `index`-th parameter; call once per parameter per step, in visit order.
    pub fn update(&mut self, index: usize, param: &mut Param<T>, step_size: f64) {
        if index == self.first.len() {
            self.first.push(ArrayD::zeros(param.value.raw_dim()));
            self.second.push(ArrayD::zeros(param.value.raw_dim()));
        }
        let b1 = T::of(self.config.beta1);
        let b2 = T::of(self.config.beta2);
        let eps = T::of(self.config.eps);
        let step = T::of(step_size);
        let one = T::one();
        ndarray::Zip::from(&mut param.value)
            .and(&param.grad)
            .and(&mut self.first[index])
            .and(&mut self.second[index])
            .for_each(|w, &g, m, v| {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                *w -= step * *m / (v.sqrt() + eps);
            });
    }
}
