use serde::{Deserialize, Serialize};

use super::OptimError;
use crate::autodiff::{AutodiffError, GradientVector, ParameterVector};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Bias-corrected Adam update of `params` along `g`.
    pub fn step(&mut self, params: &mut ParameterVector, g: &GradientVector, lr: f64) -> Result<(), OptimError> {
        if self.m.len() != params.len() || g.len() != params.len() {
            return Err(AutodiffError::LayoutMismatch.into());
        }
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, &gi), m), v) in params
            .as_mut_slice()
            .iter_mut()
            .zip(g.as_slice())
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * gi;
            *v = self.beta2 * *v + (1.0 - self.beta2) * gi * gi;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
        Ok(())
    }
}
