//! Adam with bias correction, operating over a whole [`ParamSet`].

use crate::error::{Error, Result};
use crate::nncore::tape::ParamSet;
use crate::nncore::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates, one pair per parameter, plus the shared
/// step counter.
pub struct AdamState {
    cfg: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet, cfg: AdamConfig) -> AdamState {
        let m = params
            .iter()
            .map(|p| Tensor::zeros(p.value.rows(), p.value.cols()))
            .collect();
        let v = params
            .iter()
            .map(|p| Tensor::zeros(p.value.rows(), p.value.cols()))
            .collect();
        AdamState {
            cfg,
            m,
            v,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update from the gradients currently held in `params`.
    ///
    ///   m ← β₁m + (1−β₁)g        m̂ = m/(1−β₁ᵗ)
    ///   v ← β₂v + (1−β₂)g²       v̂ = v/(1−β₂ᵗ)
    ///   p ← p − lr·m̂/(√v̂ + ε)
    ///
    /// A NaN/Inf gradient aborts with the parameter's name before anything
    /// is mutated.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        for p in params.iter() {
            if p.grad.any_nan() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient in parameter `{}`",
                    p.name
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (idx, p) in params.iter_mut().enumerate() {
            let m = self.m[idx].as_mut_slice();
            let v = self.v[idx].as_mut_slice();
            let vals = p.value.as_mut_slice();
            let grads = p.grad.as_slice();
            for i in 0..vals.len() {
                let g = grads[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                vals[i] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}
