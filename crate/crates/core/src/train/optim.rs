//! Adam with bias-corrected moments and global-norm clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
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

/// Optimizer state. Moments are stored already bias-corrected and kept in
/// `f64` regardless of the parameter precision.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    step: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<T: Scalar>(params: &ParamStore<T>, cfg: AdamConfig) -> Self {
        let zeros = |i: usize| vec![0.0; params.tensor(i).len()];
        Self { cfg, step: 0, m: (0..params.len()).map(zeros).collect(), v: (0..params.len()).map(zeros).collect() }
    }

    /// Number of updates applied so far.
    pub fn step(&self) -> usize {
        self.step
    }

    /// Bias-corrected first and second moments of parameter `i`.
    pub fn moments(&self, i: usize) -> (&[f64], &[f64]) {
        (&self.m[i], &self.v[i])
    }

    /// Applies one update with learning rate `lr`. `grads[i]` belongs to
    /// store position `i`; `None` leaves the parameter untouched.
    ///
    /// The corrected moments follow `m̂_t = m̂_{t-1} + a_t (g - m̂_{t-1})`
    /// with `a_t = (1 - β) / (1 - β^t)`, which equals the usual
    /// `m_t / (1 - β^t)` and is exact at the first step.
    pub fn update<T: Scalar>(&mut self, params: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::InvalidArgument(format!("{} gradients for {} parameters", grads.len(), params.len())));
        }
        self.step += 1;
        let t = self.step as i32;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let a1 = (1.0 - beta1) / (1.0 - beta1.powi(t));
        let a2 = (1.0 - beta2) / (1.0 - beta2.powi(t));
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            if !params.is_trainable(i) {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = params.tensor_mut(i).data_mut();
            if g.len() != p.len() {
                return Err(Error::InvalidArgument(format!("gradient {i} has {} entries, parameter has {}", g.len(), p.len())));
            }
            for (k, gk) in g.data().iter().enumerate() {
                let gk = gk.f64();
                m[k] += a1 * (gk - m[k]);
                v[k] += a2 * (gk * gk - v[k]);
                let delta = lr * m[k] / (v[k].sqrt() + eps);
                p[k] = T::c(p[k].f64() - delta);
            }
        }
        Ok(())
    }
}

/// L2 norm over every present gradient.
pub fn global_norm<T: Scalar>(grads: &[Option<Tensor<T>>]) -> f64 {
    grads.iter().flatten().flat_map(|g| g.data()).map(|x| x.f64() * x.f64()).sum::<f64>().sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`; returns
/// the norm before clipping. Non-finite gradients are an error naming the
/// first offending parameter.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Option<Tensor<T>>], names: &[String], max_norm: Option<f64>) -> Result<f64> {
    for (g, name) in grads.iter().zip(names) {
        if let Some(g) = g {
            if !g.is_finite() {
                return Err(Error::NonFinite { op: format!("gradient of {name}") });
            }
        }
    }
    let norm = global_norm(grads);
    if !norm.is_finite() {
        return Err(Error::NonFinite { op: "gradient norm".into() });
    }
    if let Some(max) = max_norm {
        if norm > max {
            let s = max / norm;
            for g in grads.iter_mut().flatten() {
                g.data_mut().iter_mut().for_each(|x| *x = T::c(x.f64() * s));
            }
        }
    }
    Ok(norm)
}
