use alloc::format;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::params::ParamStore;
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
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

/// Bias-corrected Adam. Moments are kept in `f64` whatever the parameter
/// type.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub cfg: AdamConfig,
    step: u64,
    m: ParamStore<f64>,
    v: ParamStore<f64>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self { cfg, step: 0, m: ParamStore::new(), v: ParamStore::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every parameter that has a gradient in `grads`.
    pub fn step<T: Real>(&mut self, params: &mut ParamStore<T>, grads: &ParamStore<T>, lr: f64) -> Result<()> {
        for (name, g) in grads.iter() {
            let p = params.get(name)?;
            if p.shape() != g.shape() {
                return Err(shape_err("adam_step", format!("`{name}`: param {:?}, grad {:?}", p.shape(), g.shape())));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - libm::pow(beta1, t as f64);
        let c2 = 1.0 - libm::pow(beta2, t as f64);
        for (name, g) in grads.iter() {
            if !self.m.contains(name) {
                self.m.insert(name, crate::Tensor::zeros(g.shape()));
                self.v.insert(name, crate::Tensor::zeros(g.shape()));
            }
            let m = self.m.get_mut(name)?.data_mut();
            let v = self.v.get_mut(name)?.data_mut();
            let p = params.get_mut(name)?.data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i].as_f64();
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let update = lr * (m[i] / c1) / (libm::sqrt(v[i] / c2) + eps);
                p[i] = T::from_f64(p[i].as_f64() - update);
            }
        }
        Ok(())
    }
}

/// `lr0 · (1 − iter/total)^power`.
pub fn poly_lr(iter: usize, total: usize, lr0: f64, power: f64) -> Result<f64> {
    if iter > total {
        return Err(Error::IterOutOfRange { iter, total });
    }
    if total == 0 {
        return Ok(lr0);
    }
    Ok(lr0 * libm::pow(1.0 - iter as f64 / total as f64, power))
}

/// Rescale `grads` so their global L2 norm is at most `max_norm`. Returns
/// the norm before clipping.
pub fn clip_grad_norm<T: Real>(grads: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let norm = libm::sqrt(grads.iter().flat_map(|(_, g)| g.data()).map(|v| v.as_f64() * v.as_f64()).sum::<f64>());
    if norm > max_norm && norm > 0.0 {
        grads.scale(T::from_f64(max_norm / norm));
    }
    norm
}
