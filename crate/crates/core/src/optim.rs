//! Cosine-annealed learning rate and the AdamW optimiser.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Scalar;

/// `lr_final + ½(lr_init − lr_final)(1 + cos(π·step/total))`, evaluated as
/// `lr_init·c + lr_final·(1 − c)` so both endpoints are exact.
pub fn cosine_lr(step: usize, total: usize, lr_init: f64, lr_final: f64) -> Result<f64> {
    if step > total {
        return Err(Error::StepOutOfRange { step, total });
    }
    if total == 0 {
        return Ok(lr_init);
    }
    let c = 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos());
    Ok(lr_init * c + lr_final * (1.0 - c))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub betas: [f64; 2],
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            betas: [0.9, 0.999],
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let [b1, b2] = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(Error::Config(format!("betas must lie in [0, 1), got {:?}", self.betas)));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(
                "eps must be positive and weight_decay nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// AdamW with bias-corrected moments and decoupled weight decay:
/// `θ ← θ − lr·m̂/(√v̂ + eps) − lr·wd·θ`.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub cfg: AdamWConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(cfg: AdamWConfig, store: &ParamStore<T>) -> Self {
        let zeros = || store.tensors().iter().map(|t| vec![T::zero(); t.numel()]).collect();
        Self {
            cfg,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. `grads[i]` belongs to the i-th store tensor.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[&[T]], lr: f64) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::shape(
                "adamw",
                format!("{} gradients for {} parameters", grads.len(), store.len()),
            ));
        }
        for (t, g) in store.tensors().iter().zip(grads) {
            if t.numel() != g.len() {
                return Err(Error::mismatch("adamw", t.shape(), &[g.len()]));
            }
            if !g.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite { op: "adamw gradient" });
            }
        }
        self.step += 1;
        let [b1, b2] = self.cfg.betas;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let (b1, b2) = (T::lit(b1), T::lit(b2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let (inv_bc1, inv_bc2) = (T::lit(1.0 / bc1), T::lit(1.0 / bc2));
        let eps = T::lit(self.cfg.eps);
        let lr_t = T::lit(lr);
        let decay = T::lit(lr * self.cfg.weight_decay);
        for (((t, g), m), v) in store
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((p, &gi), mi), vi) in t
                .data_mut()
                .iter_mut()
                .zip(g.iter())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = b1 * *mi + one_b1 * gi;
                *vi = b2 * *vi + one_b2 * gi * gi;
                let m_hat = *mi * inv_bc1;
                let v_hat = *vi * inv_bc2;
                *p = *p - lr_t * m_hat / (v_hat.sqrt() + eps) - decay * *p;
            }
        }
        Ok(())
    }
}
