//! Learning-rate schedule, global-norm clipping and AdamW.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

/// Linear warmup from 0 to `peak` over `warmup` steps, then cosine decay to
/// `final_factor · peak` at `total`.
pub fn cosine_lr(step: usize, peak: f64, warmup: usize, total: usize, final_factor: f64) -> f64 {
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup);
    let progress = if span == 0 {
        1.0
    } else {
        ((step - warmup) as f64 / span as f64).min(1.0)
    };
    peak * (final_factor + (1.0 - final_factor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Scales every gradient by `max_norm / ‖g‖` when the global norm exceeds
/// `max_norm`. Returns the factor applied (1 when untouched).
pub fn clip_global_norm(params: &mut ParamSet, max_norm: f64) -> f64 {
    let norm = params.grad_norm();
    if norm <= max_norm || norm == 0.0 {
        return 1.0;
    }
    let factor = max_norm / norm;
    for p in params.iter_mut() {
        p.grad.scale_in_place(factor);
    }
    factor
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Skip decay on norm scales, γ and embeddings.
    pub exempt_norms: bool,
}

impl Default for AdamWHyper {
    fn default() -> Self {
        AdamWHyper {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
            exempt_norms: false,
        }
    }
}

fn decay_exempt(name: &str) -> bool {
    name.ends_with(".scale") || name.ends_with(".gamma") || name.starts_with("embed.")
}

/// AdamW with decoupled weight decay. Frozen parameters are left alone.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub hyper: AdamWHyper,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamW {
    pub fn new(params: &ParamSet, hyper: AdamWHyper) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        AdamW {
            hyper,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update at learning rate `lr`. Fails without touching
    /// anything if a gradient is not finite.
    pub fn step(&mut self, params: &mut ParamSet, lr: f64) -> Result<()> {
        if self.m.len() != params.len() {
            return Err(Error::Contract("optimizer state does not match the parameter set".into()));
        }
        if let Some(p) = params.iter().find(|p| !p.grad.is_finite()) {
            return Err(Error::diverged(None, format!("non-finite gradient in {}", p.name)));
        }
        self.t += 1;
        let h = self.hyper;
        let bc1 = 1.0 - h.beta1.powi(self.t as i32);
        let bc2 = 1.0 - h.beta2.powi(self.t as i32);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if !p.trainable {
                continue;
            }
            let wd = if h.exempt_norms && decay_exempt(&p.name) { 0.0 } else { h.weight_decay };
            let g = p.grad.data();
            for (((theta, g), m), v) in p.value.data_mut().iter_mut().zip(g).zip(m.data_mut()).zip(v.data_mut()) {
                *m = h.beta1 * *m + (1.0 - h.beta1) * g;
                *v = h.beta2 * *v + (1.0 - h.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *theta -= lr * wd * *theta + lr * m_hat / (v_hat.sqrt() + h.eps);
            }
        }
        Ok(())
    }
}
