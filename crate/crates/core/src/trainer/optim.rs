//! AdamW with decoupled weight decay.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.2 }
    }
}

/// How the optimizer treats one parameter entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    /// Adaptive step plus weight decay.
    Decayed,
    /// Adaptive step only (temperatures).
    Plain,
    /// Never updated.
    Frozen,
}

/// First and second moments plus the number of steps taken.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl Moments {
    pub fn zeros(len: usize) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len], step: 0 }
    }
}

/// One AdamW update: `θ ← θ − lr·wd·θ` on decayed entries, then the
/// bias-corrected adaptive step. Increments `moments.step`.
pub fn optimizer_step(
    params: &mut [f64],
    grads: &[f64],
    roles: &[ParamRole],
    moments: &mut Moments,
    lr: f64,
    hp: &AdamW,
) -> Result<()> {
    let n = params.len();
    for (name, len) in [("grads", grads.len()), ("roles", roles.len()), ("moments", moments.m.len())] {
        if len != n || moments.v.len() != n {
            return Err(Error::shape(name, (n, 1), (len, 1)));
        }
    }
    moments.step += 1;
    let t = moments.step as i32;
    let c1 = 1.0 - math::powi(hp.beta1, t);
    let c2 = 1.0 - math::powi(hp.beta2, t);
    for i in 0..n {
        if roles[i] == ParamRole::Frozen {
            continue;
        }
        if roles[i] == ParamRole::Decayed {
            params[i] -= lr * hp.weight_decay * params[i];
        }
        let g = grads[i];
        moments.m[i] = hp.beta1 * moments.m[i] + (1.0 - hp.beta1) * g;
        moments.v[i] = hp.beta2 * moments.v[i] + (1.0 - hp.beta2) * g * g;
        let m_hat = moments.m[i] / c1;
        let v_hat = moments.v[i] / c2;
        params[i] -= lr * m_hat / (math::sqrt(v_hat) + hp.eps);
    }
    Ok(())
}
