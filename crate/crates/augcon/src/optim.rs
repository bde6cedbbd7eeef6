//! Adam with bias correction, the only optimizer here.
//!
//! State is kept outside the parameters as flat moment buffers, one pair
//! per parameter tensor, in the same order the trainer passes updates.

use serde::{Deserialize, Serialize};

use crate::real::Real;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::InvalidConfig(format!("lr must be positive, got {}", self.lr)));
        }
        for (name, beta) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&beta) {
                return Err(Error::InvalidConfig(format!("{name} must be in [0, 1), got {beta}")));
            }
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(Error::InvalidConfig(format!("eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

/// First and second moment estimates plus the shared step counter.
#[derive(Debug, Clone)]
pub struct AdamState<F: Real> {
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
    t: u64,
}

impl<F: Real> AdamState<F> {
    /// Zeroed moments for parameter tensors of the given element counts.
    pub fn for_sizes(sizes: &[usize]) -> Self {
        Self {
            m: sizes.iter().map(|&n| vec![F::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![F::zero(); n]).collect(),
            t: 0,
        }
    }

    /// Number of completed steps.
    pub fn steps(&self) -> u64 {
        self.t
    }
}

/// One Adam update over every parameter group.
///
/// `updates` is `(name, parameter values, gradient)` per group, in the same
/// order as the state was built. If any gradient coordinate is non-finite
/// the step aborts with the offending group's name before touching any
/// parameter or moment.
pub fn adam_step<F: Real>(
    cfg: &AdamConfig,
    state: &mut AdamState<F>,
    updates: &mut [(&str, &mut [F], &[F])],
) -> Result<()> {
    if updates.len() != state.m.len() {
        return Err(Error::LengthMismatch(updates.len(), state.m.len()));
    }
    for (i, (name, param, grad)) in updates.iter().enumerate() {
        if param.len() != grad.len() || param.len() != state.m[i].len() {
            return Err(Error::LengthMismatch(param.len(), state.m[i].len()));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient((*name).to_string()));
        }
    }

    state.t += 1;
    let lr = F::from_f64(cfg.lr);
    let b1 = F::from_f64(cfg.beta1);
    let b2 = F::from_f64(cfg.beta2);
    let eps = F::from_f64(cfg.eps);
    let one = F::one();
    // Bias corrections in f64: beta^t underflows gracefully there.
    let bc1 = F::from_f64(1.0 - cfg.beta1.powi(state.t as i32));
    let bc2 = F::from_f64(1.0 - cfg.beta2.powi(state.t as i32));

    for (i, (_, param, grad)) in updates.iter_mut().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..param.len() {
            let g = grad[j];
            m[j] = b1 * m[j] + (one - b1) * g;
            v[j] = b2 * v[j] + (one - b2) * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            param[j] = param[j] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
