use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid AdamW settings {self:?}")))
        }
    }
}

/// First and second moments of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// AdamW state keyed by parameter stable id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub moments: BTreeMap<String, Moments>,
}

impl OptimizerState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Bitwise equality of the step count and every moment.
    pub fn bit_eq(&self, other: &OptimizerState) -> bool {
        let same = |a: &[f64], b: &[f64]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits());
        self.step == other.step
            && self.moments.len() == other.moments.len()
            && self
                .moments
                .iter()
                .zip(&other.moments)
                .all(|((ka, a), (kb, b))| ka == kb && same(&a.m, &b.m) && same(&a.v, &b.v))
    }
}

/// One AdamW update over every unfrozen parameter. The step counter advances
/// once per call. Weight decay is decoupled: `θ ← θ − lr·wd·θ` is applied
/// before the adaptive step and never enters the moments.
pub fn adamw_step(store: &mut ParamStore, state: &mut OptimizerState, cfg: &AdamWConfig) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for p in store.iter_mut() {
        if p.is_frozen() {
            continue;
        }
        let n = p.value().numel();
        let mom = state
            .moments
            .entry(p.stable_id().to_string())
            .or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
        let (theta, grad) = p.value_and_grad_mut();
        for i in 0..n {
            let g = grad[i];
            mom.m[i] = cfg.beta1 * mom.m[i] + (1.0 - cfg.beta1) * g;
            mom.v[i] = cfg.beta2 * mom.v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = mom.m[i] / bc1;
            let v_hat = mom.v[i] / bc2;
            theta[i] -= cfg.lr * cfg.weight_decay * theta[i];
            theta[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
}
