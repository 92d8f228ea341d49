//! Rectified Adam without weight decay.

use crate::error::{Error, Result};
use crate::numcore::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RAdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl RAdamConfig {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }

    pub fn rho_inf(&self) -> f64 {
        2.0 / (1.0 - self.beta2) - 1.0
    }

    /// Length of the approximated simple moving average at step `t ≥ 1`.
    pub fn rho(&self, t: u64) -> f64 {
        let b2t = self.beta2.powf(t as f64);
        self.rho_inf() - 2.0 * t as f64 * b2t / (1.0 - b2t)
    }

    /// Variance rectification term, or `None` when the momentum step applies.
    pub fn rectification(&self, t: u64) -> Option<f64> {
        let rho = self.rho(t);
        if rho <= 4.0 {
            return None;
        }
        let inf = self.rho_inf();
        Some(((rho - 4.0) * (rho - 2.0) * inf / ((inf - 4.0) * (inf - 2.0) * rho)).sqrt())
    }
}

/// First and second moments for every tensor of one store, plus the number of
/// updates applied so far.
#[derive(Clone, Debug, PartialEq)]
pub struct RAdamState {
    pub t: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl RAdamState {
    pub fn for_store(store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|(_, p)| vec![0.0; p.numel()]).collect::<Vec<_>>();
        Self {
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    fn check_layout(&self, store: &ParamStore) -> Result<()> {
        let ok = self.m.len() == store.len()
            && self.v.len() == store.len()
            && store
                .iter()
                .all(|(id, p)| self.m[id.0].len() == p.numel() && self.v[id.0].len() == p.numel());
        if ok {
            Ok(())
        } else {
            Err(Error::shape("optimizer state does not match the parameter store"))
        }
    }
}

/// One update of a single tensor at step `t` (already incremented).
pub fn radam_update(cfg: &RAdamConfig, t: u64, param: &mut [f32], grad: &[f32], m: &mut [f32], v: &mut [f32]) {
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let bc1 = 1.0 - b1.powf(t as f64);
    let bc2 = 1.0 - b2.powf(t as f64);
    let rect = cfg.rectification(t);
    for i in 0..param.len() {
        let g = grad[i] as f64;
        let mi = b1 * m[i] as f64 + (1.0 - b1) * g;
        let vi = b2 * v[i] as f64 + (1.0 - b2) * g * g;
        m[i] = mi as f32;
        v[i] = vi as f32;
        let m_hat = mi / bc1;
        let step = match rect {
            Some(r) => cfg.lr * r * m_hat / ((vi / bc2).sqrt() + cfg.eps),
            None => cfg.lr * m_hat,
        };
        param[i] = (param[i] as f64 - step) as f32;
    }
}

/// Applies the gradients held in `store` to every trainable tensor. Nothing is
/// modified when any gradient is non-finite.
pub fn radam_step(store: &mut ParamStore, state: &mut RAdamState, cfg: &RAdamConfig) -> Result<()> {
    state.check_layout(store)?;
    if let Some((_, p)) = store.iter().find(|(_, p)| p.trainable && p.grad.iter().any(|g| !g.is_finite())) {
        return Err(Error::NonFinite(format!("gradient of {}", p.name)));
    }
    state.t += 1;
    let t = state.t;
    for (i, p) in store.iter_mut().enumerate() {
        if p.trainable {
            radam_update(cfg, t, &mut p.data, &p.grad, &mut state.m[i], &mut state.v[i]);
        }
    }
    Ok(())
}
