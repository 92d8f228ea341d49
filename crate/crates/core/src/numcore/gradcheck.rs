//! Analytic-vs-finite-difference gradient comparison.
//!
//! Both sides run in `f64`: the reverse pass gives the analytic gradient,
//! and the central differences rebuild the loss with one parameter element
//! offset by `±step`.

use super::{Graph, ParamId, ParamStore, Real, Var};
use crate::error::{Error, Result};

/// A scalar loss that can be rebuilt at any precision.
pub trait LossFn {
    fn build<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore) -> Result<Var>;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tolerance {
    pub rel: f64,
    pub abs: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Self {
            rel: 1e-3,
            abs: 1e-5,
        }
    }
}

impl Tolerance {
    pub fn accepts(&self, analytic: f64, numeric: f64) -> bool {
        let abs = (analytic - numeric).abs();
        abs <= self.abs || abs <= self.rel * analytic.abs().max(numeric.abs())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOptions {
    pub step: f64,
    pub tolerance: Tolerance,
    /// Negates the analytic gradient of the first checked parameter. Exists so
    /// the harness itself can be shown to fail.
    pub flip_first_sign: bool,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-6,
            tolerance: Tolerance::default(),
            flip_first_sign: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub numel: usize,
    pub max_abs_err: f64,
    /// Largest relative error among elements outside the absolute tolerance.
    pub max_rel_err: f64,
    pub failures: usize,
    pub worst_index: usize,
}

impl ParamCheck {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

fn analytic_grads<L: LossFn>(loss: &L, store: &ParamStore, ids: &[ParamId]) -> Result<Vec<Vec<f64>>> {
    let mut g = Graph::<f64>::new();
    let l = loss.build(&mut g, store)?;
    let grads = g.backward(l)?;
    Ok(ids
        .iter()
        .map(|&id| match grads.get(id) {
            Some(v) => v.to_vec(),
            None => vec![0.0; store.get(id).numel()],
        })
        .collect())
}

fn shadow_loss<L: LossFn>(loss: &L, store: &ParamStore, id: ParamId, index: usize, delta: f64) -> Result<f64> {
    let mut g = Graph::<f64>::new();
    g.set_perturbation(id, index, delta);
    let l = loss.build(&mut g, store)?;
    let v = g.scalar(l);
    if !v.is_finite() {
        return Err(Error::NonFinite(format!(
            "shadow loss with {} [{index}] offset by {delta}",
            store.get(id).name
        )));
    }
    Ok(v)
}

/// Compares every element of the selected parameters.
pub fn check_params<L: LossFn>(
    loss: &L,
    store: &ParamStore,
    ids: &[ParamId],
    opts: &CheckOptions,
) -> Result<Vec<ParamCheck>> {
    let mut analytic = analytic_grads(loss, store, ids)?;
    if opts.flip_first_sign {
        if let Some(first) = analytic.first_mut() {
            first.iter_mut().for_each(|v| *v = -*v);
        }
    }
    let mut reports = Vec::with_capacity(ids.len());
    for (&id, an) in ids.iter().zip(&analytic) {
        let p = store.get(id);
        let mut report = ParamCheck {
            name: p.name.clone(),
            numel: p.numel(),
            max_abs_err: 0.0,
            max_rel_err: 0.0,
            failures: 0,
            worst_index: 0,
        };
        let mut worst_excess = f64::NEG_INFINITY;
        for (i, &a) in an.iter().enumerate() {
            let plus = shadow_loss(loss, store, id, i, opts.step)?;
            let minus = shadow_loss(loss, store, id, i, -opts.step)?;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let abs = (a - numeric).abs();
            let scale = a.abs().max(numeric.abs());
            let rel = if scale > 0.0 { abs / scale } else { 0.0 };
            report.max_abs_err = report.max_abs_err.max(abs);
            if abs > opts.tolerance.abs {
                report.max_rel_err = report.max_rel_err.max(rel);
            }
            if !opts.tolerance.accepts(a, numeric) {
                report.failures += 1;
            }
            let excess = abs - opts.tolerance.abs.max(opts.tolerance.rel * scale);
            if excess > worst_excess {
                worst_excess = excess;
                report.worst_index = i;
            }
        }
        reports.push(report);
    }
    Ok(reports)
}
