//! Finite-difference verification of tape gradients.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+h) - f(x-h)) / 2h`
    Central,
    /// Fourth-order central stencil over `x +- h, x +- 2h`.
    FivePoint,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FdOptions {
    pub step: f64,
    pub tolerance: f64,
    pub stencil: Stencil,
    /// Check at most this many evenly spaced entries per parameter tensor.
    pub max_entries: Option<usize>,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            stencil: Stencil::Central,
            max_entries: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FdEntry {
    pub param: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    pub entries: Vec<FdEntry>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// `|a - b| / max(|a|, |b|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn entry_indices(n: usize, max: Option<usize>) -> Vec<usize> {
    match max {
        Some(m) if m < n => (0..m).map(|i| i * n / m).collect(),
        _ => (0..n).collect(),
    }
}

fn stencil_derivative(
    x0: f64,
    h: f64,
    stencil: Stencil,
    mut eval: impl FnMut(f64) -> Result<f64>,
) -> Result<f64> {
    Ok(match stencil {
        Stencil::Central => (eval(x0 + h)? - eval(x0 - h)?) / (2.0 * h),
        Stencil::FivePoint => {
            let p1 = eval(x0 + h)?;
            let m1 = eval(x0 - h)?;
            let p2 = eval(x0 + 2.0 * h)?;
            let m2 = eval(x0 - 2.0 * h)?;
            (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h)
        }
    })
}

fn validate(opts: &FdOptions) -> Result<()> {
    if !(opts.step > 0.0 && opts.step <= 1e-3) {
        return Err(Error::Config(
            "finite-difference step must lie in (0, 1e-3]".into(),
        ));
    }
    Ok(())
}

/// Compares tape gradients of every trainable parameter against finite
/// differences. `loss` builds a fresh tape from the store and returns it
/// with its scalar output.
pub fn finite_diff_check<F>(store: &ParamStore, mut loss: F, opts: FdOptions) -> Result<FdReport>
where
    F: FnMut(&ParamStore) -> Result<(Tape, Var)>,
{
    validate(&opts)?;
    let (tape, out) = loss(store)?;
    let base = tape.value(out).item()?;
    if !base.is_finite() {
        return Err(Error::NonFinite("loss at unperturbed parameters".into()));
    }
    let grads = tape.backward(out)?;
    let ids: Vec<ParamId> = store.ids().filter(|&id| store.is_trainable(id)).collect();
    let mut work = store.clone();
    let mut entries = Vec::new();
    for id in ids {
        let n = store.get(id).numel();
        let analytic = grads
            .param(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(store.get(id).shape()));
        let mut worst: f64 = 0.0;
        let idx = entry_indices(n, opts.max_entries);
        for &j in &idx {
            let x0 = store.get(id).data()[j];
            let fd = stencil_derivative(x0, opts.step, opts.stencil, |x| {
                work.get_mut(id).data_mut()[j] = x;
                let (t, o) = loss(&work)?;
                let v = t.value(o).item()?;
                if !v.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        param: store.name(id).to_string(),
                        index: j,
                        delta: x - x0,
                    });
                }
                Ok(v)
            });
            work.get_mut(id).data_mut()[j] = x0;
            worst = worst.max(relative_error(analytic.data()[j], fd?));
        }
        entries.push(FdEntry {
            param: store.name(id).to_string(),
            checked: idx.len(),
            max_rel_error: worst,
        });
    }
    let max_rel_error = entries.iter().fold(0.0, |m: f64, e| m.max(e.max_rel_error));
    Ok(FdReport {
        passed: max_rel_error < opts.tolerance,
        entries,
        max_rel_error,
        tolerance: opts.tolerance,
    })
}

/// Finite-difference check of a gradient with respect to an input tensor.
pub fn finite_diff_input<F>(
    x: &Tensor,
    analytic: &Tensor,
    mut f: F,
    opts: FdOptions,
) -> Result<FdReport>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    validate(&opts)?;
    let mut work = x.clone();
    let mut worst: f64 = 0.0;
    let idx = entry_indices(x.numel(), opts.max_entries);
    for &j in &idx {
        let x0 = x.data()[j];
        let fd = stencil_derivative(x0, opts.step, opts.stencil, |v| {
            work.data_mut()[j] = v;
            let y = f(&work)?;
            if !y.is_finite() {
                return Err(Error::NonFiniteLoss {
                    param: "input".into(),
                    index: j,
                    delta: v - x0,
                });
            }
            Ok(y)
        });
        work.data_mut()[j] = x0;
        worst = worst.max(relative_error(analytic.data()[j], fd?));
    }
    Ok(FdReport {
        entries: alloc::vec![FdEntry {
            param: "input".into(),
            checked: idx.len(),
            max_rel_error: worst,
        }],
        max_rel_error: worst,
        tolerance: opts.tolerance,
        passed: worst < opts.tolerance,
    })
}
