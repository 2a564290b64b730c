//! Best-of-K displacement errors.

use crate::data::Point;
use crate::error::{Error, Result};
use crate::math;

fn dist(a: Point, b: Point) -> f64 {
    math::hypot(a[0] - b[0], a[1] - b[1])
}

/// `(ADE, FDE)` of one trajectory.
pub fn displacement(sample: &[Point], truth: &[Point]) -> Result<(f64, f64)> {
    if sample.len() != truth.len() {
        return Err(Error::Horizon(truth.len(), sample.len()));
    }
    if truth.is_empty() {
        return Err(Error::Horizon(1, 0));
    }
    let total: f64 = sample.iter().zip(truth).map(|(&a, &b)| dist(a, b)).sum();
    let n = truth.len();
    Ok((total / n as f64, dist(sample[n - 1], truth[n - 1])))
}

/// Minimum ADE and minimum FDE over the samples, each minimized on its own.
pub fn ade_fde(samples: &[alloc::vec::Vec<Point>], truth: &[Point]) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::Config("best-of-K needs at least one sample".into()));
    }
    let mut best = (f64::INFINITY, f64::INFINITY);
    for s in samples {
        let (a, f) = displacement(s, truth)?;
        best.0 = best.0.min(a);
        best.1 = best.1.min(f);
    }
    Ok(best)
}

/// ADE and FDE of the single sample with the smallest ADE.
pub fn ade_fde_joint(samples: &[alloc::vec::Vec<Point>], truth: &[Point]) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::Config("best-of-K needs at least one sample".into()));
    }
    let mut best = (f64::INFINITY, f64::INFINITY);
    for s in samples {
        let d = displacement(s, truth)?;
        if d.0 < best.0 {
            best = d;
        }
    }
    Ok(best)
}
