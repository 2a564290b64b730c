//! Per-step bivariate Gaussians over a future trajectory and their
//! unconstrained parameterization.
//!
//! Each step is stored unconstrained as `(mu_x, mu_y, log sigma_x,
//! log sigma_y, atanh rho)`, flattened step-major: entry `t * 5 + k`.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::Point;
use crate::error::{Error, Result};
use crate::math;
use crate::rng::NormalStream;
use crate::tape::{Tape, Var};

pub const PARAMS_PER_STEP: usize = 5;
pub const SIGMA_FLOOR: f64 = 1e-6;
/// Upper clamp on `log sigma` inside [`from_unconstrained`].
pub const LOG_SIGMA_MAX: f64 = 20.0;
/// Clamp on `atanh rho`; keeps `1 - rho^2` representable.
pub const ATANH_RHO_MAX: f64 = 10.0;

const LOG_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepGaussian {
    pub mu: Point,
    pub sigma: Point,
    pub rho: f64,
}

impl StepGaussian {
    pub const STANDARD: Self = Self {
        mu: [0.0, 0.0],
        sigma: [1.0, 1.0],
        rho: 0.0,
    };

    pub fn is_valid(&self) -> bool {
        self.mu.iter().all(|v| v.is_finite())
            && self.sigma.iter().all(|&s| s > 0.0 && s.is_finite())
            && self.rho > -1.0
            && self.rho < 1.0
    }

    /// Negative log-density of `p`.
    pub fn nll(&self, p: Point) -> f64 {
        let zx = (p[0] - self.mu[0]) / self.sigma[0];
        let zy = (p[1] - self.mu[1]) / self.sigma[1];
        let omr = 1.0 - self.rho * self.rho;
        LOG_2PI
            + math::ln(self.sigma[0])
            + math::ln(self.sigma[1])
            + 0.5 * math::ln(omr)
            + (zx * zx - 2.0 * self.rho * zx * zy + zy * zy) / (2.0 * omr)
    }

    pub fn density(&self, p: Point) -> f64 {
        math::exp(-self.nll(p))
    }

    /// Differential entropy in nats.
    pub fn entropy(&self) -> f64 {
        1.0 + LOG_2PI
            + math::ln(self.sigma[0])
            + math::ln(self.sigma[1])
            + 0.5 * math::ln(1.0 - self.rho * self.rho)
    }

    /// Correlated reparameterization of two standard normals.
    pub fn transform(&self, z1: f64, z2: f64) -> Point {
        [
            self.mu[0] + self.sigma[0] * z1,
            self.mu[1]
                + self.sigma[1] * (self.rho * z1 + math::sqrt(1.0 - self.rho * self.rho) * z2),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianSeq {
    steps: Vec<StepGaussian>,
}

impl GaussianSeq {
    pub fn new(steps: Vec<StepGaussian>) -> Result<Self> {
        if let Some(i) = steps.iter().position(|s| !s.is_valid()) {
            return Err(Error::InvalidDistribution(format!(
                "step {i}: {:?}",
                steps[i]
            )));
        }
        Ok(Self { steps })
    }

    /// `N(0, I)` at every step.
    pub fn standard(len: usize) -> Self {
        Self {
            steps: alloc::vec![StepGaussian::STANDARD; len],
        }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn steps(&self) -> &[StepGaussian] {
        &self.steps
    }

    pub fn means(&self) -> Vec<Point> {
        self.steps.iter().map(|s| s.mu).collect()
    }

    /// Summed negative log-likelihood of `truth`.
    pub fn nll(&self, truth: &[Point]) -> Result<f64> {
        if truth.len() != self.len() {
            return Err(Error::Horizon(self.len(), truth.len()));
        }
        Ok(self.steps.iter().zip(truth).map(|(s, &p)| s.nll(p)).sum())
    }

    pub fn entropy(&self) -> f64 {
        self.steps.iter().map(StepGaussian::entropy).sum()
    }

    /// `k` trajectories, steps drawn independently.
    pub fn sample(&self, k: usize, rng: &mut NormalStream) -> Vec<Vec<Point>> {
        (0..k)
            .map(|_| {
                self.steps
                    .iter()
                    .map(|s| {
                        let z1 = rng.next_normal();
                        let z2 = rng.next_normal();
                        s.transform(z1, z2)
                    })
                    .collect()
            })
            .collect()
    }
}

/// Flat `t_future * 5` vector; see the module docs for the layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnconstrainedParams(pub Vec<f64>);

pub fn to_unconstrained(dist: &GaussianSeq) -> UnconstrainedParams {
    let mut v = Vec::with_capacity(dist.len() * PARAMS_PER_STEP);
    for s in dist.steps() {
        v.extend_from_slice(&[
            s.mu[0],
            s.mu[1],
            math::ln(s.sigma[0]),
            math::ln(s.sigma[1]),
            math::atanh(s.rho),
        ]);
    }
    UnconstrainedParams(v)
}

/// Valid for every finite input; `sigma` is floored at [`SIGMA_FLOOR`].
pub fn from_unconstrained(v: &[f64]) -> Result<GaussianSeq> {
    if v.len() % PARAMS_PER_STEP != 0 {
        return Err(Error::InvalidDistribution(format!(
            "length {} is not a multiple of {PARAMS_PER_STEP}",
            v.len()
        )));
    }
    if let Some(i) = v.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("unconstrained entry {i}")));
    }
    let lo = math::ln(SIGMA_FLOOR);
    let steps = v
        .chunks(PARAMS_PER_STEP)
        .map(|c| StepGaussian {
            mu: [c[0], c[1]],
            sigma: [
                math::exp(c[2].clamp(lo, LOG_SIGMA_MAX)),
                math::exp(c[3].clamp(lo, LOG_SIGMA_MAX)),
            ],
            rho: math::tanh(c[4].clamp(-ATANH_RHO_MAX, ATANH_RHO_MAX)),
        })
        .collect();
    Ok(GaussianSeq { steps })
}

/// Per-row summed NLL of truth `[B, T*2]` under unconstrained params
/// `[B, T*5]`, returned as `[B, T]` per-step terms.
pub fn nll_terms(tape: &mut Tape, params: Var, truth: Var) -> Result<Var> {
    let shape = tape.shape(params).to_vec();
    let b = shape[0];
    let t = shape[1] / PARAMS_PER_STEP;
    let p = tape.reshape(params, &[b, t, PARAMS_PER_STEP])?;
    let y = tape.reshape(truth, &[b, t, 2])?;
    let mx = tape.slice(p, 2, 0, 1)?;
    let my = tape.slice(p, 2, 1, 1)?;
    let lsx = tape.slice(p, 2, 2, 1)?;
    let lsy = tape.slice(p, 2, 3, 1)?;
    let ur = tape.slice(p, 2, 4, 1)?;
    let yx = tape.slice(y, 2, 0, 1)?;
    let yy = tape.slice(y, 2, 1, 1)?;

    let lo = math::ln(SIGMA_FLOOR);
    let lsx = tape.clamp(lsx, lo, LOG_SIGMA_MAX);
    let lsy = tape.clamp(lsy, lo, LOG_SIGMA_MAX);
    let ur = tape.clamp(ur, -ATANH_RHO_MAX, ATANH_RHO_MAX);
    let rho = tape.tanh(ur);

    let dx = tape.sub(yx, mx)?;
    let dy = tape.sub(yy, my)?;
    let nsx = tape.neg(lsx);
    let nsy = tape.neg(lsy);
    let isx = tape.exp(nsx);
    let isy = tape.exp(nsy);
    let zx = tape.mul(dx, isx)?;
    let zy = tape.mul(dy, isy)?;

    let zx2 = tape.square(zx);
    let zy2 = tape.square(zy);
    let zxy = tape.mul(zx, zy)?;
    let rzxy = tape.mul(rho, zxy)?;
    let rzxy2 = tape.scale(rzxy, 2.0);
    let q = tape.add(zx2, zy2)?;
    let q = tape.sub(q, rzxy2)?;

    let r2 = tape.square(rho);
    let nr2 = tape.neg(r2);
    let omr = tape.add_scalar(nr2, 1.0);
    let log_omr = tape.log(omr);
    let two_omr = tape.scale(omr, 2.0);
    let quad = tape.div(q, two_omr)?;

    let half_log = tape.scale(log_omr, 0.5);
    let s = tape.add(lsx, lsy)?;
    let s = tape.add(s, half_log)?;
    let s = tape.add(s, quad)?;
    let s = tape.add_scalar(s, LOG_2PI);
    tape.reshape(s, &[b, t])
}

/// Batch mean of the per-window summed NLL.
pub fn nll_loss(tape: &mut Tape, params: Var, truth: Var) -> Result<Var> {
    let b = tape.shape(params)[0];
    let terms = nll_terms(tape, params, truth)?;
    let total = tape.sum(terms);
    Ok(tape.scale(total, 1.0 / b as f64))
}
