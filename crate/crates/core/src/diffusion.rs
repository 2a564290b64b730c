//! Gaussian diffusion over unconstrained distribution parameters and the
//! guidance-conditioned noise predictor.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::PARAMS_PER_STEP;
use crate::math;
use crate::nn::Linear;
use crate::params::{Group, ParamId, ParamStore};
use crate::rng::NormalStream;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Noise rates indexed by step `t` in `1..=T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    /// Reverse-step noise scale per step.
    sigmas: Vec<f64>,
}

/// Linear `beta` from `beta_1` to `beta_T`.
pub fn make_schedule(steps: usize, beta_1: f64, beta_t: f64) -> Result<DiffusionSchedule> {
    if steps < 2 {
        return Err(Error::Schedule(format!(
            "need at least 2 steps, got {steps}"
        )));
    }
    if !(0.0 < beta_1 && beta_1 < beta_t && beta_t < 1.0) {
        return Err(Error::Schedule(format!(
            "need 0 < beta_1 < beta_T < 1, got ({beta_1}, {beta_t})"
        )));
    }
    let betas = (0..steps)
        .map(|i| beta_1 + (beta_t - beta_1) * i as f64 / (steps - 1) as f64)
        .collect();
    DiffusionSchedule::from_betas(betas)
}

impl DiffusionSchedule {
    /// Arbitrary non-decreasing rates in `[0, 1)`.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return Err(Error::Schedule("rates must lie in [0, 1)".into()));
        }
        if betas.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Schedule("rates must be non-decreasing".into()));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let sigmas = betas.iter().map(|b| math::sqrt(*b)).collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
            sigmas,
        })
    }

    /// Replaces the reverse noise `sqrt(beta_t)` by the posterior scale
    /// `sqrt(beta_t (1 - abar_{t-1}) / (1 - abar_t))`, which is zero at `t = 1`.
    pub fn with_posterior_variance(mut self) -> Self {
        for t in 1..=self.steps() {
            let prev = if t == 1 { 1.0 } else { self.alpha_bar(t - 1) };
            let denom = 1.0 - self.alpha_bar(t);
            self.sigmas[t - 1] = if denom > 0.0 {
                math::sqrt(self.beta(t) * (1.0 - prev) / denom)
            } else {
                0.0
            };
        }
        self
    }

    /// Noise scale of the reverse step from `t`.
    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t - 1]
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Schedule(format!(
                "step {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }
}

/// Closed-form marginal `sqrt(abar_t) d0 + sqrt(1 - abar_t) eps`.
pub fn forward_sample(
    d0: &[f64],
    t: usize,
    eps: &[f64],
    schedule: &DiffusionSchedule,
) -> Result<Vec<f64>> {
    schedule.check(t)?;
    let (a, s) = (
        math::sqrt(schedule.alpha_bar(t)),
        math::sqrt(1.0 - schedule.alpha_bar(t)),
    );
    Ok(d0.iter().zip(eps).map(|(d, e)| a * d + s * e).collect())
}

/// One recursive step `sqrt(alpha_t) d + sqrt(beta_t) eps`.
pub fn forward_step(
    d_prev: &[f64],
    t: usize,
    eps: &[f64],
    schedule: &DiffusionSchedule,
) -> Result<Vec<f64>> {
    schedule.check(t)?;
    let (a, s) = (math::sqrt(schedule.alpha(t)), math::sqrt(schedule.beta(t)));
    Ok(d_prev.iter().zip(eps).map(|(d, e)| a * d + s * e).collect())
}

/// Posterior-mean update from a state at `level` (= t + 1) down one step.
/// `noise` is ignored on the final step to level 0.
pub fn reverse_update(
    d: &[f64],
    eps_hat: &[f64],
    level: usize,
    schedule: &DiffusionSchedule,
    noise: Option<&[f64]>,
) -> Result<Vec<f64>> {
    schedule.check(level)?;
    let (c, inv, sigma) = reverse_coefficients(schedule, level);
    Ok(d.iter()
        .zip(eps_hat)
        .enumerate()
        .map(|(i, (x, e))| {
            let n = match noise {
                Some(n) if level > 1 => sigma * n[i],
                _ => 0.0,
            };
            inv * (x - c * e) + n
        })
        .collect())
}

/// `(beta / sqrt(1 - abar), 1 / sqrt(alpha), sigma)` at `level`.
fn reverse_coefficients(schedule: &DiffusionSchedule, level: usize) -> (f64, f64, f64) {
    let b = schedule.beta(level);
    (
        b / math::sqrt(1.0 - schedule.alpha_bar(level)),
        1.0 / math::sqrt(schedule.alpha(level)),
        schedule.sigma(level),
    )
}

/// Counts denoiser evaluations, one per batch row per call.
#[derive(Debug, Default)]
pub struct InvocationCounter(AtomicU64);

impl InvocationCounter {
    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }

    pub fn add(&self, n: u64) {
        self.0.fetch_add(n, Ordering::Relaxed);
    }

    pub fn reset(&self) {
        self.0.store(0, Ordering::Relaxed);
    }
}

impl Clone for InvocationCounter {
    fn clone(&self) -> Self {
        Self(AtomicU64::new(self.get()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub d_model: usize,
    pub time_dim: usize,
    pub layers: usize,
    pub ffn: usize,
    pub heads: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            time_dim: 64,
            layers: 2,
            ffn: 128,
            heads: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Reverse steps run from the plan at inference.
    pub truncate: usize,
    /// Use the posterior noise scale in reverse steps instead of `sqrt(beta)`.
    pub posterior_variance: bool,
    pub denoiser: DenoiserConfig,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            beta_start: 1e-4,
            beta_end: 0.2,
            truncate: 5,
            posterior_variance: false,
            denoiser: DenoiserConfig::default(),
        }
    }
}

impl DiffusionConfig {
    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        if self.truncate > self.steps {
            return Err(Error::Config(format!(
                "truncation {} exceeds diffusion steps {}",
                self.truncate, self.steps
            )));
        }
        let d = &self.denoiser;
        if d.d_model == 0 || d.heads == 0 || d.d_model % d.heads != 0 || d.time_dim % 2 != 0 {
            return Err(Error::Config(format!("invalid denoiser dimensions {d:?}")));
        }
        let s = make_schedule(self.steps, self.beta_start, self.beta_end)?;
        Ok(if self.posterior_variance {
            s.with_posterior_variance()
        } else {
            s
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ff1: Linear,
    pub ff2: Linear,
}

/// Self-attention over the `t_future` tokens of a state, conditioned on
/// the time step and guidance.
#[derive(Clone, Debug)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub t_future: usize,
    pub g_dim: usize,
    pub input: Linear,
    pub position: ParamId,
    pub time: Linear,
    pub guide: Linear,
    pub blocks: Vec<Block>,
    pub out: Linear,
    pub calls: InvocationCounter,
}

/// Sinusoidal embedding of integer step `t`.
pub fn time_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut e = vec![0.0; dim];
    for i in 0..half {
        let freq = math::exp(-math::ln(10_000.0) * i as f64 / half as f64);
        let a = t as f64 * freq;
        e[i] = math::sin(a);
        e[half + i] = math::cos(a);
    }
    e
}

impl Denoiser {
    pub fn new(
        store: &mut ParamStore,
        config: DenoiserConfig,
        t_future: usize,
        g_dim: usize,
        rng: &mut NormalStream,
    ) -> Self {
        let d = config.d_model;
        let grp = Group::Pd;
        let blocks = (0..config.layers)
            .map(|i| {
                let n = |s: &str| format!("pd.block{i}.{s}");
                Block {
                    q: Linear::no_bias(store, &n("q"), grp, d, d, rng, 1.0),
                    k: Linear::no_bias(store, &n("k"), grp, d, d, rng, 1.0),
                    v: Linear::no_bias(store, &n("v"), grp, d, d, rng, 1.0),
                    o: Linear::new(store, &n("o"), grp, d, d, rng, 0.5),
                    ff1: Linear::new(store, &n("ff1"), grp, d, config.ffn, rng, 1.0),
                    ff2: Linear::new(store, &n("ff2"), grp, config.ffn, d, rng, 0.5),
                }
            })
            .collect();
        Self {
            input: Linear::new(store, "pd.input", grp, PARAMS_PER_STEP, d, rng, 1.0),
            position: store.add(
                "pd.position",
                grp,
                rng.normal_tensor(&[t_future, d]).map(|v| 0.1 * v),
            ),
            time: Linear::new(store, "pd.time", grp, config.time_dim, d, rng, 1.0),
            guide: Linear::new(store, "pd.guide", grp, g_dim, d, rng, 1.0),
            out: Linear::new(store, "pd.out", grp, d, PARAMS_PER_STEP, rng, 0.1),
            blocks,
            config,
            t_future,
            g_dim,
            calls: InvocationCounter::default(),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.input.params();
        v.push(self.position);
        v.extend(self.time.params());
        v.extend(self.guide.params());
        for b in &self.blocks {
            for l in [&b.q, &b.k, &b.v, &b.o, &b.ff1, &b.ff2] {
                v.extend(l.params());
            }
        }
        v.extend(self.out.params());
        v
    }

    /// `eps_hat` `[B, t_future * 5]` for states `d` at per-row steps `ts`.
    pub fn predict_noise(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        d: Var,
        ts: &[usize],
        g: Var,
    ) -> Result<Var> {
        let b = tape.shape(d)[0];
        let (tf, dm, heads) = (self.t_future, self.config.d_model, self.config.heads);
        if ts.len() != b {
            return Err(Error::Shape {
                op: "predict_noise",
                lhs: vec![b],
                rhs: vec![ts.len()],
            });
        }
        self.calls.add(b as u64);
        let tokens = tape.reshape(d, &[b * tf, PARAMS_PER_STEP])?;
        let x = self.input.forward(tape, store, tokens)?;
        let pos = tape.param(store, self.position);
        let x = tape.add_tiled(x, pos)?;
        let temb: Vec<f64> = ts
            .iter()
            .flat_map(|&t| time_embedding(t, self.config.time_dim))
            .collect();
        let temb = tape.constant(Tensor::new(&[b, self.config.time_dim], temb)?);
        let ct = self.time.forward(tape, store, temb)?;
        let cg = self.guide.forward(tape, store, g)?;
        let cond = tape.add(ct, cg)?;
        let cond = tape.silu(cond);
        let cond = tape.repeat_rows(cond, tf)?;
        let mut x = tape.add(x, cond)?;
        let dh = dm / heads;
        let scale = 1.0 / math::sqrt(dh as f64);
        for blk in &self.blocks {
            let q = blk.q.forward(tape, store, x)?;
            let k = blk.k.forward(tape, store, x)?;
            let v = blk.v.forward(tape, store, x)?;
            let mut outs = Vec::with_capacity(heads);
            for h in 0..heads {
                let part = |tape: &mut Tape, m: Var| -> Result<Var> {
                    let s = if heads == 1 {
                        m
                    } else {
                        tape.slice(m, 1, h * dh, dh)?
                    };
                    tape.reshape(s, &[b, tf, dh])
                };
                let (qh, kh, vh) = (part(tape, q)?, part(tape, k)?, part(tape, v)?);
                let s = tape.bmm_nt(qh, kh)?;
                let s = tape.scale(s, scale);
                let a = tape.softmax(s);
                let o = tape.bmm(a, vh)?;
                outs.push(tape.reshape(o, &[b * tf, dh])?);
            }
            let att = if heads == 1 {
                outs[0]
            } else {
                tape.concat(&outs, 1)?
            };
            let att = blk.o.forward(tape, store, att)?;
            x = tape.add(x, att)?;
            let f = blk.ff1.forward(tape, store, x)?;
            let f = tape.silu(f);
            let f = blk.ff2.forward(tape, store, f)?;
            x = tape.add(x, f)?;
        }
        let y = self.out.forward(tape, store, x)?;
        tape.reshape(y, &[b, tf * PARAMS_PER_STEP])
    }

    /// One reverse step from `level` for every row; `noise` is added unless
    /// this is the final step.
    #[allow(clippy::too_many_arguments)]
    pub fn reverse_step(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        d: Var,
        level: usize,
        g: Var,
        schedule: &DiffusionSchedule,
        noise: Option<Tensor>,
    ) -> Result<Var> {
        schedule.check(level)?;
        let b = tape.shape(d)[0];
        let eps = self.predict_noise(tape, store, d, &vec![level; b], g)?;
        let (c, inv, sigma) = reverse_coefficients(schedule, level);
        let ce = tape.scale(eps, c);
        let m = tape.sub(d, ce)?;
        let mut out = tape.scale(m, inv);
        if let Some(n) = noise.filter(|_| level > 1) {
            let n = tape.constant(n.map(|v| sigma * v));
            out = tape.add(out, n)?;
        }
        Ok(out)
    }

    /// Treats `plan` as the state at level `start` and runs `start` reverse
    /// steps to level 0. `noise[i]` is used on the step from level
    /// `start - i`; missing entries mean no noise.
    #[allow(clippy::too_many_arguments)]
    pub fn truncated_denoise(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        plan: Var,
        g: Var,
        schedule: &DiffusionSchedule,
        start: usize,
        noise: &[Tensor],
    ) -> Result<Var> {
        let mut d = plan;
        for (i, level) in (1..=start).rev().enumerate() {
            d = self.reverse_step(tape, store, d, level, g, schedule, noise.get(i).cloned())?;
            if !tape.value(d).all_finite() {
                return Err(Error::DiffusionDiverged { step: level });
            }
        }
        Ok(d)
    }
}

/// Inputs of one denoising-loss evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisedBatch {
    pub ts: Vec<usize>,
    pub eps: Tensor,
    pub noisy: Tensor,
}

/// Per row: `t` uniform in `1..=T`, `eps ~ N(0, I)`, and the forward
/// sample of `d0` at `t`.
pub fn noise_batch(
    d0: &Tensor,
    schedule: &DiffusionSchedule,
    rngs: &mut [NormalStream],
) -> Result<NoisedBatch> {
    let (b, c) = (d0.rows(), d0.cols());
    let mut ts = Vec::with_capacity(b);
    let mut eps = Vec::with_capacity(b * c);
    let mut noisy = Vec::with_capacity(b * c);
    for (r, rng) in rngs.iter_mut().enumerate().take(b) {
        let t = rng.below(schedule.steps()) + 1;
        let e = rng.normals(c);
        noisy.extend(forward_sample(d0.row(r), t, &e, schedule)?);
        eps.extend(e);
        ts.push(t);
    }
    Ok(NoisedBatch {
        ts,
        eps: Tensor::new(&[b, c], eps)?,
        noisy: Tensor::new(&[b, c], noisy)?,
    })
}

/// `MSE(eps_hat, eps)` over every entry.
pub fn noise_mse(tape: &mut Tape, eps_hat: Var, eps: Var) -> Result<Var> {
    let d = tape.sub(eps_hat, eps)?;
    let s = tape.square(d);
    Ok(tape.mean(s))
}

pub fn pd_loss(
    tape: &mut Tape,
    store: &ParamStore,
    den: &Denoiser,
    batch: &NoisedBatch,
    g: Var,
) -> Result<Var> {
    let x = tape.constant(batch.noisy.clone());
    let eps_hat = den.predict_noise(tape, store, x, &batch.ts, g)?;
    let eps = tape.constant(batch.eps.clone());
    noise_mse(tape, eps_hat, eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_check, FdOptions};
    use crate::nn::zero_params;
    use crate::rng::{rng_normal, stream_key};

    fn streams(n: usize, seed: u64) -> Vec<NormalStream> {
        (0..n)
            .map(|i| NormalStream::new(seed, stream_key(&[i as u64])))
            .collect()
    }

    fn small(seed: u64) -> (ParamStore, Denoiser) {
        let mut store = ParamStore::new();
        let mut rng = NormalStream::new(seed, 0);
        let den = Denoiser::new(
            &mut store,
            DenoiserConfig {
                d_model: 4,
                time_dim: 6,
                layers: 2,
                ffn: 5,
                heads: 2,
            },
            3,
            4,
            &mut rng,
        );
        (store, den)
    }

    #[test]
    fn two_step_schedule() {
        let s = make_schedule(2, 0.1, 0.2).unwrap();
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar(2) - 0.72).abs() < 1e-15);
    }

    #[test]
    fn default_schedule_reaches_near_total_noise() {
        let s = DiffusionConfig::default().schedule().unwrap();
        let prod: f64 = (1..=100)
            .map(|t| 1.0 - (1e-4 + (0.2 - 1e-4) * (t - 1) as f64 / 99.0))
            .product();
        assert!((s.alpha_bar(100) - prod).abs() < 1e-15);
        assert!(s.alpha_bar(100) < 1e-3);
        assert!(s.betas().windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn posterior_noise_scale() {
        let s = make_schedule(3, 0.1, 0.3).unwrap();
        assert!((s.sigma(2) - 0.2f64.sqrt()).abs() < 1e-15);
        let p = s.clone().with_posterior_variance();
        assert_eq!(p.sigma(1), 0.0);
        // beta_2 (1 - abar_1) / (1 - abar_2) = 0.2 * 0.1 / 0.28
        assert!((p.sigma(2) - (0.02f64 / 0.28).sqrt()).abs() < 1e-15);
        assert!((1..=3).all(|t| p.sigma(t) <= s.sigma(t)));
    }

    #[test]
    fn invalid_schedules_are_rejected() {
        assert!(make_schedule(1, 0.1, 0.2).is_err());
        assert!(make_schedule(10, 0.2, 0.1).is_err());
        assert!(make_schedule(10, 0.0, 0.1).is_err());
        assert!(make_schedule(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn forward_sample_special_cases() {
        let s = DiffusionSchedule::from_betas(vec![0.0, 0.0, 0.1]).unwrap();
        let d0 = [1.0, -2.0];
        let eps = [0.3, 0.7];
        assert_eq!(forward_sample(&d0, 2, &eps, &s).unwrap(), d0.to_vec());
        let s = make_schedule(10, 0.01, 0.3).unwrap();
        let out = forward_sample(&[0.0, 0.0], 7, &eps, &s).unwrap();
        let k = (1.0 - s.alpha_bar(7)).sqrt();
        assert_eq!(out, vec![k * 0.3, k * 0.7]);
    }

    #[test]
    fn single_step_inversion_with_planted_noise() {
        let s = make_schedule(2, 0.05, 0.2).unwrap();
        let mut rng = NormalStream::new(3, 3);
        let d0 = rng.normals(60);
        let eps = rng.normals(60);
        let d1 = forward_sample(&d0, 1, &eps, &s).unwrap();
        let back = reverse_update(&d1, &eps, 1, &s, Some(&rng.normals(60))).unwrap();
        for (a, b) in back.iter().zip(&d0) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_network_reverse_step_only_rescales() {
        let (mut store, den) = small(4);
        zero_params(&mut store, &den.params());
        let s = make_schedule(10, 0.01, 0.3).unwrap();
        let d = rng_normal(&[2, 15], 1, 4);
        let mut t = Tape::new();
        let dv = t.constant(d.clone());
        let g = t.constant(rng_normal(&[2, 4], 2, 4));
        let eps = den.predict_noise(&mut t, &store, dv, &[3, 9], g).unwrap();
        assert!(t.value(eps).data().iter().all(|&v| v == 0.0));
        let out = den
            .reverse_step(&mut t, &store, dv, 6, g, &s, None)
            .unwrap();
        let k = 1.0 / s.alpha(6).sqrt();
        for (a, b) in t.value(out).data().iter().zip(d.data()) {
            assert!((a - k * b).abs() < 1e-14);
        }
    }

    #[test]
    fn output_shape_and_determinism() {
        let (store, den) = small(5);
        let run = |ts: &[usize]| {
            let mut t = Tape::new();
            let d = t.constant(rng_normal(&[2, 15], 1, 5));
            let g = t.constant(rng_normal(&[2, 4], 2, 5));
            let e = den.predict_noise(&mut t, &store, d, ts, g).unwrap();
            t.value(e).clone()
        };
        assert_eq!(run(&[1, 1]).shape(), &[2, 15]);
        assert_eq!(run(&[1, 100]), run(&[1, 100]));
        assert_ne!(run(&[1, 2]), run(&[1, 100]));
        assert_eq!(den.calls.get(), 10);
    }

    #[test]
    fn denoising_loss_gradient_matches_finite_differences() {
        let (store, den) = small(6);
        let s = make_schedule(20, 1e-3, 0.2).unwrap();
        let d0 = rng_normal(&[2, 15], 1, 6);
        let batch = noise_batch(&d0, &s, &mut streams(2, 6)).unwrap();
        let g0 = rng_normal(&[2, 4], 3, 6);
        let report = finite_diff_check(
            &store,
            |st| {
                let mut t = Tape::new();
                let g = t.constant(g0.clone());
                let l = pd_loss(&mut t, st, &den, &batch, g)?;
                Ok((t, l))
            },
            FdOptions {
                max_entries: Some(8),
                ..FdOptions::default()
            },
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn oracle_and_zero_network_losses() {
        let s = DiffusionConfig::default().schedule().unwrap();
        let d0 = rng_normal(&[10_000, 6], 1, 7);
        let batch = noise_batch(&d0, &s, &mut streams(10_000, 7)).unwrap();
        let mut t = Tape::new();
        let e = t.constant(batch.eps.clone());
        let oracle = noise_mse(&mut t, e, e).unwrap();
        assert_eq!(t.value(oracle).item().unwrap(), 0.0);
        let z = t.constant(Tensor::zeros(batch.eps.shape()));
        let zero = noise_mse(&mut t, z, e).unwrap();
        assert!((t.value(zero).item().unwrap() - 1.0).abs() < 0.05);
        assert!(batch.ts.iter().all(|&t| (1..=100).contains(&t)));
    }

    #[test]
    fn recursive_chain_matches_closed_form_marginal() {
        let s = DiffusionConfig::default().schedule().unwrap();
        let d0: Vec<f64> = (0..6).map(|i| i as f64 * 0.5 - 1.0).collect();
        let t = 30;
        let n = 10_000;
        let mut sum = vec![0.0; 6];
        let mut sq = vec![0.0; 6];
        let mut rng = NormalStream::new(8, 8);
        for _ in 0..n {
            let mut d = d0.clone();
            for k in 1..=t {
                d = forward_step(&d, k, &rng.normals(6), &s).unwrap();
            }
            for i in 0..6 {
                sum[i] += d[i];
                sq[i] += d[i] * d[i];
            }
        }
        let ab = s.alpha_bar(t);
        for i in 0..6 {
            let m = sum[i] / n as f64;
            let v = sq[i] / n as f64 - m * m;
            assert!((m - ab.sqrt() * d0[i]).abs() < 0.02, "mean {m}");
            assert!((v - (1.0 - ab)).abs() < 0.03, "var {v}");
        }
    }

    #[test]
    fn truncated_chain_calls_the_network_once_per_level() {
        let (store, den) = small(9);
        let s = make_schedule(10, 0.01, 0.3).unwrap();
        let mut t = Tape::no_grad();
        let plan = t.constant(rng_normal(&[3, 15], 1, 9));
        let g = t.constant(rng_normal(&[3, 4], 2, 9));
        let same = den
            .truncated_denoise(&mut t, &store, plan, g, &s, 0, &[])
            .unwrap();
        assert_eq!(same, plan);
        den.calls.reset();
        let out = den
            .truncated_denoise(&mut t, &store, plan, g, &s, 5, &[])
            .unwrap();
        assert_eq!(den.calls.get(), 15);
        assert!(t.value(out).all_finite());
    }
}
