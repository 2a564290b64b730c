//! Energy model over unconstrained plans, Langevin sampling with a replay
//! buffer, and the positive/negative encoders.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian;
use crate::math;
use crate::nn::{Linear, Mlp};
use crate::params::{Group, ParamId, ParamStore};
use crate::rng::NormalStream;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LangevinConfig {
    pub steps: usize,
    pub step_size: f64,
    /// Elementwise clip applied to the energy gradient at every step.
    pub grad_clip: f64,
    /// Probability of starting from `N(0, I)` even when the buffer has
    /// entries.
    pub fresh_prob: f64,
    pub max_restarts: usize,
}

impl Default for LangevinConfig {
    fn default() -> Self {
        Self {
            steps: 20,
            step_size: 0.1,
            grad_clip: 10.0,
            fresh_prob: 0.05,
            max_restarts: 3,
        }
    }
}

impl LangevinConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0
            || !(self.step_size > 0.0)
            || !(self.grad_clip > 0.0)
            || !(0.0..=1.0).contains(&self.fresh_prob)
        {
            return Err(Error::Config(format!("invalid Langevin settings {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyConfig {
    pub hidden: usize,
    pub encoder_hidden: usize,
    pub buffer_capacity: usize,
    /// Weight `w` of the Gaussian reference term `w |z|^2 / 2` added to the
    /// network energy; keeps chains bounded before the network has learned.
    pub prior_weight: f64,
    pub langevin: LangevinConfig,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            encoder_hidden: 128,
            buffer_capacity: 1000,
            prior_weight: 1.0,
            langevin: LangevinConfig::default(),
        }
    }
}

/// Fixed-capacity ring of past chain endpoints; the oldest entry is
/// overwritten first.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    dim: usize,
    slots: Vec<Vec<f64>>,
    cursor: usize,
}

/// Flat dump of a buffer: `slots` holds `size * dim` values in slot order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BufferSnapshot {
    pub capacity: usize,
    pub size: usize,
    pub cursor: usize,
    pub dim: usize,
    pub slots: Vec<f64>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, dim: usize) -> Self {
        Self {
            capacity,
            dim,
            slots: Vec::new(),
            cursor: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn push(&mut self, z: &[f64]) -> Result<()> {
        if z.len() != self.dim {
            return Err(Error::Shape {
                op: "replay push",
                lhs: vec![self.dim],
                rhs: vec![z.len()],
            });
        }
        if !z.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("replay buffer entry".into()));
        }
        if self.capacity == 0 {
            return Ok(());
        }
        if self.slots.len() < self.capacity {
            self.slots.push(z.to_vec());
        } else {
            self.slots[self.cursor] = z.to_vec();
        }
        self.cursor = (self.cursor + 1) % self.capacity;
        Ok(())
    }

    /// Entries from oldest to newest.
    pub fn iter_fifo(&self) -> impl Iterator<Item = &[f64]> {
        let start = if self.slots.len() < self.capacity {
            0
        } else {
            self.cursor
        };
        let n = self.slots.len();
        (0..n).map(move |i| self.slots[(start + i) % n].as_slice())
    }

    pub fn sample(&self, rng: &mut NormalStream) -> Option<&[f64]> {
        if self.slots.is_empty() {
            None
        } else {
            Some(&self.slots[rng.below(self.slots.len())])
        }
    }

    pub fn snapshot(&self) -> BufferSnapshot {
        BufferSnapshot {
            capacity: self.capacity,
            size: self.slots.len(),
            cursor: self.cursor,
            dim: self.dim,
            slots: self.slots.concat(),
        }
    }

    pub fn from_snapshot(s: &BufferSnapshot) -> Result<Self> {
        if s.size > s.capacity
            || s.slots.len() != s.size * s.dim
            || (s.capacity > 0 && s.cursor >= s.capacity)
            || !s.slots.iter().all(|v| v.is_finite())
        {
            return Err(Error::Data(format!(
                "inconsistent replay buffer snapshot (capacity {}, size {}, cursor {})",
                s.capacity, s.size, s.cursor
            )));
        }
        Ok(Self {
            capacity: s.capacity,
            dim: s.dim,
            slots: if s.dim == 0 {
                vec![Vec::new(); s.size]
            } else {
                s.slots.chunks(s.dim).map(<[f64]>::to_vec).collect()
            },
            cursor: s.cursor,
        })
    }
}

/// Anything that can supply `grad_z E(z, g)` row-wise.
pub trait EnergyFn {
    /// `z: [B, Z]`, `g: [B, G]` to `[B, Z]`.
    fn grad(&self, z: &Tensor, g: &Tensor) -> Result<Tensor>;
}

/// `E(z) = |z - m|^2 / 2`, independent of `g`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticEnergy {
    pub center: Vec<f64>,
}

impl EnergyFn for QuadraticEnergy {
    fn grad(&self, z: &Tensor, _g: &Tensor) -> Result<Tensor> {
        let d = self.center.len();
        let mut out = z.clone();
        for row in out.data_mut().chunks_mut(d) {
            for (v, m) in row.iter_mut().zip(&self.center) {
                *v -= m;
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnergyModel {
    pub config: EnergyConfig,
    pub z_dim: usize,
    pub g_dim: usize,
    pub l1: Linear,
    pub l2: Linear,
    pub l3: Linear,
    pub positive: Mlp,
    pub negative: Mlp,
}

/// Intermediate activations of one energy evaluation.
struct Hidden {
    h1: Var,
    h2: Var,
}

impl EnergyModel {
    pub fn new(
        store: &mut ParamStore,
        config: EnergyConfig,
        z_dim: usize,
        g_dim: usize,
        rng: &mut NormalStream,
    ) -> Self {
        let (h, e) = (config.hidden, config.encoder_hidden);
        let grp = Group::Ebm;
        Self {
            l1: Linear::new(store, "ebm.l1", grp, z_dim + g_dim, h, rng, 1.0),
            l2: Linear::new(store, "ebm.l2", grp, h, h, rng, 1.0),
            l3: Linear::new(store, "ebm.l3", grp, h, 1, rng, 1.0),
            positive: Mlp::new(store, "ebm.pos", grp, &[z_dim + g_dim, e, z_dim], rng),
            negative: Mlp::new(store, "ebm.neg", grp, &[z_dim + g_dim, e, z_dim], rng),
            config,
            z_dim,
            g_dim,
        }
    }

    pub fn energy_params(&self) -> Vec<ParamId> {
        let mut v = self.l1.params();
        v.extend(self.l2.params());
        v.extend(self.l3.params());
        v
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.energy_params();
        v.extend(self.positive.params());
        v.extend(self.negative.params());
        v
    }

    fn hidden(&self, tape: &mut Tape, store: &ParamStore, z: Var, g: Var) -> Result<Hidden> {
        let x = tape.concat(&[z, g], 1)?;
        let a1 = self.l1.forward(tape, store, x)?;
        let h1 = tape.tanh(a1);
        let a2 = self.l2.forward(tape, store, h1)?;
        let h2 = tape.tanh(a2);
        Ok(Hidden { h1, h2 })
    }

    /// Energies `[B, 1]`.
    pub fn energy(&self, tape: &mut Tape, store: &ParamStore, z: Var, g: Var) -> Result<Var> {
        let Hidden { h2, .. } = self.hidden(tape, store, z, g)?;
        let e = self.l3.forward(tape, store, h2)?;
        let w = self.config.prior_weight;
        if w == 0.0 {
            return Ok(e);
        }
        let b = tape.shape(z)[0];
        let sq = tape.square(z);
        let ones = tape.constant(Tensor::full(&[self.z_dim, 1], 0.5 * w));
        let prior = tape.matmul(sq, ones)?;
        debug_assert_eq!(tape.shape(prior), &[b, 1]);
        tape.add(e, prior)
    }

    /// `grad_z E` built from tape primitives, so the result is itself
    /// differentiable with respect to `z`, `g` and the weights.
    pub fn energy_grad(&self, tape: &mut Tape, store: &ParamStore, z: Var, g: Var) -> Result<Var> {
        let Hidden { h1, h2 } = self.hidden(tape, store, z, g)?;
        let h = self.config.hidden;
        let w3 = tape.param(store, self.l3.w);
        let w3 = tape.reshape(w3, &[1, h])?;
        let d2 = one_minus_square(tape, h2);
        let d2 = tape.mul_tiled(d2, w3)?;
        let w2 = tape.param(store, self.l2.w);
        let back = tape.matmul_nt(d2, w2)?;
        let d1 = one_minus_square(tape, h1);
        let d1 = tape.mul(d1, back)?;
        let w1 = tape.param(store, self.l1.w);
        let w1z = tape.slice(w1, 0, 0, self.z_dim)?;
        let grad = tape.matmul_nt(d1, w1z)?;
        let w = self.config.prior_weight;
        if w == 0.0 {
            return Ok(grad);
        }
        let pz = tape.scale(z, w);
        tape.add(grad, pz)
    }

    pub fn encode_positive(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        p_alpha: Var,
        g: Var,
    ) -> Result<Var> {
        let x = tape.concat(&[p_alpha, g], 1)?;
        self.positive.forward(tape, store, x)
    }

    pub fn encode_negative(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        z: Var,
        g: Var,
    ) -> Result<Var> {
        let x = tape.concat(&[z, g], 1)?;
        self.negative.forward(tape, store, x)
    }

    /// Differentiable chain from fixed starts `z0` with the given per-step
    /// noise tensors.
    pub fn langevin_chain(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        g: Var,
        z0: Tensor,
        noise: &[Tensor],
    ) -> Result<Var> {
        let cfg = &self.config.langevin;
        let mut z = tape.constant(z0);
        for eps in noise {
            let gr = self.energy_grad(tape, store, z, g)?;
            let gr = tape.clamp(gr, -cfg.grad_clip, cfg.grad_clip);
            let drift = tape.scale(gr, cfg.step_size / 2.0);
            z = tape.sub(z, drift)?;
            let e = tape.constant(eps.map(|v| v * math::sqrt(cfg.step_size)));
            z = tape.add(z, e)?;
        }
        Ok(z)
    }
}

fn one_minus_square(tape: &mut Tape, h: Var) -> Var {
    let sq = tape.square(h);
    let n = tape.neg(sq);
    tape.add_scalar(n, 1.0)
}

/// Energy network read through a parameter store.
pub struct NetworkEnergy<'a> {
    pub model: &'a EnergyModel,
    pub store: &'a ParamStore,
}

impl EnergyFn for NetworkEnergy<'_> {
    fn grad(&self, z: &Tensor, g: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::no_grad();
        let zv = tape.constant(z.clone());
        let gv = tape.constant(g.clone());
        let out = self.model.energy_grad(&mut tape, self.store, zv, gv)?;
        Ok(tape.value(out).clone())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LangevinOutput {
    /// Final states `[B, Z]`.
    pub z: Tensor,
    /// Chains restarted after a non-finite state.
    pub restarts: usize,
    /// Chains started from fresh noise rather than the buffer.
    pub fresh: usize,
}

/// Start states: a buffer entry with probability `1 - fresh_prob` when the
/// buffer is non-empty, otherwise standard normal noise. Returns the count
/// of fresh starts.
pub fn initial_states(
    buffer: &ReplayBuffer,
    cfg: &LangevinConfig,
    rngs: &mut [NormalStream],
) -> (Tensor, usize) {
    let dim = buffer.dim();
    let mut data = Vec::with_capacity(rngs.len() * dim);
    let mut fresh = 0;
    for rng in rngs.iter_mut() {
        let u = rng.next_uniform();
        match buffer.sample(rng) {
            Some(z) if u >= cfg.fresh_prob => data.extend_from_slice(z),
            _ => {
                fresh += 1;
                data.extend(rng.normals(dim));
            }
        }
    }
    (Tensor::new(&[rngs.len(), dim], data).expect("rows"), fresh)
}

/// Runs one chain per row of `g`, row `r` drawing all randomness from
/// `rngs[r]`. Final states are pushed to the buffer.
pub fn langevin_sample(
    energy: &dyn EnergyFn,
    g: &Tensor,
    cfg: &LangevinConfig,
    buffer: &mut ReplayBuffer,
    rngs: &mut [NormalStream],
) -> Result<LangevinOutput> {
    cfg.validate()?;
    let b = g.rows();
    if rngs.len() != b {
        return Err(Error::Shape {
            op: "langevin_sample",
            lhs: vec![b],
            rhs: vec![rngs.len()],
        });
    }
    let dim = buffer.dim();
    let (mut z, fresh) = initial_states(buffer, cfg, rngs);
    let mut restarts = 0;
    let mut pending: Vec<usize> = (0..b).collect();
    let mut attempt = 0;
    loop {
        let rows = pending.len();
        let sub_g = select_rows(g, &pending);
        let mut sub_z = select_rows(&z, &pending);
        let mut dead = vec![false; rows];
        let noise_scale = math::sqrt(cfg.step_size);
        for _ in 0..cfg.steps {
            let grad = energy.grad(&sub_z, &sub_g)?;
            for (i, &r) in pending.iter().enumerate() {
                let zr = &mut sub_z.data_mut()[i * dim..(i + 1) * dim];
                let gr = &grad.data()[i * dim..(i + 1) * dim];
                for (zv, &gv) in zr.iter_mut().zip(gr) {
                    let gv = if gv.is_nan() {
                        f64::NAN
                    } else {
                        gv.clamp(-cfg.grad_clip, cfg.grad_clip)
                    };
                    *zv += -0.5 * cfg.step_size * gv + noise_scale * rngs[r].next_normal();
                }
                if !dead[i] && !zr.iter().all(|v| v.is_finite()) {
                    dead[i] = true;
                }
                if dead[i] {
                    // keep the batch finite while the chain finishes
                    zr.fill(0.0);
                }
            }
        }
        for (i, &r) in pending.iter().enumerate() {
            z.data_mut()[r * dim..(r + 1) * dim]
                .copy_from_slice(&sub_z.data()[i * dim..(i + 1) * dim]);
        }
        let failed: Vec<usize> = pending
            .iter()
            .zip(&dead)
            .filter(|(_, &d)| d)
            .map(|(&r, _)| r)
            .collect();
        if failed.is_empty() {
            break;
        }
        attempt += 1;
        restarts += failed.len();
        if attempt > cfg.max_restarts {
            return Err(Error::NonFinite(format!(
                "Langevin chains {failed:?} stayed non-finite after {} restarts",
                cfg.max_restarts
            )));
        }
        for &r in &failed {
            let fresh_z = rngs[r].normals(dim);
            z.data_mut()[r * dim..(r + 1) * dim].copy_from_slice(&fresh_z);
        }
        pending = failed;
    }
    for r in 0..b {
        buffer.push(&z.data()[r * dim..(r + 1) * dim])?;
    }
    Ok(LangevinOutput { z, restarts, fresh })
}

pub(crate) fn select_rows(t: &Tensor, rows: &[usize]) -> Tensor {
    let c = t.cols();
    let mut d = Vec::with_capacity(rows.len() * c);
    for &r in rows {
        d.extend_from_slice(t.row(r));
    }
    Tensor::new(&[rows.len(), c], d).expect("rows")
}

/// Tape handles of the combined correlation loss.
#[derive(Clone, Copy, Debug)]
pub struct ScLoss {
    pub total: Var,
    pub mse: Var,
    pub nll: Var,
}

/// `MSE(Z+, Z-) + NLL(from_unconstrained(z), truth)`.
pub fn sc_loss(tape: &mut Tape, z_pos: Var, z_neg: Var, z: Var, truth: Var) -> Result<ScLoss> {
    let d = tape.sub(z_pos, z_neg)?;
    let sq = tape.square(d);
    let mse = tape.mean(sq);
    let nll = gaussian::nll_loss(tape, z, truth)?;
    let total = tape.add(mse, nll)?;
    Ok(ScLoss { total, mse, nll })
}
