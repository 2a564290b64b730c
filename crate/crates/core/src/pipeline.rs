//! The assembled model: staged training, inference and evaluation.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::config::{AblationConfig, StageSettings, TrainConfig};
use crate::data::{Batch, PastWindow, Point, SceneWindow};
use crate::diffusion::{noise_batch, pd_loss, Denoiser, DiffusionSchedule};
use crate::energy::{
    initial_states, langevin_sample, sc_loss, BufferSnapshot, EnergyModel, NetworkEnergy,
    ReplayBuffer,
};
use crate::error::{Error, Result};
use crate::gaussian::{self, from_unconstrained, GaussianSeq, PARAMS_PER_STEP};
use crate::guidance::GuidanceEncoder;
use crate::math;
use crate::metrics;
use crate::optim::{AdamConfig, OptimizerState};
use crate::params::{Group, ParamStore};
use crate::rng::{stream_key, NormalStream};
use crate::tape::{Tape, Var};
use crate::td::TrajectoryEncoder;
use crate::tensor::Tensor;

const INIT_TAG: u64 = 0x1417;
const TRAIN_TAG: u64 = 0x7a17;
const EVAL_TAG: u64 = 0xe7a1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stage {
    Untrained,
    Td,
    Sc,
    Pd,
    Finetuned,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::Untrained,
        Stage::Td,
        Stage::Sc,
        Stage::Pd,
        Stage::Finetuned,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Untrained => "untrained",
            Stage::Td => "td",
            Stage::Sc => "sc",
            Stage::Pd => "pd",
            Stage::Finetuned => "finetuned",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }

    fn tag(self) -> u64 {
        self as u64
    }
}

/// Stages trained, in order, for a given ablation.
pub fn stage_plan(ablation: &AblationConfig) -> Vec<Stage> {
    let mut v = vec![Stage::Td];
    if ablation.use_sc {
        v.push(Stage::Sc);
    }
    if ablation.use_pd {
        v.push(Stage::Pd);
    }
    if ablation.use_sc && ablation.use_pd {
        v.push(Stage::Finetuned);
    }
    v
}

/// How a trained model turns a past window into a distribution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InferenceMode {
    /// Langevin plan refined by the truncated reverse chain.
    Full,
    /// The Langevin plan read directly as a distribution.
    PlanOnly,
    /// The full reverse chain from pure noise, `chains` times per window.
    FromNoise { chains: usize },
}

impl InferenceMode {
    fn requires(self) -> Stage {
        match self {
            InferenceMode::Full => Stage::Finetuned,
            InferenceMode::PlanOnly => Stage::Sc,
            InferenceMode::FromNoise { .. } => Stage::Pd,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// `K` sampled futures.
    pub samples: Vec<Vec<Point>>,
    /// The distribution the samples were drawn from (the first chain's
    /// when several are run).
    pub distribution: GaussianSeq,
    /// The Langevin plan, when one was produced.
    pub plan: Option<GaussianSeq>,
    /// Langevin chains restarted after a non-finite state.
    pub restarts: usize,
}

/// Losses recorded while training one stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageLog {
    pub stage: Stage,
    /// One entry per optimizer step.
    pub step_losses: Vec<f64>,
    /// Mean loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct EpdModel {
    pub config: TrainConfig,
    pub store: ParamStore,
    pub td: TrajectoryEncoder,
    pub gg: GuidanceEncoder,
    pub ebm: EnergyModel,
    pub denoiser: Denoiser,
    pub schedule: DiffusionSchedule,
    pub buffer: ReplayBuffer,
    /// Last completed stage.
    pub stage: Stage,
}

fn rows_normal(rngs: &mut [NormalStream], dim: usize) -> Tensor {
    let mut d = Vec::with_capacity(rngs.len() * dim);
    for r in rngs.iter_mut() {
        d.extend(r.normals(dim));
    }
    Tensor::new(&[rngs.len(), dim], d).expect("rows")
}

fn split_rows(t: &Tensor) -> impl Iterator<Item = &[f64]> {
    t.data().chunks(t.cols())
}

impl EpdModel {
    /// Fresh parameters, deterministic in `config.seed`.
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = NormalStream::new(config.seed, stream_key(&[INIT_TAG]));
        let mut store = ParamStore::new();
        let z = config.t_future * PARAMS_PER_STEP;
        let td = TrajectoryEncoder::new(&mut store, config.td.clone(), config.t_future, &mut rng);
        let gg = GuidanceEncoder::new(&mut store, config.gg.clone(), &mut rng)?;
        let g_dim = config.gg.guidance_dim();
        let ebm = EnergyModel::new(&mut store, config.energy.clone(), z, g_dim, &mut rng);
        let denoiser = Denoiser::new(
            &mut store,
            config.diffusion.denoiser.clone(),
            config.t_future,
            g_dim,
            &mut rng,
        );
        let schedule = config.diffusion.schedule()?;
        let buffer = ReplayBuffer::new(config.energy.buffer_capacity, z);
        Ok(Self {
            config,
            store,
            td,
            gg,
            ebm,
            denoiser,
            schedule,
            buffer,
            stage: Stage::Untrained,
        })
    }

    /// Rebuilds a model from stored parameter values. Every parameter the
    /// configuration defines must be present with the same shape.
    pub fn from_parts(
        config: TrainConfig,
        params: &[(String, Tensor)],
        buffer: &BufferSnapshot,
        stage: Stage,
    ) -> Result<Self> {
        let mut m = Self::new(config)?;
        if params.len() != m.store.len() {
            return Err(Error::Data(format!(
                "checkpoint has {} parameters, configuration defines {}",
                params.len(),
                m.store.len()
            )));
        }
        for (name, value) in params {
            let id = m
                .store
                .find(name)
                .ok_or_else(|| Error::Data(format!("unexpected parameter `{name}`")))?;
            if m.store.get(id).shape() != value.shape() {
                return Err(Error::Data(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    value.shape(),
                    m.store.get(id).shape()
                )));
            }
            *m.store.get_mut(id) = value.clone();
        }
        let buf = ReplayBuffer::from_snapshot(buffer)?;
        if buf.dim() != m.buffer.dim() {
            return Err(Error::Data(
                "replay buffer dimension does not match the configuration".into(),
            ));
        }
        m.buffer = buf;
        m.stage = stage;
        Ok(m)
    }

    pub fn plan(&self) -> Vec<Stage> {
        stage_plan(&self.config.ablation)
    }

    pub fn has_completed(&self, stage: Stage) -> bool {
        let plan = self.plan();
        match (
            plan.iter().position(|&s| s == stage),
            plan.iter().position(|&s| s == self.stage),
        ) {
            (Some(a), Some(b)) => a <= b,
            _ => false,
        }
    }

    pub fn remaining_stages(&self) -> Vec<Stage> {
        self.plan()
            .into_iter()
            .filter(|&s| !self.has_completed(s))
            .collect()
    }

    /// Inference mode implied by the configured ablation.
    pub fn default_mode(&self) -> InferenceMode {
        match (self.config.ablation.use_sc, self.config.ablation.use_pd) {
            (true, true) => InferenceMode::Full,
            (true, false) => InferenceMode::PlanOnly,
            _ => InferenceMode::FromNoise { chains: 1 },
        }
    }

    /// Runs every remaining stage, calling `after_stage` once each finishes
    /// (for checkpointing).
    pub fn train(
        &mut self,
        windows: &[SceneWindow],
        after_stage: &mut dyn FnMut(&EpdModel, &StageLog) -> Result<()>,
    ) -> Result<Vec<StageLog>> {
        let mut logs = Vec::new();
        for stage in self.remaining_stages() {
            let log = self.train_stage(stage, windows)?;
            after_stage(self, &log)?;
            logs.push(log);
        }
        Ok(logs)
    }

    fn settings(&self, stage: Stage) -> StageSettings {
        match stage {
            Stage::Td => self.config.stage_td,
            Stage::Sc => self.config.stage_sc,
            Stage::Pd => self.config.stage_pd,
            _ => self.config.stage_finetune,
        }
    }

    fn trainable(&self, stage: Stage) -> Vec<Group> {
        match stage {
            Stage::Td => vec![Group::Td],
            Stage::Sc => vec![Group::Gg, Group::Ebm],
            // without the correlation stage the guidance encoder is learned here
            Stage::Pd if !self.config.ablation.use_sc => vec![Group::Gg, Group::Pd],
            Stage::Pd => vec![Group::Pd],
            _ if self.config.finetune_gg => vec![Group::Gg, Group::Ebm, Group::Pd],
            _ => vec![Group::Ebm, Group::Pd],
        }
    }

    /// Trains one stage over `windows` (normalized, with futures). The
    /// stage must be the next one in the plan.
    pub fn train_stage(&mut self, stage: Stage, windows: &[SceneWindow]) -> Result<StageLog> {
        if self.remaining_stages().first() != Some(&stage) {
            return Err(Error::Config(format!(
                "stage `{}` cannot run after `{}` for a {} model",
                stage.name(),
                self.stage.name(),
                self.config.ablation.label()
            )));
        }
        if windows.is_empty() {
            return Err(Error::Data("no training windows".into()));
        }
        for w in windows {
            if w.t_past() != self.config.t_past || w.t_future() != self.config.t_future {
                return Err(Error::Horizon(self.config.t_future, w.t_future()));
            }
        }
        let settings = self.settings(stage);
        let mut opt = OptimizerState::new(AdamConfig {
            lr: settings.lr,
            clip_norm: self.config.grad_clip,
            ..AdamConfig::default()
        });
        self.store.set_trainable(&self.trainable(stage));
        let seed = self.config.seed;
        let bs = self.config.batch_size;
        let mut log = StageLog {
            stage,
            step_losses: Vec::new(),
            epoch_losses: Vec::new(),
        };
        let mut order: Vec<usize> = (0..windows.len()).collect();
        let total_steps = settings.epochs * windows.len().div_ceil(bs.max(1));
        for epoch in 0..settings.epochs {
            let mut shuffle =
                NormalStream::new(seed, stream_key(&[TRAIN_TAG, stage.tag(), epoch as u64]));
            for i in (1..order.len()).rev() {
                let j = shuffle.below(i + 1);
                order.swap(i, j);
            }
            let mut total = 0.0;
            let mut count = 0;
            for (bi, chunk) in order.chunks(bs).enumerate() {
                let step = log.step_losses.len();
                if settings.cosine {
                    let frac = step as f64 / total_steps as f64;
                    opt.config.lr = 0.5 * settings.lr * (1.0 + math::cos(core::f64::consts::PI * frac));
                }
                let picked: Vec<&SceneWindow> = chunk.iter().map(|&i| &windows[i]).collect();
                let batch = Batch::from_windows(&picked)?;
                let mut rngs: Vec<NormalStream> = (0..picked.len())
                    .map(|r| {
                        NormalStream::new(
                            seed,
                            stream_key(&[
                                TRAIN_TAG,
                                stage.tag(),
                                epoch as u64,
                                bi as u64,
                                r as u64,
                            ]),
                        )
                    })
                    .collect();
                let diverged = Error::Diverged {
                    stage: stage.name(),
                    step,
                };
                let loss = match self.train_step(stage, &batch, &mut rngs, &mut opt) {
                    Ok(l) if l.is_finite() => l,
                    Ok(_)
                    | Err(
                        Error::NonFiniteGradient(_)
                        | Error::DiffusionDiverged { .. }
                        | Error::NonFinite(_),
                    ) => {
                        self.store.set_trainable(&[]);
                        return Err(diverged);
                    }
                    Err(e) => {
                        self.store.set_trainable(&[]);
                        return Err(e);
                    }
                };
                log.step_losses.push(loss);
                total += loss;
                count += 1;
            }
            log.epoch_losses.push(total / count as f64);
        }
        self.store.set_trainable(&[]);
        self.stage = stage;
        Ok(log)
    }

    /// TD encoding of the batch futures, as values.
    fn target_params(&self, batch: &Batch) -> Result<Tensor> {
        let mut t = Tape::no_grad();
        let u = self.td.forward(&mut t, &self.store, batch)?;
        Ok(t.value(u).clone())
    }

    fn chain_noise(&self, rngs: &mut [NormalStream]) -> Vec<Tensor> {
        let z = self.buffer.dim();
        (0..self.config.energy.langevin.steps)
            .map(|_| rows_normal(rngs, z))
            .collect()
    }

    /// Langevin plan on `tape`; differentiated only when `grad` is set.
    fn plan_on_tape(
        &mut self,
        tape: &mut Tape,
        g: Var,
        grad: bool,
        rngs: &mut [NormalStream],
    ) -> Result<Var> {
        let (z0, _) = initial_states(&self.buffer, &self.config.energy.langevin, rngs);
        let noise = self.chain_noise(rngs);
        let z = if grad {
            self.ebm.langevin_chain(tape, &self.store, g, z0, &noise)?
        } else {
            let mut t = Tape::no_grad();
            let gv = t.constant(tape.value(g).clone());
            let z = self
                .ebm
                .langevin_chain(&mut t, &self.store, gv, z0, &noise)?;
            tape.constant(t.value(z).clone())
        };
        let zv = tape.value(z).clone();
        if !zv.all_finite() {
            return Err(Error::NonFinite("Langevin plan".into()));
        }
        for row in split_rows(&zv) {
            self.buffer.push(row)?;
        }
        Ok(z)
    }

    fn train_step(
        &mut self,
        stage: Stage,
        batch: &Batch,
        rngs: &mut [NormalStream],
        opt: &mut OptimizerState,
    ) -> Result<f64> {
        let mut tape = Tape::new();
        let loss = match stage {
            Stage::Td => self.td.loss(&mut tape, &self.store, batch)?,
            Stage::Sc => {
                let p_alpha = tape.constant(self.target_params(batch)?);
                let g = self.gg.forward(&mut tape, &self.store, batch)?.g;
                let z = self.plan_on_tape(&mut tape, g, self.config.sc_chain_grad, rngs)?;
                let zpos = self
                    .ebm
                    .encode_positive(&mut tape, &self.store, p_alpha, g)?;
                let zneg = self.ebm.encode_negative(&mut tape, &self.store, z, g)?;
                let truth = tape.constant(batch.truth());
                sc_loss(&mut tape, zpos, zneg, z, truth)?.total
            }
            Stage::Pd => {
                let d0 = self.target_params(batch)?;
                let noised = noise_batch(&d0, &self.schedule, rngs)?;
                let g = self.gg.forward(&mut tape, &self.store, batch)?.g;
                pd_loss(&mut tape, &self.store, &self.denoiser, &noised, g)?
            }
            Stage::Finetuned => {
                let g = self.gg.forward(&mut tape, &self.store, batch)?.g;
                let plan =
                    self.plan_on_tape(&mut tape, g, self.config.finetune_chain_grad, rngs)?;
                let start = self.config.diffusion.truncate;
                let z = self.buffer.dim();
                let noise: Vec<Tensor> = (0..start.saturating_sub(1))
                    .map(|_| rows_normal(rngs, z))
                    .collect();
                let d = if self.config.finetune_full_chain {
                    self.denoiser.truncated_denoise(
                        &mut tape,
                        &self.store,
                        plan,
                        g,
                        &self.schedule,
                        start,
                        &noise,
                    )?
                } else {
                    // every step but the last runs without gradient
                    let mut t = Tape::no_grad();
                    let gv = t.constant(tape.value(g).clone());
                    let mut dv = t.constant(tape.value(plan).clone());
                    for (i, level) in (2..=start).rev().enumerate() {
                        dv = self.denoiser.reverse_step(
                            &mut t,
                            &self.store,
                            dv,
                            level,
                            gv,
                            &self.schedule,
                            noise.get(i).cloned(),
                        )?;
                    }
                    let d1 = tape.constant(t.value(dv).clone());
                    self.denoiser.reverse_step(
                        &mut tape,
                        &self.store,
                        d1,
                        1,
                        g,
                        &self.schedule,
                        None,
                    )?
                };
                let truth = tape.constant(batch.truth());
                gaussian::nll_loss(&mut tape, d, truth)?
            }
            Stage::Untrained => return Err(Error::Config("nothing to train".into())),
        };
        let value = tape.value(loss).item()?;
        if !value.is_finite() {
            return Ok(value);
        }
        let grads = tape.backward(loss)?;
        opt.apply(&mut self.store, &grads)?;
        Ok(value)
    }

    /// Predicts one window with its own random stream.
    pub fn predict(
        &self,
        past: &PastWindow,
        k: usize,
        rng: &mut NormalStream,
    ) -> Result<Prediction> {
        let mut out =
            self.predict_batch(&[past], k, self.default_mode(), core::slice::from_mut(rng))?;
        Ok(out.remove(0))
    }

    /// Predicts several windows; window `i` draws all of its randomness
    /// from `rngs[i]`, in the order: Langevin start and noise, reverse
    /// chain noise, then the `k` samples.
    pub fn predict_batch(
        &self,
        pasts: &[&PastWindow],
        k: usize,
        mode: InferenceMode,
        rngs: &mut [NormalStream],
    ) -> Result<Vec<Prediction>> {
        let need = mode.requires();
        if !self.has_completed(need) {
            return Err(Error::Untrained {
                have: self.stage.name(),
                need: need.name(),
            });
        }
        if k == 0 {
            return Err(Error::Config("k must be positive".into()));
        }
        if rngs.len() != pasts.len() {
            return Err(Error::Shape {
                op: "predict_batch",
                lhs: vec![pasts.len()],
                rhs: vec![rngs.len()],
            });
        }
        if pasts.is_empty() {
            return Ok(Vec::new());
        }
        for p in pasts {
            if p.ego_past.len() != self.config.t_past {
                return Err(Error::Horizon(self.config.t_past, p.ego_past.len()));
            }
            let finite = p
                .ego_past
                .iter()
                .chain(p.neighbor_pasts.iter().flatten())
                .all(|q| q[0].is_finite() && q[1].is_finite());
            if !finite {
                return Err(Error::NonFinite("past window".into()));
            }
        }
        let batch = Batch::from_pasts(pasts)?;
        let mut tape = Tape::no_grad();
        let g = self.gg.forward(&mut tape, &self.store, &batch)?.g;
        let z_dim = self.buffer.dim();
        match mode {
            InferenceMode::Full | InferenceMode::PlanOnly => {
                let mut buffer = self.buffer.clone();
                let energy = NetworkEnergy {
                    model: &self.ebm,
                    store: &self.store,
                };
                let gv = tape.value(g).clone();
                let lang = langevin_sample(
                    &energy,
                    &gv,
                    &self.config.energy.langevin,
                    &mut buffer,
                    rngs,
                )?;
                let plans = lang.z.clone();
                let finals = if mode == InferenceMode::Full {
                    let start = self.config.diffusion.truncate;
                    let noise: Vec<Tensor> =
                        (0..start - 1).map(|_| rows_normal(rngs, z_dim)).collect();
                    let p = tape.constant(plans.clone());
                    let d = self.denoiser.truncated_denoise(
                        &mut tape,
                        &self.store,
                        p,
                        g,
                        &self.schedule,
                        start,
                        &noise,
                    )?;
                    tape.value(d).clone()
                } else {
                    plans.clone()
                };
                let mut out = Vec::with_capacity(pasts.len());
                for (i, rng) in rngs.iter_mut().enumerate() {
                    let dist = from_unconstrained(finals.row(i))?;
                    let plan = from_unconstrained(plans.row(i))?;
                    out.push(Prediction {
                        samples: dist.sample(k, rng),
                        distribution: dist,
                        plan: Some(plan),
                        restarts: 0,
                    });
                }
                if let Some(first) = out.first_mut() {
                    first.restarts = lang.restarts;
                }
                Ok(out)
            }
            InferenceMode::FromNoise { chains } => {
                if chains == 0 {
                    return Err(Error::Config("chains must be positive".into()));
                }
                let b = pasts.len();
                let steps = self.schedule.steps();
                let mut start = Vec::with_capacity(b * chains * z_dim);
                for rng in rngs.iter_mut() {
                    start.extend(rng.normals(chains * z_dim));
                }
                let gr = tape.repeat_rows(g, chains)?;
                let mut d = tape.constant(Tensor::new(&[b * chains, z_dim], start)?);
                for level in (1..=steps).rev() {
                    let noise = if level > 1 {
                        let mut n = Vec::with_capacity(b * chains * z_dim);
                        for rng in rngs.iter_mut() {
                            n.extend(rng.normals(chains * z_dim));
                        }
                        Some(Tensor::new(&[b * chains, z_dim], n)?)
                    } else {
                        None
                    };
                    // keep the tape from growing across a hundred steps
                    let mut t = Tape::no_grad();
                    let dv = t.constant(tape.value(d).clone());
                    let gv = t.constant(tape.value(gr).clone());
                    let next = self.denoiser.reverse_step(
                        &mut t,
                        &self.store,
                        dv,
                        level,
                        gv,
                        &self.schedule,
                        noise,
                    )?;
                    let nv = t.value(next).clone();
                    if !nv.all_finite() {
                        return Err(Error::DiffusionDiverged { step: level });
                    }
                    d = tape.constant(nv);
                }
                let finals = tape.value(d).clone();
                let mut out = Vec::with_capacity(b);
                for (i, rng) in rngs.iter_mut().enumerate() {
                    let dists: Vec<GaussianSeq> = (0..chains)
                        .map(|c| from_unconstrained(finals.row(i * chains + c)))
                        .collect::<Result<_>>()?;
                    let samples = if chains == 1 {
                        dists[0].sample(k, rng)
                    } else {
                        (0..k)
                            .map(|s| dists[s % chains].sample(1, rng).remove(0))
                            .collect()
                    };
                    out.push(Prediction {
                        samples,
                        distribution: dists[0].clone(),
                        plan: None,
                        restarts: 0,
                    });
                }
                Ok(out)
            }
        }
    }
}

/// Metrics for one window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowResult {
    pub ade: f64,
    pub fde: f64,
    /// NLL of the truth under the predicted distribution.
    pub nll: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub k: usize,
    pub min_ade: f64,
    pub min_fde: f64,
    pub windows: Vec<WindowResult>,
    pub predictions: Vec<Prediction>,
    /// Denoiser rows evaluated during the run.
    pub invocations: u64,
}

/// Stream used for window `index` under evaluation seed `seed`.
pub fn eval_stream(seed: u64, index: usize) -> NormalStream {
    NormalStream::new(seed, stream_key(&[EVAL_TAG, index as u64]))
}

/// Best-of-`k` metrics over `windows`, predicted `chunk` at a time.
pub fn evaluate(
    model: &EpdModel,
    windows: &[SceneWindow],
    k: usize,
    seed: u64,
    mode: InferenceMode,
    chunk: usize,
) -> Result<Evaluation> {
    if windows.is_empty() {
        return Err(Error::Data("no evaluation windows".into()));
    }
    let before = model.denoiser.calls.get();
    let mut results = Vec::with_capacity(windows.len());
    let mut predictions = Vec::with_capacity(windows.len());
    let chunk = chunk.max(1);
    for (ci, part) in windows.chunks(chunk).enumerate() {
        let pasts: Vec<PastWindow> = part.iter().map(|w| w.past()).collect();
        let refs: Vec<&PastWindow> = pasts.iter().collect();
        let mut rngs: Vec<NormalStream> = (0..part.len())
            .map(|i| eval_stream(seed, ci * chunk + i))
            .collect();
        let preds = model.predict_batch(&refs, k, mode, &mut rngs)?;
        for (w, p) in part.iter().zip(preds) {
            let (ade, fde) = metrics::ade_fde(&p.samples, &w.ego_future)?;
            let nll = p.distribution.nll(&w.ego_future)?;
            results.push(WindowResult { ade, fde, nll });
            predictions.push(p);
        }
    }
    let n = results.len() as f64;
    Ok(Evaluation {
        k,
        min_ade: results.iter().map(|r| r.ade).sum::<f64>() / n,
        min_fde: results.iter().map(|r| r.fde).sum::<f64>() / n,
        windows: results,
        predictions,
        invocations: model.denoiser.calls.get() - before,
    })
}
