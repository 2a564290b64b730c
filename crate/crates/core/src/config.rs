//! Training configuration and its flat `key = value` text form.
//!
//! Nested settings are addressed by dotted keys (`diffusion.steps = 100`).
//! Every key is optional on input; missing keys keep their defaults and
//! unknown keys are rejected.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::diffusion::DiffusionConfig;
use crate::energy::EnergyConfig;
use crate::error::{Error, Result};
use crate::guidance::GuidanceConfig;
use crate::params::Fnv;
use crate::synthetic::SyntheticConfig;
use crate::td::TdConfig;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSettings {
    pub epochs: usize,
    pub lr: f64,
    /// Anneal the learning rate to zero over the stage with a half cosine.
    pub cosine: bool,
}

/// Which of the two generative components a run uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub use_sc: bool,
    pub use_pd: bool,
}

impl AblationConfig {
    pub const FULL: Self = Self {
        use_sc: true,
        use_pd: true,
    };
    pub const SC_ONLY: Self = Self {
        use_sc: true,
        use_pd: false,
    };
    pub const PD_ONLY: Self = Self {
        use_sc: false,
        use_pd: true,
    };

    pub fn validate(&self) -> Result<()> {
        if !self.use_sc && !self.use_pd {
            return Err(Error::Config(
                "at least one of ablation.use_sc and ablation.use_pd must be true".into(),
            ));
        }
        Ok(())
    }

    pub fn label(&self) -> &'static str {
        match (self.use_sc, self.use_pd) {
            (true, true) => "full",
            (true, false) => "sc-only",
            (false, true) => "pd-only",
            (false, false) => "none",
        }
    }
}

/// Where training windows come from. Interpreted by the IO layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    /// `synthetic` or a directory of scene files.
    pub source: String,
    /// Scene group held out for testing (directory sources only).
    pub held_out: String,
    /// Column order of the scene files.
    pub format: String,
    pub val_fraction: f64,
    pub stride: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: "synthetic".into(),
            held_out: String::new(),
            format: "frame,id,x,y".into(),
            val_fraction: 0.1,
            stride: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    /// Samples drawn per window at evaluation.
    pub k: usize,
    pub t_past: usize,
    pub t_future: usize,
    /// Global gradient-norm clip for every stage.
    pub grad_clip: Option<f64>,
    pub stage_td: StageSettings,
    pub stage_sc: StageSettings,
    pub stage_pd: StageSettings,
    pub stage_finetune: StageSettings,
    pub td: TdConfig,
    pub gg: GuidanceConfig,
    pub energy: EnergyConfig,
    pub diffusion: DiffusionConfig,
    /// Backpropagate the correlation loss through the Langevin chain.
    pub sc_chain_grad: bool,
    /// Backpropagate the fine-tuning loss through the Langevin chain that
    /// produces the plan.
    pub finetune_chain_grad: bool,
    /// Backpropagate the fine-tuning loss through every truncated reverse
    /// step; when off only the last step carries gradient.
    pub finetune_full_chain: bool,
    /// Train the guidance encoder during fine-tuning.
    pub finetune_gg: bool,
    pub ablation: AblationConfig,
    pub data: DataConfig,
    pub synthetic: SyntheticConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            batch_size: 32,
            k: 20,
            t_past: 8,
            t_future: 12,
            grad_clip: Some(10.0),
            stage_td: StageSettings {
                epochs: 60,
                lr: 3e-3,
                cosine: false,
            },
            stage_sc: StageSettings {
                epochs: 60,
                lr: 1e-3,
                cosine: false,
            },
            stage_pd: StageSettings {
                epochs: 60,
                lr: 1e-3,
                cosine: false,
            },
            stage_finetune: StageSettings {
                epochs: 40,
                lr: 5e-4,
                cosine: false,
            },
            td: TdConfig::default(),
            gg: GuidanceConfig::default(),
            energy: EnergyConfig::default(),
            diffusion: DiffusionConfig::default(),
            sc_chain_grad: true,
            finetune_chain_grad: true,
            finetune_full_chain: true,
            finetune_gg: true,
            ablation: AblationConfig::FULL,
            data: DataConfig::default(),
            synthetic: SyntheticConfig::default(),
        }
    }
}

enum Field<'a> {
    U(&'a mut usize),
    U64(&'a mut u64),
    F(&'a mut f64),
    B(&'a mut bool),
    S(&'a mut String),
    OptF(&'a mut Option<f64>),
}

impl Field<'_> {
    fn render(&self) -> String {
        match self {
            Field::U(v) => v.to_string(),
            Field::U64(v) => v.to_string(),
            Field::F(v) => format!("{v:?}"),
            Field::B(v) => v.to_string(),
            Field::S(v) => (*v).clone(),
            Field::OptF(Some(v)) => format!("{v:?}"),
            Field::OptF(None) => "none".into(),
        }
    }

    fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let bad = || Error::Config(format!("cannot parse `{raw}` for `{key}`"));
        match self {
            Field::U(v) => **v = raw.parse().map_err(|_| bad())?,
            Field::U64(v) => **v = raw.parse().map_err(|_| bad())?,
            Field::F(v) => **v = raw.parse().map_err(|_| bad())?,
            Field::B(v) => **v = raw.parse().map_err(|_| bad())?,
            Field::S(v) => **v = raw.to_string(),
            Field::OptF(v) => {
                **v = if raw == "none" {
                    None
                } else {
                    Some(raw.parse().map_err(|_| bad())?)
                }
            }
        }
        Ok(())
    }
}

impl TrainConfig {
    fn fields(&mut self) -> Vec<(&'static str, Field<'_>)> {
        use Field::*;
        let c = self;
        let l = &mut c.energy.langevin;
        let dn = &mut c.diffusion.denoiser;
        let s = &mut c.synthetic;
        alloc::vec![
            ("seed", U64(&mut c.seed)),
            ("batch_size", U(&mut c.batch_size)),
            ("k", U(&mut c.k)),
            ("t_past", U(&mut c.t_past)),
            ("t_future", U(&mut c.t_future)),
            ("grad_clip", OptF(&mut c.grad_clip)),
            ("stage.td.epochs", U(&mut c.stage_td.epochs)),
            ("stage.td.lr", F(&mut c.stage_td.lr)),
            ("stage.td.cosine", B(&mut c.stage_td.cosine)),
            ("stage.sc.epochs", U(&mut c.stage_sc.epochs)),
            ("stage.sc.lr", F(&mut c.stage_sc.lr)),
            ("stage.sc.cosine", B(&mut c.stage_sc.cosine)),
            ("stage.pd.epochs", U(&mut c.stage_pd.epochs)),
            ("stage.pd.lr", F(&mut c.stage_pd.lr)),
            ("stage.pd.cosine", B(&mut c.stage_pd.cosine)),
            ("stage.finetune.epochs", U(&mut c.stage_finetune.epochs)),
            ("stage.finetune.lr", F(&mut c.stage_finetune.lr)),
            ("stage.finetune.cosine", B(&mut c.stage_finetune.cosine)),
            ("stage.sc.chain_grad", B(&mut c.sc_chain_grad)),
            ("stage.finetune.chain_grad", B(&mut c.finetune_chain_grad)),
            ("stage.finetune.full_chain", B(&mut c.finetune_full_chain)),
            ("stage.finetune.train_gg", B(&mut c.finetune_gg)),
            ("td.hidden", U(&mut c.td.hidden)),
            ("td.fuse", U(&mut c.td.fuse)),
            ("td.use_neighbors", B(&mut c.td.use_neighbors)),
            ("gg.hidden", U(&mut c.gg.hidden)),
            ("gg.feature", U(&mut c.gg.feature)),
            ("gg.heads", U(&mut c.gg.heads)),
            ("gg.share_encoder", B(&mut c.gg.share_encoder)),
            ("energy.hidden", U(&mut c.energy.hidden)),
            ("energy.encoder_hidden", U(&mut c.energy.encoder_hidden)),
            ("energy.buffer_capacity", U(&mut c.energy.buffer_capacity)),
            ("energy.prior_weight", F(&mut c.energy.prior_weight)),
            ("langevin.steps", U(&mut l.steps)),
            ("langevin.step_size", F(&mut l.step_size)),
            ("langevin.grad_clip", F(&mut l.grad_clip)),
            ("langevin.fresh_prob", F(&mut l.fresh_prob)),
            ("langevin.max_restarts", U(&mut l.max_restarts)),
            ("diffusion.steps", U(&mut c.diffusion.steps)),
            ("diffusion.beta_start", F(&mut c.diffusion.beta_start)),
            ("diffusion.beta_end", F(&mut c.diffusion.beta_end)),
            ("diffusion.truncate", U(&mut c.diffusion.truncate)),
            ("diffusion.posterior_variance", B(&mut c.diffusion.posterior_variance)),
            ("denoiser.d_model", U(&mut dn.d_model)),
            ("denoiser.time_dim", U(&mut dn.time_dim)),
            ("denoiser.layers", U(&mut dn.layers)),
            ("denoiser.ffn", U(&mut dn.ffn)),
            ("denoiser.heads", U(&mut dn.heads)),
            ("ablation.use_sc", B(&mut c.ablation.use_sc)),
            ("ablation.use_pd", B(&mut c.ablation.use_pd)),
            ("data.source", S(&mut c.data.source)),
            ("data.held_out", S(&mut c.data.held_out)),
            ("data.format", S(&mut c.data.format)),
            ("data.val_fraction", F(&mut c.data.val_fraction)),
            ("data.stride", U(&mut c.data.stride)),
            ("synthetic.seed", U64(&mut s.seed)),
            ("synthetic.train", U(&mut s.train)),
            ("synthetic.test", U(&mut s.test)),
            ("synthetic.noise", F(&mut s.noise)),
            ("synthetic.mode_offset", F(&mut s.mode_offset)),
            ("synthetic.speed", F(&mut s.speed)),
            ("synthetic.neighbor_speed_min", F(&mut s.neighbor_speed_min)),
            ("synthetic.neighbor_speed_max", F(&mut s.neighbor_speed_max)),
            ("synthetic.lone_fraction", F(&mut s.lone_fraction)),
        ]
    }

    /// Every setting as `(key, value)` in a fixed order.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let mut c = self.clone();
        c.fields()
            .into_iter()
            .map(|(k, f)| (k.to_string(), f.render()))
            .collect()
    }

    /// Defaults overridden by `pairs`; the result is validated.
    pub fn from_kv(pairs: &[(String, String)]) -> Result<Self> {
        let mut c = Self::default();
        {
            let mut fields: BTreeMap<&str, Field<'_>> = c.fields().into_iter().collect();
            for (k, v) in pairs {
                let f = fields
                    .get_mut(k.as_str())
                    .ok_or_else(|| Error::Config(format!("unknown key `{k}`")))?;
                f.set(k, v)?;
            }
        }
        c.synthetic.t_past = c.t_past;
        c.synthetic.t_future = c.t_future;
        c.validate()?;
        Ok(c)
    }

    /// Canonical text, one `key = value` per line.
    pub fn render(&self) -> String {
        self.to_kv()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_kv(&parse_kv(text)?)
    }

    /// Hash of the canonical text.
    pub fn hash(&self) -> u64 {
        let mut h = Fnv::new();
        h.write(self.render().as_bytes());
        h.finish()
    }

    pub fn validate(&self) -> Result<()> {
        self.ablation.validate()?;
        self.gg.validate()?;
        self.energy.langevin.validate()?;
        self.diffusion.schedule()?;
        if self.batch_size == 0 || self.k == 0 || self.t_past < 2 || self.t_future == 0 {
            return Err(Error::Config(
                "batch_size, k and t_future must be positive and t_past at least 2".into(),
            ));
        }
        if !(self.energy.prior_weight >= 0.0) {
            return Err(Error::Config("energy.prior_weight must be non-negative".into()));
        }
        if self.energy.buffer_capacity == 0 {
            return Err(Error::Config(
                "energy.buffer_capacity must be positive".into(),
            ));
        }
        if self.diffusion.truncate == 0 {
            return Err(Error::Config("diffusion.truncate must be positive".into()));
        }
        for s in [
            self.stage_td,
            self.stage_sc,
            self.stage_pd,
            self.stage_finetune,
        ] {
            if !(s.lr > 0.0) {
                return Err(Error::Config(format!(
                    "learning rates must be positive, got {}",
                    s.lr
                )));
            }
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config("grad_clip must be positive or `none`".into()));
            }
        }
        Ok(())
    }
}

/// Splits `key = value` lines; `#` starts a comment, blank lines are
/// ignored and a repeated key is an error.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", i + 1)));
        }
        if out.iter().any(|(e, _)| e == k) {
            return Err(Error::Config(format!(
                "line {}: duplicate key `{k}`",
                i + 1
            )));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}
