//! Past-trajectory guidance: temporal and social features.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::{Batch, PastWindow};
use crate::error::{Error, Result};
use crate::math;
use crate::nn::{Linear, Lstm};
use crate::params::{Group, ParamId, ParamStore};
use crate::rng::NormalStream;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub hidden: usize,
    /// Width of each of `f_temp` and `f_spat`.
    pub feature: usize,
    pub heads: usize,
    /// Neighbors go through the ego's recurrent cell when set, otherwise
    /// through a second one.
    pub share_encoder: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            feature: 128,
            heads: 1,
            share_encoder: true,
        }
    }
}

impl GuidanceConfig {
    pub fn guidance_dim(&self) -> usize {
        2 * self.feature
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0
            || self.feature == 0
            || self.heads == 0
            || self.feature % self.heads != 0
        {
            return Err(Error::Config(format!(
                "guidance: feature {} must be a positive multiple of heads {}",
                self.feature, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceEncoder {
    pub config: GuidanceConfig,
    pub lstm: Lstm,
    pub social_lstm: Option<Lstm>,
    pub temporal: Linear,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub spatial: Linear,
    pub null: ParamId,
}

/// Tape handles of one guidance evaluation.
#[derive(Clone, Copy, Debug)]
pub struct GuidanceVars {
    /// `[B, F]`
    pub f_temp: Var,
    /// `[B, F]`
    pub f_spat: Var,
    /// `[B, 2F]`
    pub g: Var,
    /// Per head `[B, 1, N]`; `None` when the batch has no neighbor slots.
    pub attention: Option<Var>,
}

/// Plain-valued guidance for one window.
#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceFeature {
    pub f_temp: Vec<f64>,
    pub f_spat: Vec<f64>,
    pub g: Vec<f64>,
}

impl GuidanceEncoder {
    pub fn new(
        store: &mut ParamStore,
        config: GuidanceConfig,
        rng: &mut NormalStream,
    ) -> Result<Self> {
        config.validate()?;
        let (h, f) = (config.hidden, config.feature);
        let g = Group::Gg;
        let lstm = Lstm::new(store, "gg.lstm", g, 2, h, rng);
        let social_lstm =
            (!config.share_encoder).then(|| Lstm::new(store, "gg.social_lstm", g, 2, h, rng));
        Ok(Self {
            temporal: Linear::new(store, "gg.temporal", g, h, f, rng, 1.0),
            query: Linear::no_bias(store, "gg.query", g, h, f, rng, 1.0),
            key: Linear::no_bias(store, "gg.key", g, h, f, rng, 1.0),
            value: Linear::no_bias(store, "gg.value", g, h, f, rng, 1.0),
            spatial: Linear::new(store, "gg.spatial", g, f, f, rng, 1.0),
            null: store.add("gg.null", g, Tensor::zeros(&[f])),
            config,
            lstm,
            social_lstm,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.lstm.params();
        if let Some(s) = &self.social_lstm {
            v.extend(s.params());
        }
        for l in [
            &self.temporal,
            &self.query,
            &self.key,
            &self.value,
            &self.spatial,
        ] {
            v.extend(l.params());
        }
        v.push(self.null);
        v
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        batch: &Batch,
    ) -> Result<GuidanceVars> {
        let (b, n) = (batch.size, batch.max_neighbors);
        let (f, heads) = (self.config.feature, self.config.heads);
        let steps = batch.agent_steps(false);
        let (ego_h, nbr_h) = match &self.social_lstm {
            None => {
                let xs: Vec<Var> = steps.into_iter().map(|t| tape.constant(t)).collect();
                let all = self.lstm.forward(tape, store, &xs)?;
                let ego = tape.slice(all, 0, 0, b)?;
                let nbr = if n > 0 {
                    Some(tape.slice(all, 0, b, b * n)?)
                } else {
                    None
                };
                (ego, nbr)
            }
            Some(social) => {
                let mut ego_xs = Vec::new();
                let mut nbr_xs = Vec::new();
                for t in steps {
                    ego_xs.push(tape.constant(Tensor::new(&[b, 2], t.data()[..b * 2].to_vec())?));
                    nbr_xs
                        .push(tape.constant(Tensor::new(&[b * n, 2], t.data()[b * 2..].to_vec())?));
                }
                let ego = self.lstm.forward(tape, store, &ego_xs)?;
                let nbr = if n > 0 {
                    Some(social.forward(tape, store, &nbr_xs)?)
                } else {
                    None
                };
                (ego, nbr)
            }
        };
        let f_temp = self.temporal.forward(tape, store, ego_h)?;

        let null = tape.param(store, self.null);
        let zeros = tape.constant(Tensor::zeros(&[b, f]));
        let null_rows = tape.add_tiled(zeros, null)?;
        let (f_spat, attention) = match nbr_h {
            Some(nbr_h) => {
                let q = self.query.forward(tape, store, ego_h)?;
                let k = self.key.forward(tape, store, nbr_h)?;
                let v = self.value.forward(tape, store, nbr_h)?;
                let dh = f / heads;
                let scale = 1.0 / math::sqrt(dh as f64);
                let mask = batch.mask.reshape(&[b, 1, n])?;
                let mut outs = Vec::with_capacity(heads);
                let mut first_attn = None;
                for hd in 0..heads {
                    let qh = tape.slice(q, 1, hd * dh, dh)?;
                    let qh = tape.reshape(qh, &[b, 1, dh])?;
                    let kh = tape.slice(k, 1, hd * dh, dh)?;
                    let kh = tape.reshape(kh, &[b, n, dh])?;
                    let vh = tape.slice(v, 1, hd * dh, dh)?;
                    let vh = tape.reshape(vh, &[b, n, dh])?;
                    let s = tape.bmm_nt(qh, kh)?;
                    let s = tape.scale(s, scale);
                    let a = tape.masked_softmax(s, &mask)?;
                    first_attn.get_or_insert(a);
                    let o = tape.bmm(a, vh)?;
                    outs.push(tape.reshape(o, &[b, dh])?);
                }
                let attn = if heads == 1 {
                    outs[0]
                } else {
                    tape.concat(&outs, 1)?
                };
                let s = self.spatial.forward(tape, store, attn)?;
                // rows with no masked-in neighbor fall back to the null vector
                let mut has = Tensor::zeros(&[b, f]);
                let mut empty = Tensor::zeros(&[b, f]);
                for i in 0..b {
                    let any = batch.mask.row(i).iter().any(|&m| m > 0.0);
                    let (on, off) = if any {
                        (&mut has, &mut empty)
                    } else {
                        (&mut empty, &mut has)
                    };
                    on.data_mut()[i * f..(i + 1) * f].fill(1.0);
                    off.data_mut()[i * f..(i + 1) * f].fill(0.0);
                }
                let has = tape.constant(has);
                let empty = tape.constant(empty);
                let s = tape.mul(s, has)?;
                let nr = tape.mul(null_rows, empty)?;
                (tape.add(s, nr)?, first_attn)
            }
            None => (null_rows, None),
        };
        let g = tape.concat(&[f_temp, f_spat], 1)?;
        Ok(GuidanceVars {
            f_temp,
            f_spat,
            g,
            attention,
        })
    }

    /// Guidance for a single window, no gradients.
    pub fn guidance(&self, store: &ParamStore, window: &PastWindow) -> Result<GuidanceFeature> {
        let batch = Batch::from_pasts(&[window])?;
        let mut tape = Tape::no_grad();
        let v = self.forward(&mut tape, store, &batch)?;
        Ok(GuidanceFeature {
            f_temp: tape.value(v.f_temp).data().to_vec(),
            f_spat: tape.value(v.f_spat).data().to_vec(),
            g: tape.value(v.g).data().to_vec(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{normalize, SceneWindow};
    use crate::gradcheck::{finite_diff_check, FdOptions};
    use crate::nn::zero_params;
    use crate::synthetic::{generate, SyntheticConfig};

    fn setup(config: GuidanceConfig, seed: u64) -> (ParamStore, GuidanceEncoder) {
        let mut store = ParamStore::new();
        let mut rng = NormalStream::new(seed, 0);
        let gg = GuidanceEncoder::new(&mut store, config, &mut rng).unwrap();
        // non-zero null vector so the fallback is observable
        for (i, v) in store.get_mut(gg.null).data_mut().iter_mut().enumerate() {
            *v = 0.1 * i as f64 - 0.2;
        }
        (store, gg)
    }

    fn small() -> GuidanceConfig {
        GuidanceConfig {
            hidden: 6,
            feature: 4,
            heads: 2,
            share_encoder: true,
        }
    }

    fn social_window() -> SceneWindow {
        generate(&SyntheticConfig {
            train: 8,
            test: 0,
            ..SyntheticConfig::default()
        })
        .train
        .into_iter()
        .find(|s| s.window.neighbor_count() == 1)
        .unwrap()
        .window
    }

    fn without_neighbors(w: &SceneWindow) -> PastWindow {
        PastWindow {
            ego_past: w.ego_past.clone(),
            neighbor_pasts: Vec::new(),
            social_mask: Vec::new(),
        }
    }

    #[test]
    fn default_dimensions() {
        let (store, gg) = setup(GuidanceConfig::default(), 1);
        let f = gg.guidance(&store, &social_window().past()).unwrap();
        assert_eq!(f.f_temp.len(), 128);
        assert_eq!(f.f_spat.len(), 128);
        assert_eq!(f.g.len(), 256);
        assert_eq!(&f.g[..128], &f.f_temp[..]);
        assert_eq!(&f.g[128..], &f.f_spat[..]);
        assert_eq!(f, gg.guidance(&store, &social_window().past()).unwrap());
    }

    #[test]
    fn zero_input_and_weights_give_zero_temporal_feature() {
        let (mut store, gg) = setup(small(), 2);
        zero_params(&mut store, &gg.params());
        let w = PastWindow {
            ego_past: alloc::vec![[0.0, 0.0]; 8],
            neighbor_pasts: Vec::new(),
            social_mask: Vec::new(),
        };
        let f = gg.guidance(&store, &w).unwrap();
        assert!(f.f_temp.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn no_neighbors_gives_null_vector_exactly() {
        let (store, gg) = setup(small(), 3);
        let null = store.get(gg.null).data().to_vec();
        let f = gg
            .guidance(&store, &without_neighbors(&social_window()))
            .unwrap();
        assert_eq!(f.f_spat, null);
        // a present but masked-out neighbor is excluded the same way
        let mut masked = social_window().past();
        masked.social_mask = alloc::vec![false];
        assert_eq!(gg.guidance(&store, &masked).unwrap().f_spat, null);
    }

    #[test]
    fn single_neighbor_gets_all_attention() {
        let (store, gg) = setup(small(), 4);
        let batch = Batch::from_pasts(&[&social_window().past()]).unwrap();
        let mut tape = Tape::new();
        let v = gg.forward(&mut tape, &store, &batch).unwrap();
        let a = tape.value(v.attention.unwrap());
        assert_eq!(a.data(), &[1.0]);
    }

    #[test]
    fn neighbor_permutation_invariance() {
        let (store, gg) = setup(small(), 5);
        let base = social_window();
        let mut w = base.past();
        for k in 1..4 {
            let mut np = base.neighbor_pasts[0].clone();
            for p in &mut np {
                p[1] += 0.2 * k as f64;
            }
            w.neighbor_pasts.push(np);
            w.social_mask.push(k != 2);
        }
        let reference = gg.guidance(&store, &w).unwrap();
        let mut rng = NormalStream::new(9, 9);
        for _ in 0..5 {
            let mut order: Vec<usize> = (0..w.neighbor_pasts.len()).collect();
            for i in (1..order.len()).rev() {
                order.swap(i, rng.below(i + 1));
            }
            let p = PastWindow {
                ego_past: w.ego_past.clone(),
                neighbor_pasts: order.iter().map(|&i| w.neighbor_pasts[i].clone()).collect(),
                social_mask: order.iter().map(|&i| w.social_mask[i]).collect(),
            };
            let got = gg.guidance(&store, &p).unwrap();
            for (a, b) in got.g.iter().zip(&reference.g) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn raw_translation_cancels_after_normalization() {
        let (store, gg) = setup(small(), 6);
        let w = social_window();
        let mut shifted = w.clone();
        shifted.origin = [0.0, 0.0];
        for p in shifted
            .ego_past
            .iter_mut()
            .chain(shifted.ego_future.iter_mut())
            .chain(shifted.neighbor_pasts.iter_mut().flatten())
            .chain(shifted.neighbor_futures.iter_mut().flatten())
        {
            p[0] += 13.25;
            p[1] -= 7.5;
        }
        let a = gg.guidance(&store, &w.past()).unwrap();
        let b = gg.guidance(&store, &normalize(&shifted).past()).unwrap();
        for (x, y) in a.g.iter().zip(&b.g) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for share in [true, false] {
            let (store, gg) = setup(
                GuidanceConfig {
                    share_encoder: share,
                    ..small()
                },
                7,
            );
            let w = social_window();
            let lone = without_neighbors(&w);
            let mut two = w.past();
            let mut np = w.neighbor_pasts[0].clone();
            np[3][0] += 0.4;
            two.neighbor_pasts.push(np);
            two.social_mask.push(true);
            let batch = Batch::from_pasts(&[&two, &lone]).unwrap();
            let report = finite_diff_check(
                &store,
                |s| {
                    let mut t = Tape::new();
                    let v = gg.forward(&mut t, s, &batch)?;
                    let c = t.constant(crate::rng::rng_normal(&[2, 8], 1, 1));
                    let p = t.mul(v.g, c)?;
                    let o = t.sum(p);
                    Ok((t, o))
                },
                FdOptions {
                    max_entries: Some(10),
                    stencil: crate::gradcheck::Stencil::FivePoint,
                    step: 1e-3,
                    ..FdOptions::default()
                },
            )
            .unwrap();
            assert!(report.passed, "{report:?}");
        }
    }
}
