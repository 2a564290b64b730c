//! Future-trajectory encoder producing a per-step Gaussian sequence.
//!
//! Every agent's future is run through one shared LSTM. Neighbor encodings
//! are averaged under the social mask, fused with the ego encoding, and a
//! linear head emits the unconstrained parameters.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::{Batch, SceneWindow};
use crate::error::Result;
use crate::gaussian::{self, GaussianSeq, PARAMS_PER_STEP};
use crate::nn::{Linear, Lstm};
use crate::params::{Group, ParamId, ParamStore};
use crate::rng::NormalStream;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TdConfig {
    pub hidden: usize,
    pub fuse: usize,
    pub use_neighbors: bool,
}

impl Default for TdConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            fuse: 128,
            use_neighbors: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryEncoder {
    pub config: TdConfig,
    pub t_future: usize,
    pub lstm: Lstm,
    pub fuse: Linear,
    pub head: Linear,
}

/// Constant `[B, 1, N]` weights of a masked mean (rows with no set mask
/// entry are zero).
pub(crate) fn mean_weights(mask: &Tensor) -> Tensor {
    let (b, n) = (mask.shape()[0], mask.shape()[1]);
    let mut w = mask.clone();
    for i in 0..b {
        let row = &mut w.data_mut()[i * n..(i + 1) * n];
        let c: f64 = row.iter().sum();
        if c > 0.0 {
            for v in row {
                *v /= c;
            }
        }
    }
    w.reshape(&[b, 1, n]).expect("same element count")
}

impl TrajectoryEncoder {
    pub fn new(
        store: &mut ParamStore,
        config: TdConfig,
        t_future: usize,
        rng: &mut NormalStream,
    ) -> Self {
        let h = config.hidden;
        let lstm = Lstm::new(store, "td.lstm", Group::Td, 2, h, rng);
        let fuse = Linear::new(store, "td.fuse", Group::Td, 2 * h, config.fuse, rng, 1.0);
        let head = Linear::new(
            store,
            "td.head",
            Group::Td,
            config.fuse,
            t_future * PARAMS_PER_STEP,
            rng,
            0.1,
        );
        Self {
            config,
            t_future,
            lstm,
            fuse,
            head,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.lstm.params();
        v.extend(self.fuse.params());
        v.extend(self.head.params());
        v
    }

    /// Unconstrained parameters `[B, t_future * 5]` for a batch with futures.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, batch: &Batch) -> Result<Var> {
        let (b, n, h) = (batch.size, batch.max_neighbors, self.config.hidden);
        let use_nbr = self.config.use_neighbors && n > 0;
        let steps: Vec<Var> = if use_nbr {
            batch
                .agent_steps(true)
                .into_iter()
                .map(|t| tape.constant(t))
                .collect()
        } else {
            batch
                .ego_future
                .data()
                .chunks(batch.t_future * 2)
                .fold(
                    alloc::vec![Vec::with_capacity(b * 2); batch.t_future],
                    |mut acc, w| {
                        for (s, p) in w.chunks(2).enumerate() {
                            acc[s].extend_from_slice(p);
                        }
                        acc
                    },
                )
                .into_iter()
                .map(|d| tape.constant(Tensor::new(&[b, 2], d).expect("rows")))
                .collect()
        };
        let hall = self.lstm.forward(tape, store, &steps)?;
        let ego = tape.slice(hall, 0, 0, b)?;
        let agg = if use_nbr {
            let nb = tape.slice(hall, 0, b, b * n)?;
            let nb = tape.reshape(nb, &[b, n, h])?;
            let w = tape.constant(mean_weights(&batch.mask));
            let m = tape.bmm(w, nb)?;
            tape.reshape(m, &[b, h])?
        } else {
            tape.constant(Tensor::zeros(&[b, h]))
        };
        let x = tape.concat(&[ego, agg], 1)?;
        let f = self.fuse.forward(tape, store, x)?;
        let f = tape.tanh(f);
        self.head.forward(tape, store, f)
    }

    /// Batch-mean NLL of each window's own future.
    pub fn loss(&self, tape: &mut Tape, store: &ParamStore, batch: &Batch) -> Result<Var> {
        let u = self.forward(tape, store, batch)?;
        let y = tape.constant(batch.truth());
        gaussian::nll_loss(tape, u, y)
    }

    /// Distribution for a single window.
    pub fn encode_future(&self, store: &ParamStore, window: &SceneWindow) -> Result<GaussianSeq> {
        let batch = Batch::from_windows(&[window])?;
        let mut tape = Tape::no_grad();
        let u = self.forward(&mut tape, store, &batch)?;
        gaussian::from_unconstrained(tape.value(u).data())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_check, FdOptions};
    use crate::nn::zero_params;
    use crate::synthetic::{generate, SyntheticConfig};

    fn setup(seed: u64) -> (ParamStore, TrajectoryEncoder) {
        let mut store = ParamStore::new();
        let mut rng = NormalStream::new(seed, 0);
        let td = TrajectoryEncoder::new(
            &mut store,
            TdConfig {
                hidden: 6,
                fuse: 8,
                use_neighbors: true,
            },
            12,
            &mut rng,
        );
        (store, td)
    }

    fn windows() -> Vec<SceneWindow> {
        generate(&SyntheticConfig {
            train: 6,
            test: 0,
            ..SyntheticConfig::default()
        })
        .train_windows()
    }

    #[test]
    fn zero_head_gives_standard_normals() {
        let (mut store, td) = setup(1);
        zero_params(&mut store, &td.head.params());
        let d = td.encode_future(&store, &windows()[0]).unwrap();
        assert_eq!(d, GaussianSeq::standard(12));
    }

    #[test]
    fn neighbor_order_does_not_matter() {
        let (store, td) = setup(2);
        let mut w = windows()
            .into_iter()
            .find(|w| w.neighbor_count() == 1)
            .unwrap();
        let mut extra = w.clone();
        extra.neighbor_pasts[0][0][0] += 0.3;
        extra.neighbor_futures[0][3][1] -= 0.2;
        w.neighbor_ids.push(9);
        w.neighbor_pasts.push(extra.neighbor_pasts[0].clone());
        w.neighbor_futures.push(extra.neighbor_futures[0].clone());
        w.neighbor_observed.push(extra.neighbor_observed[0].clone());
        w.social_mask.push(true);
        let mut rev = w.clone();
        rev.neighbor_ids.reverse();
        rev.neighbor_pasts.reverse();
        rev.neighbor_futures.reverse();
        rev.neighbor_observed.reverse();
        rev.social_mask.reverse();
        let a = to_vec(&td.encode_future(&store, &w).unwrap());
        let b = to_vec(&td.encode_future(&store, &rev).unwrap());
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    fn to_vec(d: &GaussianSeq) -> Vec<f64> {
        gaussian::to_unconstrained(d).0
    }

    #[test]
    fn empty_neighbor_set_uses_only_the_ego() {
        let (store, td) = setup(3);
        let mut w = windows()[0].clone();
        w.neighbor_ids.clear();
        w.neighbor_pasts.clear();
        w.neighbor_futures.clear();
        w.neighbor_observed.clear();
        w.social_mask.clear();
        let mut masked = windows()
            .into_iter()
            .find(|w| w.neighbor_count() == 1)
            .unwrap();
        w.ego_future = masked.ego_future.clone();
        masked.social_mask = alloc::vec![false; masked.neighbor_count()];
        let a = to_vec(&td.encode_future(&store, &w).unwrap());
        let b = to_vec(&td.encode_future(&store, &masked).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn nll_gradient_matches_finite_differences() {
        let (store, td) = setup(4);
        let ws = windows();
        let refs: Vec<&SceneWindow> = ws[..2].iter().collect();
        let batch = Batch::from_windows(&refs).unwrap();
        let report = finite_diff_check(
            &store,
            |s| {
                let mut t = Tape::new();
                let l = td.loss(&mut t, s, &batch)?;
                Ok((t, l))
            },
            FdOptions {
                max_entries: Some(12),
                ..FdOptions::default()
            },
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }
}
