//! Adam.

use alloc::string::ToString;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::params::{ParamId, ParamStore};
use crate::tape::Gradients;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
}

impl OptimizerState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn first_moment(&self, id: ParamId) -> Option<&Tensor> {
        self.m.get(id.index()).and_then(|m| m.as_ref())
    }

    pub fn second_moment(&self, id: ParamId) -> Option<&Tensor> {
        self.v.get(id.index()).and_then(|v| v.as_ref())
    }

    /// One update over every parameter that has a gradient. Parameters
    /// without a gradient are left alone, including their moments.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)]) -> Result<()> {
        for (id, g) in grads {
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient(store.name(*id).to_string()));
            }
        }
        let scale = match self.config.clip_norm {
            Some(c) => {
                let n2: f64 = grads
                    .iter()
                    .map(|(_, g)| g.data().iter().map(|x| x * x).sum::<f64>())
                    .sum();
                let n = math::sqrt(n2);
                if n > c {
                    c / n
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            ..
        } = self.config;
        let t = self.step as f64;
        let bc1 = 1.0 - math::pow(beta1, t);
        let bc2 = 1.0 - math::pow(beta2, t);
        let len = store.len();
        self.m.resize(len, None);
        self.v.resize(len, None);
        for (id, g) in grads {
            let i = id.index();
            let shape = store.get(*id).shape().to_vec();
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(&shape));
            let v = self.v[i].get_or_insert_with(|| Tensor::zeros(&shape));
            let p = store.get_mut(*id).data_mut();
            for (((pj, mj), vj), &gj) in p
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                let gj = gj * scale;
                *mj = beta1 * *mj + (1.0 - beta1) * gj;
                *vj = beta2 * *vj + (1.0 - beta2) * gj * gj;
                let mh = *mj / bc1;
                let vh = *vj / bc2;
                *pj -= lr * mh / (math::sqrt(vh) + eps);
            }
        }
        Ok(())
    }

    /// Convenience wrapper taking tape gradients directly.
    pub fn apply(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        let list: Vec<(ParamId, Tensor)> = grads.params().map(|(id, g)| (id, g.clone())).collect();
        self.step(store, &list)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Group;

    fn scalar_store(x: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("x", Group::Td, Tensor::scalar(x));
        (s, id)
    }

    #[test]
    fn zero_gradient_leaves_param_unchanged() {
        let (mut s, id) = scalar_store(1.5);
        let mut opt = OptimizerState::new(AdamConfig::default());
        opt.step(&mut s, &[(id, Tensor::scalar(0.0))]).unwrap();
        assert_eq!(s.get(id).item().unwrap(), 1.5);
        assert_eq!(opt.step, 1);
        assert_eq!(opt.first_moment(id).unwrap().item().unwrap(), 0.0);
    }

    #[test]
    fn constant_gradient_decreases_monotonically() {
        let (mut s, id) = scalar_store(0.0);
        let mut opt = OptimizerState::new(AdamConfig::default());
        let mut prev = 0.0;
        for _ in 0..200 {
            opt.step(&mut s, &[(id, Tensor::scalar(0.7))]).unwrap();
            let x = s.get(id).item().unwrap();
            assert!(x < prev);
            prev = x;
        }
    }

    #[test]
    fn converges_on_convex_quadratic() {
        // f(x) = (x - 3)^2, starting from x = 10
        let (mut s, id) = scalar_store(10.0);
        let mut opt = OptimizerState::new(AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        });
        for _ in 0..500 {
            let x = s.get(id).item().unwrap();
            opt.step(&mut s, &[(id, Tensor::scalar(2.0 * (x - 3.0)))])
                .unwrap();
        }
        let x = s.get(id).item().unwrap();
        assert!((x - 3.0).abs() < 1e-2, "x = {x}");
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let (mut s, id) = scalar_store(0.0);
        let mut opt = OptimizerState::new(AdamConfig::default());
        let err = opt
            .step(&mut s, &[(id, Tensor::scalar(f64::NAN))])
            .unwrap_err();
        assert_eq!(err, Error::NonFiniteGradient("x".into()));
        assert_eq!(opt.step, 0);
    }
}
