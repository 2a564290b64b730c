//! Layers built from tape primitives.

use alloc::format;
use alloc::vec::Vec;

use crate::error::Result;
use crate::math;
use crate::params::{Group, ParamId, ParamStore};
use crate::rng::NormalStream;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Weight tensor with entries `N(0, gain^2 / fan_in)`.
pub fn init_weight(rng: &mut NormalStream, fan_in: usize, fan_out: usize, gain: f64) -> Tensor {
    let s = gain / math::sqrt(fan_in.max(1) as f64);
    let mut t = rng.normal_tensor(&[fan_in, fan_out]);
    for v in t.data_mut() {
        *v *= s;
    }
    t
}

/// `y = x W + b` with `W: [input, output]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: Group,
        input: usize,
        output: usize,
        rng: &mut NormalStream,
        gain: f64,
    ) -> Self {
        let w = store.add(
            format!("{name}.w"),
            group,
            init_weight(rng, input, output, gain),
        );
        let b = store.add(format!("{name}.b"), group, Tensor::zeros(&[output]));
        Self {
            w,
            b: Some(b),
            input,
            output,
        }
    }

    /// Layer without bias.
    pub fn no_bias(
        store: &mut ParamStore,
        name: &str,
        group: Group,
        input: usize,
        output: usize,
        rng: &mut NormalStream,
        gain: f64,
    ) -> Self {
        let w = store.add(
            format!("{name}.w"),
            group,
            init_weight(rng, input, output, gain),
        );
        Self {
            w,
            b: None,
            input,
            output,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let y = tape.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add_tiled(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = alloc::vec![self.w];
        v.extend(self.b);
        v
    }
}

/// Long short-term memory cell; gate order (input, forget, cell, output).
#[derive(Clone, Debug, PartialEq)]
pub struct Lstm {
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl Lstm {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: Group,
        input: usize,
        hidden: usize,
        rng: &mut NormalStream,
    ) -> Self {
        let wx = store.add(
            format!("{name}.wx"),
            group,
            init_weight(rng, input, 4 * hidden, 1.0),
        );
        let wh = store.add(
            format!("{name}.wh"),
            group,
            init_weight(rng, hidden, 4 * hidden, 1.0),
        );
        let mut bias = Tensor::zeros(&[4 * hidden]);
        // forget gate starts open
        for v in &mut bias.data_mut()[hidden..2 * hidden] {
            *v = 1.0;
        }
        let b = store.add(format!("{name}.b"), group, bias);
        Self {
            wx,
            wh,
            b,
            input,
            hidden,
        }
    }

    /// Runs the cell over `steps` (each `[rows, input]`) from a zero state
    /// and returns the final hidden state `[rows, hidden]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, steps: &[Var]) -> Result<Var> {
        let rows = tape.value(steps[0]).rows();
        let h_dim = self.hidden;
        let wx = tape.param(store, self.wx);
        let wh = tape.param(store, self.wh);
        let b = tape.param(store, self.b);
        let mut h = tape.constant(Tensor::zeros(&[rows, h_dim]));
        let mut c = tape.constant(Tensor::zeros(&[rows, h_dim]));
        for &x in steps {
            let gx = tape.matmul(x, wx)?;
            let gh = tape.matmul(h, wh)?;
            let pre = tape.add(gx, gh)?;
            let pre = tape.add_tiled(pre, b)?;
            let i = tape.slice(pre, 1, 0, h_dim)?;
            let f = tape.slice(pre, 1, h_dim, h_dim)?;
            let g = tape.slice(pre, 1, 2 * h_dim, h_dim)?;
            let o = tape.slice(pre, 1, 3 * h_dim, h_dim)?;
            let i = tape.sigmoid(i);
            let f = tape.sigmoid(f);
            let g = tape.tanh(g);
            let o = tape.sigmoid(o);
            let fc = tape.mul(f, c)?;
            let ig = tape.mul(i, g)?;
            c = tape.add(fc, ig)?;
            let tc = tape.tanh(c);
            h = tape.mul(o, tc)?;
        }
        Ok(h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        alloc::vec![self.wx, self.wh, self.b]
    }
}

/// Stack of linear layers with `tanh` between them.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: Group,
        dims: &[usize],
        rng: &mut NormalStream,
    ) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, d)| Linear::new(store, &format!("{name}.{i}"), group, d[0], d[1], rng, 1.0))
            .collect();
        Self { layers }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len().saturating_sub(1);
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(tape, store, h)?;
            if i < last {
                h = tape.tanh(h);
            }
        }
        Ok(h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }
}

/// Sets every listed parameter to zero.
pub fn zero_params(store: &mut ParamStore, ids: &[ParamId]) {
    for &id in ids {
        for v in store.get_mut(id).data_mut() {
            *v = 0.0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_check, FdOptions};

    #[test]
    fn lstm_with_zero_weights_and_input_gives_zero_state() {
        let mut store = ParamStore::new();
        let mut rng = NormalStream::new(0, 0);
        let lstm = Lstm::new(&mut store, "l", Group::Gg, 2, 8, &mut rng);
        zero_params(&mut store, &lstm.params());
        let mut tape = Tape::new();
        let xs: Vec<Var> = (0..4)
            .map(|_| tape.constant(Tensor::zeros(&[3, 2])))
            .collect();
        let h = lstm.forward(&mut tape, &store, &xs).unwrap();
        assert!(tape.value(h).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lstm_gradients_match_finite_differences() {
        let mut store = ParamStore::new();
        let mut rng = NormalStream::new(1, 0);
        let lstm = Lstm::new(&mut store, "l", Group::Gg, 2, 5, &mut rng);
        let head = Linear::new(&mut store, "h", Group::Gg, 5, 1, &mut rng, 1.0);
        let xs: Vec<Tensor> = (0..3).map(|_| rng.normal_tensor(&[2, 2])).collect();
        let report = finite_diff_check(
            &store,
            |s| {
                let mut t = Tape::new();
                let vs: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
                let h = lstm.forward(&mut t, s, &vs)?;
                let y = head.forward(&mut t, s, h)?;
                let o = t.sum(y);
                Ok((t, o))
            },
            FdOptions {
                step: 1e-5,
                tolerance: 1e-6,
                ..FdOptions::default()
            },
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }
}
