//! Dynamic reverse-mode autodiff tape.
//!
//! Every primitive evaluates eagerly and appends one node; node inputs
//! always precede the node, so the backward pass is a single sweep over the
//! nodes in reverse order. A tape is rebuilt for each forward pass.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math::{self, gemm};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node of a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, tb: bool },
    Bmm { a: Var, b: Var, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddTiled(Var, Var),
    MulTiled(Var, Var),
    RepeatRows(Var, usize),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Sqrt(Var),
    Clamp(Var, f64, f64),
    Softmax(Var),
    MaskedSoftmax(Var),
    Concat(Vec<Var>, usize),
    Slice { a: Var, axis: usize, start: usize },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    L2Norm(Var),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    grad: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bound: Vec<Option<Var>>,
    bindings: Vec<(ParamId, Var)>,
    no_grad: bool,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    bindings: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient of the output with respect to `v`, if `v` required one.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for a bound parameter (None when frozen or unused).
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.bindings
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| self.wrt(*v))
    }

    /// All parameter gradients in binding order.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.bindings
            .iter()
            .filter_map(|(p, v)| self.wrt(*v).map(|g| (*p, g)))
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Tape on which parameters never require gradients. Explicit
    /// [`Tape::leaf`] inputs still do.
    pub fn no_grad() -> Self {
        Self {
            no_grad: true,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    fn push(&mut self, value: Tensor, op: Op, grad: bool) -> Var {
        self.nodes.push(Node { value, op, grad });
        Var(self.nodes.len() - 1)
    }

    fn g(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    /// Input that is differentiated against.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Input treated as a constant.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Binds a stored parameter, reusing the node on repeated use.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if self.bound.len() <= id.index() {
            self.bound.resize(id.index() + 1, None);
        }
        if let Some(v) = self.bound[id.index()] {
            return v;
        }
        let grad = !self.no_grad && store.is_trainable(id);
        let v = self.push(store.get(id).clone(), Op::Leaf, grad);
        self.bound[id.index()] = Some(v);
        self.bindings.push((id, v));
        v
    }

    /// Matrix product. `a` may have any rank >= 2 (its leading axes are
    /// flattened into rows); `b` is `[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a * b^T` with `b` stored as `[n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, tb: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() < 2 || bv.rank() != 2 {
            return Err(shape_err("matmul", av.shape(), bv.shape()));
        }
        let k = av.cols();
        let m = av.rows();
        let (bk, n) = if tb {
            (bv.shape()[1], bv.shape()[0])
        } else {
            (bv.shape()[0], bv.shape()[1])
        };
        if bk != k {
            return Err(shape_err("matmul", av.shape(), bv.shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), false, bv.data(), tb, 0.0, &mut out);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let grad = self.g(a) || self.g(b);
        Ok(self.push(Tensor::new(&shape, out)?, Op::MatMul { a, b, tb }, grad))
    }

    /// Batched matrix product `[B, m, k] x [B, k, n] -> [B, m, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bmm_impl(a, b, false)
    }

    /// Batched `a * b^T` with `b` stored as `[B, n, k]`.
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bmm_impl(a, b, true)
    }

    fn bmm_impl(&mut self, a: Var, b: Var, tb: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 3 || bv.rank() != 3 || av.shape()[0] != bv.shape()[0] {
            return Err(shape_err("bmm", av.shape(), bv.shape()));
        }
        let (nb, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let (bk, n) = if tb {
            (bv.shape()[2], bv.shape()[1])
        } else {
            (bv.shape()[1], bv.shape()[2])
        };
        if bk != k {
            return Err(shape_err("bmm", av.shape(), bv.shape()));
        }
        let mut out = vec![0.0; nb * m * n];
        for i in 0..nb {
            gemm(
                m,
                k,
                n,
                &av.data()[i * m * k..(i + 1) * m * k],
                false,
                &bv.data()[i * k * n..(i + 1) * k * n],
                tb,
                0.0,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let grad = self.g(a) || self.g(b);
        Ok(self.push(Tensor::new(&[nb, m, n], out)?, Op::Bmm { a, b, tb }, grad))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(name, av.shape(), bv.shape()));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(av.shape(), data)?;
        let grad = self.g(a) || self.g(b);
        Ok(self.push(t, op, grad))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    fn tiled_check(&self, x: Var, y: Var, name: &'static str) -> Result<usize> {
        let (xv, yv) = (self.value(x), self.value(y));
        let c = xv.cols();
        if yv.cols() != c || yv.rows() == 0 || xv.rows() % yv.rows() != 0 {
            return Err(shape_err(name, xv.shape(), yv.shape()));
        }
        Ok(yv.numel())
    }

    /// `x + y` where the rows of `y` are tiled over the rows of `x`
    /// (row `r` of `x` pairs with row `r % rows(y)`). A bias `[c]` is the
    /// one-row case.
    pub fn add_tiled(&mut self, x: Var, y: Var) -> Result<Var> {
        let p = self.tiled_check(x, y, "add_tiled")?;
        let yd = self.value(y).data();
        let mut out = self.value(x).clone();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o += yd[i % p];
        }
        let grad = self.g(x) || self.g(y);
        Ok(self.push(out, Op::AddTiled(x, y), grad))
    }

    /// Row-tiled elementwise product, see [`Tape::add_tiled`].
    pub fn mul_tiled(&mut self, x: Var, y: Var) -> Result<Var> {
        let p = self.tiled_check(x, y, "mul_tiled")?;
        let yd = self.value(y).data();
        let mut out = self.value(x).clone();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o *= yd[i % p];
        }
        let grad = self.g(x) || self.g(y);
        Ok(self.push(out, Op::MulTiled(x, y), grad))
    }

    /// `[b, c] -> [b * rep, c]`, each row repeated `rep` times in place.
    pub fn repeat_rows(&mut self, y: Var, rep: usize) -> Result<Var> {
        let yv = self.value(y);
        if yv.rank() != 2 || rep == 0 {
            return Err(shape_err("repeat_rows", yv.shape(), &[rep]));
        }
        let (b, c) = (yv.shape()[0], yv.shape()[1]);
        let mut out = Vec::with_capacity(b * rep * c);
        for r in 0..b {
            for _ in 0..rep {
                out.extend_from_slice(yv.row(r));
            }
        }
        let t = Tensor::new(&[b * rep, c], out)?;
        let grad = self.g(y);
        Ok(self.push(t, Op::RepeatRows(y, rep), grad))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(a).map(f);
        let grad = self.g(a);
        self.push(t, op, grad)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| c * x, Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, math::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, math::sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, math::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, math::ln, Op::Log(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, math::sqrt, Op::Sqrt(a))
    }

    /// Elementwise clamp; the gradient is zero outside `[lo, hi]`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        let s = self.sigmoid(a);
        // same shapes by construction
        self.mul(a, s).expect("silu shapes")
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let c = av.cols();
        let mut out = av.clone();
        if c > 0 {
            for row in out.data_mut().chunks_mut(c) {
                let m = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
                let mut s = 0.0;
                for x in row.iter_mut() {
                    *x = math::exp(*x - m);
                    s += *x;
                }
                for x in row.iter_mut() {
                    *x /= s;
                }
            }
        }
        let grad = self.g(a);
        self.push(out, Op::Softmax(a), grad)
    }

    /// Softmax along the last axis over entries where `mask` is nonzero;
    /// masked entries are exactly 0 and fully masked rows are all zeros.
    pub fn masked_softmax(&mut self, a: Var, mask: &Tensor) -> Result<Var> {
        let av = self.value(a);
        if av.shape() != mask.shape() {
            return Err(shape_err("masked_softmax", av.shape(), mask.shape()));
        }
        let c = av.cols();
        let mut out = av.clone();
        if c > 0 {
            for (row, mrow) in out.data_mut().chunks_mut(c).zip(mask.data().chunks(c)) {
                let m = row
                    .iter()
                    .zip(mrow)
                    .filter(|(_, &k)| k != 0.0)
                    .fold(f64::NEG_INFINITY, |m, (&x, _)| m.max(x));
                let mut s = 0.0;
                for (x, &k) in row.iter_mut().zip(mrow) {
                    *x = if k != 0.0 { math::exp(*x - m) } else { 0.0 };
                    s += *x;
                }
                if s > 0.0 {
                    for x in row.iter_mut() {
                        *x /= s;
                    }
                }
            }
        }
        let grad = self.g(a);
        Ok(self.push(out, Op::MaskedSoftmax(a), grad))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.value(*parts.first().ok_or_else(|| shape_err("concat", &[], &[]))?);
        let rank = first.rank();
        if axis >= rank {
            return Err(shape_err("concat", first.shape(), &[axis]));
        }
        let mut shape = first.shape().to_vec();
        let mut total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            let same = s.len() == rank
                && s.iter()
                    .zip(&shape)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !same {
                return Err(shape_err("concat", &shape, s));
            }
            total += s[axis];
        }
        shape[axis] = total;
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let pv = self.value(p);
                let w = pv.shape()[axis] * inner;
                out.extend_from_slice(&pv.data()[o * w..(o + 1) * w]);
            }
        }
        let grad = parts.iter().any(|&p| self.g(p));
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Concat(parts.to_vec(), axis),
            grad,
        ))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        if axis >= av.rank() || start + len > av.shape()[axis] {
            return Err(shape_err("slice", av.shape(), &[axis, start, len]));
        }
        let mut shape = av.shape().to_vec();
        let full = shape[axis];
        shape[axis] = len;
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full * inner + start * inner;
            out.extend_from_slice(&av.data()[base..base + len * inner]);
        }
        let grad = self.g(a);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Slice { a, axis, start },
            grad,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshape(shape)?;
        let grad = self.g(a);
        Ok(self.push(t, Op::Reshape(a), grad))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let grad = self.g(a);
        self.push(Tensor::scalar(s), Op::Sum(a), grad)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.numel().max(1) as f64;
        let grad = self.g(a);
        self.push(Tensor::scalar(s), Op::Mean(a), grad)
    }

    /// Euclidean norm of all entries.
    pub fn l2_norm(&mut self, a: Var) -> Var {
        let s = math::sqrt(self.value(a).data().iter().map(|x| x * x).sum());
        let grad = self.g(a);
        self.push(Tensor::scalar(s), Op::L2Norm(a), grad)
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        let ov = self.value(out);
        if ov.numel() != 1 {
            return Err(Error::NonScalar(ov.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(Tensor::full(ov.shape(), 1.0));
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            bindings: self.bindings.clone(),
        })
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Tensor>], v: Var) -> Option<&'a mut Tensor> {
        if !self.nodes[v.0].grad {
            return None;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.nodes[v.0].value.shape()));
        }
        slot.as_mut()
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = &self.nodes[i].value;
        let gd = g.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul { a, b, tb } => {
                let (av, bv) = (self.value(a), self.value(b));
                let (m, k) = (av.rows(), av.cols());
                let n = y.cols();
                if let Some(ga) = self.acc(grads, a) {
                    // dA = G * op(B)^T
                    gemm(m, n, k, gd, false, bv.data(), !tb, 1.0, ga.data_mut());
                }
                if let Some(gb) = self.acc(grads, b) {
                    if tb {
                        gemm(n, m, k, gd, true, av.data(), false, 1.0, gb.data_mut());
                    } else {
                        gemm(k, m, n, av.data(), true, gd, false, 1.0, gb.data_mut());
                    }
                }
            }
            &Op::Bmm { a, b, tb } => {
                let (av, bv) = (self.value(a), self.value(b));
                let (nb, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = y.shape()[2];
                if let Some(ga) = self.acc(grads, a) {
                    for s in 0..nb {
                        gemm(
                            m,
                            n,
                            k,
                            &gd[s * m * n..(s + 1) * m * n],
                            false,
                            &bv.data()[s * k * n..(s + 1) * k * n],
                            !tb,
                            1.0,
                            &mut ga.data_mut()[s * m * k..(s + 1) * m * k],
                        );
                    }
                }
                if let Some(gb) = self.acc(grads, b) {
                    for s in 0..nb {
                        let gs = &gd[s * m * n..(s + 1) * m * n];
                        let as_ = &av.data()[s * m * k..(s + 1) * m * k];
                        let out = &mut gb.data_mut()[s * k * n..(s + 1) * k * n];
                        if tb {
                            gemm(n, m, k, gs, true, as_, false, 1.0, out);
                        } else {
                            gemm(k, m, n, as_, true, gs, false, 1.0, out);
                        }
                    }
                }
            }
            &Op::Add(a, b) => {
                if let Some(ga) = self.acc(grads, a) {
                    ga.axpy(1.0, gd);
                }
                if let Some(gb) = self.acc(grads, b) {
                    gb.axpy(1.0, gd);
                }
            }
            &Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, a) {
                    ga.axpy(1.0, gd);
                }
                if let Some(gb) = self.acc(grads, b) {
                    gb.axpy(-1.0, gd);
                }
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                if let Some(ga) = self.acc(grads, a) {
                    for ((o, &gg), &x) in ga.data_mut().iter_mut().zip(gd).zip(bv) {
                        *o += gg * x;
                    }
                }
                if let Some(gb) = self.acc(grads, b) {
                    for ((o, &gg), &x) in gb.data_mut().iter_mut().zip(gd).zip(av) {
                        *o += gg * x;
                    }
                }
            }
            &Op::Div(a, b) => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                if let Some(ga) = self.acc(grads, a) {
                    for ((o, &gg), &x) in ga.data_mut().iter_mut().zip(gd).zip(bv) {
                        *o += gg / x;
                    }
                }
                if let Some(gb) = self.acc(grads, b) {
                    for (j, o) in gb.data_mut().iter_mut().enumerate() {
                        *o -= gd[j] * av[j] / (bv[j] * bv[j]);
                    }
                }
            }
            &Op::AddTiled(x, yv) => {
                if let Some(gx) = self.acc(grads, x) {
                    gx.axpy(1.0, gd);
                }
                if let Some(gy) = self.acc(grads, yv) {
                    let p = gy.numel();
                    let o = gy.data_mut();
                    for (j, &gg) in gd.iter().enumerate() {
                        o[j % p] += gg;
                    }
                }
            }
            &Op::MulTiled(x, yv) => {
                let (xd, yd) = (self.value(x).data(), self.value(yv).data());
                let p = yd.len();
                if let Some(gx) = self.acc(grads, x) {
                    for (j, o) in gx.data_mut().iter_mut().enumerate() {
                        *o += gd[j] * yd[j % p];
                    }
                }
                if let Some(gy) = self.acc(grads, yv) {
                    let o = gy.data_mut();
                    for (j, &gg) in gd.iter().enumerate() {
                        o[j % p] += gg * xd[j];
                    }
                }
            }
            &Op::RepeatRows(a, rep) => {
                if let Some(ga) = self.acc(grads, a) {
                    let c = ga.cols();
                    let o = ga.data_mut();
                    for (r, row) in gd.chunks(c).enumerate() {
                        let dst = &mut o[(r / rep) * c..(r / rep + 1) * c];
                        for (d, s) in dst.iter_mut().zip(row) {
                            *d += s;
                        }
                    }
                }
            }
            &Op::Scale(a, c) => {
                if let Some(ga) = self.acc(grads, a) {
                    ga.axpy(c, gd);
                }
            }
            &Op::AddScalar(a) | &Op::Reshape(a) => {
                if let Some(ga) = self.acc(grads, a) {
                    ga.axpy(1.0, gd);
                }
            }
            &Op::Tanh(a) => self.elementwise(grads, a, gd, |_, yv| 1.0 - yv * yv, y),
            &Op::Sigmoid(a) => self.elementwise(grads, a, gd, |_, yv| yv * (1.0 - yv), y),
            &Op::Exp(a) => self.elementwise(grads, a, gd, |_, yv| yv, y),
            &Op::Log(a) => self.elementwise(grads, a, gd, |x, _| 1.0 / x, y),
            &Op::Square(a) => self.elementwise(grads, a, gd, |x, _| 2.0 * x, y),
            &Op::Sqrt(a) => self.elementwise(grads, a, gd, |_, yv| 0.5 / yv, y),
            &Op::Clamp(a, lo, hi) => self.elementwise(
                grads,
                a,
                gd,
                |x, _| if x >= lo && x <= hi { 1.0 } else { 0.0 },
                y,
            ),
            &Op::Softmax(a) | &Op::MaskedSoftmax(a) => {
                if let Some(ga) = self.acc(grads, a) {
                    let c = y.cols();
                    let o = ga.data_mut();
                    for ((orow, yrow), grow) in
                        o.chunks_mut(c).zip(y.data().chunks(c)).zip(gd.chunks(c))
                    {
                        let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                        for ((d, &yy), &gg) in orow.iter_mut().zip(yrow).zip(grow) {
                            *d += yy * (gg - dot);
                        }
                    }
                }
            }
            Op::Concat(parts, axis) => {
                let axis = *axis;
                let shape = y.shape();
                let outer: usize = shape[..axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).shape()[axis] * inner;
                    if let Some(gp) = self.acc(grads, p) {
                        let o = gp.data_mut();
                        for r in 0..outer {
                            let src = &gd[r * total + offset..r * total + offset + w];
                            for (d, s) in o[r * w..(r + 1) * w].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    offset += w;
                }
            }
            &Op::Slice { a, axis, start } => {
                let full = self.value(a).shape()[axis];
                let shape = y.shape();
                let len = shape[axis];
                let outer: usize = shape[..axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                if let Some(ga) = self.acc(grads, a) {
                    let o = ga.data_mut();
                    for r in 0..outer {
                        let base = r * full * inner + start * inner;
                        let src = &gd[r * len * inner..(r + 1) * len * inner];
                        for (d, s) in o[base..base + len * inner].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
            &Op::Sum(a) => {
                if let Some(ga) = self.acc(grads, a) {
                    let gg = gd[0];
                    for d in ga.data_mut() {
                        *d += gg;
                    }
                }
            }
            &Op::Mean(a) => {
                if let Some(ga) = self.acc(grads, a) {
                    let gg = gd[0] / ga.numel().max(1) as f64;
                    for d in ga.data_mut() {
                        *d += gg;
                    }
                }
            }
            &Op::L2Norm(a) => {
                let norm = y.data()[0];
                if norm > 0.0 {
                    let xd = self.value(a).data();
                    if let Some(ga) = self.acc(grads, a) {
                        ga.axpy(gd[0] / norm, xd);
                    }
                }
            }
        }
    }

    fn elementwise(
        &self,
        grads: &mut [Option<Tensor>],
        a: Var,
        gd: &[f64],
        d: impl Fn(f64, f64) -> f64,
        y: &Tensor,
    ) {
        let xd = self.value(a).data();
        if let Some(ga) = self.acc(grads, a) {
            for (j, o) in ga.data_mut().iter_mut().enumerate() {
                *o += gd[j] * d(xd[j], y.data()[j]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let a = tape.constant(t2(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let i = tape.constant(t2(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let c = tape.matmul(a, i).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[3]));
        let s = tape.softmax(x);
        for v in tape.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn tanh_sigmoid_at_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(0.0));
        let t = tape.tanh(x);
        let s = tape.sigmoid(x);
        assert_eq!(tape.value(t).item().unwrap(), 0.0);
        assert_eq!(tape.value(s).item().unwrap(), 0.5);
    }

    #[test]
    fn square_derivative() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.square(x);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).unwrap().item().unwrap(), 6.0);
    }

    #[test]
    fn softmax_sum_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.3, -1.2, 2.5, 0.0]));
        let s = tape.softmax(x);
        let total = tape.sum(s);
        let g = tape.backward(total).unwrap();
        for v in g.wrt(x).unwrap().data() {
            assert!(v.abs() < 1e-15);
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalar(_))));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            Error::Shape {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
        let c = tape.constant(Tensor::zeros(&[3]));
        assert!(tape.add(a, c).is_err());
    }

    #[test]
    fn masked_softmax_zeroes_masked_and_empty_rows() {
        let mut tape = Tape::new();
        let x = tape.leaf(t2(&[&[1.0, 2.0, 3.0], &[1.0, 1.0, 1.0]]));
        let mask = t2(&[&[1.0, 0.0, 1.0], &[0.0, 0.0, 0.0]]);
        let s = tape.masked_softmax(x, &mask).unwrap();
        let v = tape.value(s).data().to_vec();
        assert_eq!(v[1], 0.0);
        assert!((v[0] + v[2] - 1.0).abs() < 1e-15);
        assert_eq!(&v[3..], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn param_nodes_are_shared_and_frozen_groups_get_no_gradient() {
        use crate::params::Group;
        let mut store = ParamStore::new();
        let w = store.add("w", Group::Td, Tensor::scalar(2.0));
        let f = store.add("f", Group::Pd, Tensor::scalar(5.0));
        store.set_trainable(&[Group::Td]);
        let mut tape = Tape::new();
        let a = tape.param(&store, w);
        let b = tape.param(&store, w);
        assert_eq!(a, b);
        let c = tape.param(&store, f);
        let p = tape.mul(a, c).unwrap();
        let g = tape.backward(p).unwrap();
        assert_eq!(g.param(w).unwrap().item().unwrap(), 5.0);
        assert!(g.param(f).is_none());
    }

    proptest::proptest! {
        #[test]
        fn softmax_rows_sum_to_one(rows in proptest::collection::vec(proptest::collection::vec(-50.0f64..50.0, 5), 1..6)) {
            let mut tape = Tape::new();
            let n = rows.len();
            let x = tape.constant(Tensor::new(&[n, 5], rows.concat()).unwrap());
            let s = tape.softmax(x);
            for row in tape.value(s).data().chunks(5) {
                proptest::prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                proptest::prop_assert!(row.iter().all(|&v| v >= 0.0));
            }
        }
    }
}
