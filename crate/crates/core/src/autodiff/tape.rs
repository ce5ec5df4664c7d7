//! Reverse-mode tape.
//!
//! Nodes are appended in evaluation order, so every parent id is smaller
//! than its child id and a single reverse sweep visits nodes in a valid
//! topological order.

use super::gemm::gemm;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Adjoint of an operation whose forward value is computed by the caller.
///
/// Structured operations (splatting, sampling, sparse convolution, losses)
/// implement this instead of being spelled out as primitive chains.
pub trait Function: Send + Sync {
    fn name(&self) -> &'static str;

    /// Gradient with respect to each input, in input order. `None` means the
    /// input receives no gradient.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>>;
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    MatMul(Var, Var),
    Bmm { a: Var, b: Var, ta: bool, tb: bool },
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Softplus(Var),
    Gelu(Var),
    Softmax(Var),
    L2Normalize(Var),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    Concat(Vec<Var>, usize),
    Slice { x: Var, axis: usize, start: usize },
    Expand(Var),
    Reshape(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Custom(Vec<Var>, Box<dyn Function>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to a leaf. Leaves that do not
    /// influence the loss get a zero tensor; constants and interior nodes
    /// return `None`.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn wrt(&self, v: Var) -> &Tensor {
        self.get(v).expect("gradient requested for a constant or interior node")
    }
}

/// Single-writer record of a differentiable computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result shape of an elementwise binary op under leading-axis expansion.
fn binary_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a == b {
        return Ok(a.to_vec());
    }
    if a.len() > b.len() && a.ends_with(b) {
        return Ok(a.to_vec());
    }
    if b.len() > a.len() && b.ends_with(a) {
        return Ok(b.to_vec());
    }
    Err(Error::shape(op, format!("{a:?} vs {b:?}")))
}

/// Sum `g` (of length `n`) down to the trailing block of length `m`.
fn reduce_leading(g: &[f64], m: usize) -> Vec<f64> {
    let mut out = vec![0.0; m];
    for chunk in g.chunks(m) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x);
    (y, dy)
}

pub(crate) fn gelu(x: f64) -> f64 {
    gelu_parts(x).0
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Norm below which l2-normalization returns the zero vector.
pub const NORMALIZE_EPS: f64 = 1e-12;

/// Source flat index for each element of `target` when expanding `src`.
fn expand_index_map(src: &[usize], target: &[usize]) -> Vec<usize> {
    let offset = target.len() - src.len();
    let mut src_strides = vec![0usize; target.len()];
    let mut stride = 1;
    for i in (0..src.len()).rev() {
        src_strides[i + offset] = if src[i] == 1 { 0 } else { stride };
        stride *= src[i];
    }
    let n: usize = target.iter().product();
    let mut out = Vec::with_capacity(n);
    fn fill(axis: usize, base: usize, strides: &[usize], target: &[usize], out: &mut Vec<usize>) {
        let s = strides[axis];
        if axis + 1 == target.len() {
            out.extend((0..target[axis]).map(|i| base + i * s));
        } else {
            for i in 0..target[axis] {
                fill(axis + 1, base + i * s, strides, target, out);
            }
        }
    }
    if target.is_empty() {
        out.push(0);
    } else if n > 0 {
        fill(0, 0, &src_strides, target, &mut out);
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Record a structured op whose value has already been computed.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, f: impl Function + 'static) -> Var {
        let ng = self.any_grad(inputs);
        self.push(output, Op::Custom(inputs.to_vec(), Box::new(f)), ng)
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, bool)> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = binary_shape(name, ta.shape(), tb.shape())?;
        let n: usize = shape.iter().product();
        let (da, db) = (ta.data(), tb.data());
        let (la, lb) = (da.len(), db.len());
        let data = (0..n).map(|i| f(da[i % la], db[i % lb])).collect();
        Ok((Tensor::from_parts(shape, data), self.any_grad(&[a, b])))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, ng) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, ng) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, ng) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let t = self.value(a).map(|x| x * k);
        let ng = self.needs_grad(a);
        self.push(t, Op::Scale(a, k), ng)
    }

    /// Adds a constant to every element.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x + c);
        let ng = self.needs_grad(a);
        self.push(t, Op::Offset(a), ng)
    }

    /// `[n, k] x [k, m] -> [n, m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let data = gemm(self.value(a).data(), self.value(b).data(), n, k, m, false, false);
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![n, m], data), Op::MatMul(a, b), ng))
    }

    /// Batched product over a shared leading axis with optional transposes
    /// of the per-batch matrices.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::shape("bmm", format!("{sa:?} x {sb:?}")));
        }
        let (n, k) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (k2, m) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != k2 {
            return Err(Error::shape("bmm", format!("{sa:?} x {sb:?} (ta={ta}, tb={tb})")));
        }
        let batch = sa[0];
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut data = vec![0.0; batch * n * m];
        for (bi, out) in data.chunks_mut(n * m).enumerate() {
            super::gemm::gemm_into(
                out,
                &va[bi * n * k..(bi + 1) * n * k],
                &vb[bi * k * m..(bi + 1) * k * m],
                n,
                k,
                m,
                ta,
                tb,
            );
        }
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![batch, n, m], data), Op::Bmm { a, b, ta, tb }, ng))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(a).map(f);
        let ng = self.needs_grad(a);
        self.push(t, op, ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, gelu, Op::Gelu(a))
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let d = x.last_dim();
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(d) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let t = Tensor::from_parts(x.shape().to_vec(), out);
        let ng = self.needs_grad(a);
        self.push(t, Op::Softmax(a), ng)
    }

    /// Row-wise l2 normalization over the last axis; rows with norm below
    /// [`NORMALIZE_EPS`] map to zero.
    pub fn l2_normalize(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let d = x.last_dim();
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(d) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < NORMALIZE_EPS {
                row.iter_mut().for_each(|v| *v = 0.0);
            } else {
                row.iter_mut().for_each(|v| *v /= norm);
            }
        }
        let t = Tensor::from_parts(x.shape().to_vec(), out);
        let ng = self.needs_grad(a);
        self.push(t, Op::L2Normalize(a), ng)
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let ng = self.needs_grad(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let s = x.data().iter().sum::<f64>() / x.len() as f64;
        let ng = self.needs_grad(a);
        self.push(Tensor::scalar(s), Op::Mean(a), ng)
    }

    /// Sum over one axis, removing it (a rank-1 input yields shape `[1]`).
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("sum_axis", format!("axis {axis} of {shape:?}")));
        }
        let (outer, dim, inner) = split_axis(&shape, axis);
        let x = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..dim {
                let base = (o * dim + j) * inner;
                for i in 0..inner {
                    out[o * inner + i] += x[base + i];
                }
            }
        }
        let mut new_shape: Vec<usize> = shape.clone();
        new_shape.remove(axis);
        if new_shape.is_empty() {
            new_shape.push(1);
        }
        let ng = self.needs_grad(a);
        Ok(self.push(Tensor::from_parts(new_shape, out), Op::SumAxis(a, axis), ng))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} of {base:?}")));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", format!("{s:?} vs {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let t = self.value(*p);
                let dim = t.shape()[axis];
                data.extend_from_slice(&t.data()[o * dim * inner..(o + 1) * dim * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let ng = self.any_grad(parts);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Concat(parts.to_vec(), axis), ng))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape("slice", format!("{start}..{} on axis {axis} of {shape:?}", start + len)));
        }
        let (outer, dim, inner) = split_axis(&shape, axis);
        let x = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let b = (o * dim + start) * inner;
            data.extend_from_slice(&x[b..b + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let ng = self.needs_grad(a);
        Ok(self.push(Tensor::from_parts(out_shape, data), Op::Slice { x: a, axis, start }, ng))
    }

    /// Explicit broadcast: axes are right-aligned, and each source axis must
    /// equal the target axis or be 1. Missing leading axes are added.
    pub fn expand(&mut self, a: Var, target: &[usize]) -> Result<Var> {
        let src = self.shape(a).to_vec();
        let ok = target.len() >= src.len()
            && src.iter().rev().zip(target.iter().rev()).all(|(s, t)| s == t || *s == 1)
            && target.iter().all(|&d| d >= 1);
        if !ok {
            return Err(Error::shape("expand", format!("{src:?} -> {target:?}")));
        }
        let map = expand_index_map(&src, target);
        let x = self.value(a).data();
        let data = map.iter().map(|&i| x[i]).collect();
        let ng = self.needs_grad(a);
        Ok(self.push(Tensor::from_parts(target.to_vec(), data), Op::Expand(a), ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape.to_vec())?;
        let ng = self.needs_grad(a);
        Ok(self.push(t, Op::Reshape(a), ng))
    }

    /// Elementwise clamp; gradient passes where `lo <= x <= hi`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp { x: a, lo, hi })
    }

    /// Run the reverse sweep from a scalar output.
    ///
    /// Accumulators are allocated per call, so repeated calls on the same
    /// tape return identical gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let out = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::Contract(format!("node {} is not on this tape", loss.0)))?;
        if out.value.shape() != [1] {
            return Err(Error::Contract(format!(
                "backward needs a scalar output of shape [1], got {:?}",
                out.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            if let Some(g) = grads[i].take() {
                self.propagate(i, &g, &mut grads);
            }
        }
        for (i, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if node.needs_grad && matches!(node.op, Op::Leaf) && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        debug_assert_eq!(g.shape(), self.nodes[v.0].value.shape(), "adjoint shape");
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Adjoint for one side of a binary op, reducing expanded axes.
    fn binary_adjoint(&self, grads: &mut [Option<Tensor>], v: Var, full: Vec<f64>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let shape = self.shape(v).to_vec();
        let m: usize = shape.iter().product();
        let data = if full.len() == m { full } else { reduce_leading(&full, m) };
        self.accumulate(grads, v, Tensor::from_parts(shape, data));
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let gd = g.data();
        let elementwise = |x: Var, f: &dyn Fn(usize) -> f64| -> Tensor {
            let shape = self.shape(x).to_vec();
            Tensor::from_parts(shape, (0..gd.len()).map(f).collect())
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.binary_adjoint(grads, *a, gd.to_vec());
                self.binary_adjoint(grads, *b, gd.to_vec());
            }
            Op::Sub(a, b) => {
                self.binary_adjoint(grads, *a, gd.to_vec());
                self.binary_adjoint(grads, *b, gd.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                let (la, lb) = (da.len(), db.len());
                if self.needs_grad(*a) {
                    let full = gd.iter().enumerate().map(|(k, g)| g * db[k % lb]).collect();
                    self.binary_adjoint(grads, *a, full);
                }
                if self.needs_grad(*b) {
                    let full = gd.iter().enumerate().map(|(k, g)| g * da[k % la]).collect();
                    self.binary_adjoint(grads, *b, full);
                }
            }
            Op::Scale(a, k) => {
                let t = elementwise(*a, &|j| gd[j] * k);
                self.accumulate(grads, *a, t);
            }
            Op::Offset(a) | Op::Reshape(a) => {
                let t = Tensor::from_parts(self.shape(*a).to_vec(), gd.to_vec());
                self.accumulate(grads, *a, t);
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (n, k, m) = (sa[0], sa[1], sb[1]);
                if self.needs_grad(*a) {
                    let d = gemm(gd, self.value(*b).data(), n, m, k, false, true);
                    self.accumulate(grads, *a, Tensor::from_parts(vec![n, k], d));
                }
                if self.needs_grad(*b) {
                    let d = gemm(self.value(*a).data(), gd, k, n, m, true, false);
                    self.accumulate(grads, *b, Tensor::from_parts(vec![k, m], d));
                }
            }
            Op::Bmm { a, b, ta, tb } => self.bmm_adjoint(*a, *b, *ta, *tb, g, grads),
            Op::Exp(a) => {
                let t = elementwise(*a, &|j| gd[j] * y.data()[j]);
                self.accumulate(grads, *a, t);
            }
            Op::Log(a) => {
                let x = self.value(*a).data();
                let t = elementwise(*a, &|j| gd[j] / x[j]);
                self.accumulate(grads, *a, t);
            }
            Op::Tanh(a) => {
                let t = elementwise(*a, &|j| gd[j] * (1.0 - y.data()[j] * y.data()[j]));
                self.accumulate(grads, *a, t);
            }
            Op::Softplus(a) => {
                let x = self.value(*a).data();
                let t = elementwise(*a, &|j| gd[j] * sigmoid(x[j]));
                self.accumulate(grads, *a, t);
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                let t = elementwise(*a, &|j| gd[j] * gelu_parts(x[j]).1);
                self.accumulate(grads, *a, t);
            }
            Op::Softmax(a) => {
                let d = y.last_dim();
                let mut out = vec![0.0; gd.len()];
                for ((o, yr), gr) in out.chunks_mut(d).zip(y.data().chunks(d)).zip(gd.chunks(d)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for ((o, p), q) in o.iter_mut().zip(yr).zip(gr) {
                        *o = p * (q - dot);
                    }
                }
                self.accumulate(grads, *a, Tensor::from_parts(y.shape().to_vec(), out));
            }
            Op::L2Normalize(a) => {
                let x = self.value(*a);
                let d = x.last_dim();
                let mut out = vec![0.0; gd.len()];
                for (((o, xr), yr), gr) in
                    out.chunks_mut(d).zip(x.data().chunks(d)).zip(y.data().chunks(d)).zip(gd.chunks(d))
                {
                    let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm < NORMALIZE_EPS {
                        continue;
                    }
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for ((o, p), q) in o.iter_mut().zip(yr).zip(gr) {
                        *o = (q - p * dot) / norm;
                    }
                }
                self.accumulate(grads, *a, Tensor::from_parts(x.shape().to_vec(), out));
            }
            Op::Sum(a) => {
                let t = Tensor::full(self.shape(*a), gd[0]);
                self.accumulate(grads, *a, t);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                let t = Tensor::full(self.shape(*a), gd[0] / n);
                self.accumulate(grads, *a, t);
            }
            Op::SumAxis(a, axis) => {
                let shape = self.shape(*a).to_vec();
                let (outer, dim, inner) = split_axis(&shape, *axis);
                let mut out = vec![0.0; outer * dim * inner];
                for o in 0..outer {
                    for j in 0..dim {
                        let base = (o * dim + j) * inner;
                        out[base..base + inner].copy_from_slice(&gd[o * inner..(o + 1) * inner]);
                    }
                }
                self.accumulate(grads, *a, Tensor::from_parts(shape, out));
            }
            Op::Concat(parts, axis) => {
                let (outer, total, inner) = split_axis(y.shape(), *axis);
                let mut offset = 0;
                for p in parts {
                    let shape = self.shape(*p).to_vec();
                    let dim = shape[*axis];
                    if self.needs_grad(*p) {
                        let mut out = Vec::with_capacity(outer * dim * inner);
                        for o in 0..outer {
                            let b = (o * total + offset) * inner;
                            out.extend_from_slice(&gd[b..b + dim * inner]);
                        }
                        self.accumulate(grads, *p, Tensor::from_parts(shape, out));
                    }
                    offset += dim;
                }
            }
            Op::Slice { x, axis, start } => {
                let shape = self.shape(*x).to_vec();
                let (outer, dim, inner) = split_axis(&shape, *axis);
                let len = y.shape()[*axis];
                let mut out = vec![0.0; outer * dim * inner];
                for o in 0..outer {
                    let b = (o * dim + start) * inner;
                    out[b..b + len * inner].copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(grads, *x, Tensor::from_parts(shape, out));
            }
            Op::Expand(a) => {
                let src = self.shape(*a).to_vec();
                let map = expand_index_map(&src, y.shape());
                let mut out = vec![0.0; src.iter().product()];
                for (k, &s) in map.iter().enumerate() {
                    out[s] += gd[k];
                }
                self.accumulate(grads, *a, Tensor::from_parts(src, out));
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.value(*x).data();
                let t = elementwise(*x, &|j| if xv[j] >= *lo && xv[j] <= *hi { gd[j] } else { 0.0 });
                self.accumulate(grads, *x, t);
            }
            Op::Custom(inputs, f) => {
                let values: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                let gs = f.backward(&values, y, g);
                debug_assert_eq!(gs.len(), inputs.len(), "{} returned wrong arity", f.name());
                for (v, gi) in inputs.iter().zip(gs) {
                    if let Some(gi) = gi {
                        self.accumulate(grads, *v, gi);
                    }
                }
            }
        }
    }

    fn bmm_adjoint(&self, a: Var, b: Var, ta: bool, tb: bool, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let batch = sa[0];
        let (n, k) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let m = if tb { sb[1] } else { sb[2] };
        let (va, vb, gd) = (self.value(a).data(), self.value(b).data(), g.data());
        let per = |bi: usize| {
            (
                &va[bi * n * k..(bi + 1) * n * k],
                &vb[bi * k * m..(bi + 1) * k * m],
                &gd[bi * n * m..(bi + 1) * n * m],
            )
        };
        if self.needs_grad(a) {
            let mut out = vec![0.0; batch * n * k];
            for (bi, o) in out.chunks_mut(n * k).enumerate() {
                let (_, b_, g_) = per(bi);
                match (ta, tb) {
                    // dA = G B^T, shape [n, k]
                    (false, false) => super::gemm::gemm_into(o, g_, b_, n, m, k, false, true),
                    // dA = G B, B stored [m, k]
                    (false, true) => super::gemm::gemm_into(o, g_, b_, n, m, k, false, false),
                    // A stored [k, n]: dA = B G^T
                    (true, false) => super::gemm::gemm_into(o, b_, g_, k, m, n, false, true),
                    // dA = B^T G^T
                    (true, true) => super::gemm::gemm_into(o, b_, g_, k, m, n, true, true),
                }
            }
            self.accumulate(grads, a, Tensor::from_parts(sa.clone(), out));
        }
        if self.needs_grad(b) {
            let mut out = vec![0.0; batch * k * m];
            for (bi, o) in out.chunks_mut(k * m).enumerate() {
                let (a_, _, g_) = per(bi);
                match (ta, tb) {
                    // dB = A^T G, shape [k, m]
                    (false, false) => super::gemm::gemm_into(o, a_, g_, k, n, m, true, false),
                    // dB = A G
                    (true, false) => super::gemm::gemm_into(o, a_, g_, k, n, m, false, false),
                    // B stored [m, k]: dB = G^T A
                    (false, true) => super::gemm::gemm_into(o, g_, a_, m, n, k, true, false),
                    // dB = G^T A^T
                    (true, true) => super::gemm::gemm_into(o, g_, a_, m, n, k, true, true),
                }
            }
            self.accumulate(grads, b, Tensor::from_parts(sb, out));
        }
    }
}
