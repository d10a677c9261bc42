use std::cell::{Cell, RefCell};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::kernels::{self, ConvDims, ConvGrads};
use super::{Scalar, Tensor, TensorError};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Zero-padding placement for [`Graph::conv1d`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PadMode {
    /// `k - 1` zeros on the left: output `t` only sees inputs `..=t`.
    Causal,
    /// `(k - 1) / 2` zeros on each side; `k` must be odd.
    Same,
}

#[derive(Debug, Clone, Copy)]
enum Bcast {
    Same,
    /// rhs shape is a suffix of lhs shape and repeats over the leading dims
    Rhs,
    /// lhs shape is a suffix of rhs shape
    Lhs,
}

enum Op<F> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize, Bcast),
    Scale(usize, F),
    /// elementwise map; stores the local derivative of every element
    Map(usize, Vec<F>),
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Softmax(usize, usize),
    LogSoftmax(usize, usize),
    LogSumExp(usize, usize),
    Concat(Vec<usize>, usize),
    Slice {
        x: usize,
        axis: usize,
        start: usize,
    },
    Conv1d {
        x: usize,
        w: usize,
        b: usize,
        pad_left: usize,
    },
    MaxPool {
        x: usize,
        argmax: Vec<usize>,
    },
    Upsample {
        x: usize,
        factor: usize,
    },
    Sum(usize),
    Mean(usize),
}

struct Node<F> {
    value: Arc<Tensor<F>>,
    op: Op<F>,
    requires_grad: bool,
}

/// A single-use tape. Record a forward pass with the op methods, then call
/// [`Graph::backward`] once.
pub struct Graph<F: Scalar> {
    nodes: RefCell<Vec<Node<F>>>,
    differentiated: Cell<bool>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of the leaves that required them.
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    /// `None` for constants and for leaves the loss does not depend on.
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

fn broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<(Bcast, Vec<usize>), TensorError> {
    if a == b {
        Ok((Bcast::Same, a.to_vec()))
    } else if a.len() > b.len() && a.ends_with(b) {
        Ok((Bcast::Rhs, a.to_vec()))
    } else if b.len() > a.len() && b.ends_with(a) {
        Ok((Bcast::Lhs, b.to_vec()))
    } else {
        Err(TensorError::mismatch(op, a, b))
    }
}

fn zip_bcast<F: Scalar>(a: &[F], b: &[F], mode: Bcast, f: impl Fn(F, F) -> F) -> Vec<F> {
    match mode {
        Bcast::Same => a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect(),
        Bcast::Rhs => a
            .chunks(b.len().max(1))
            .flat_map(|ch| ch.iter().zip(b).map(|(&x, &y)| f(x, y)).collect::<Vec<_>>())
            .collect(),
        Bcast::Lhs => b
            .chunks(a.len().max(1))
            .flat_map(|ch| a.iter().zip(ch).map(|(&x, &y)| f(x, y)).collect::<Vec<_>>())
            .collect(),
    }
}

/// Adds `g * scale_i` into `dst`, folding repeats when `dst` was broadcast.
fn fold_into<F: Scalar>(dst: &mut [F], g: &[F], scale: impl Fn(usize) -> F) {
    let n = dst.len();
    if n == g.len() {
        for (i, (d, &gv)) in dst.iter_mut().zip(g).enumerate() {
            *d += gv * scale(i);
        }
    } else {
        for (i, &gv) in g.iter().enumerate() {
            dst[i % n] += gv * scale(i);
        }
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            differentiated: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor<F>, op: Op<F>, inputs: &[usize]) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = inputs.iter().any(|&i| nodes[i].requires_grad);
        nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    /// Records an input. Gradients are only reported for leaves created with
    /// `requires_grad`.
    pub fn leaf(&self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.leaf_shared(Arc::new(value), requires_grad)
    }

    /// Like [`Graph::leaf`] but without copying the data.
    pub fn leaf_shared(&self, value: Arc<Tensor<F>>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    pub fn constant(&self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&self, value: Tensor<F>) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> Arc<Tensor<F>> {
        Arc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn binary(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(F, F) -> F,
        make: impl Fn(usize, usize, Bcast) -> Op<F>,
    ) -> Result<Var, TensorError> {
        let (va, vb) = (self.value(a), self.value(b));
        let (mode, shape) = broadcast(name, va.shape(), vb.shape())?;
        let data = zip_bcast(va.data(), vb.data(), mode, f);
        Ok(self.push(Tensor { shape, data }, make(a.0, b.0, mode), &[a.0, b.0]))
    }

    /// Elementwise sum; either operand may repeat over the other's leading
    /// dimensions when its shape is a suffix of the other's.
    pub fn add(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("add", a, b, |x, y| x + y, |a, b, _| Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("sub", a, b, |x, y| x - y, |a, b, _| Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&self, x: Var, c: F) -> Var {
        let v = self.value(x).map(|e| e * c);
        self.push(v, Op::Scale(x.0, c), &[x.0])
    }

    /// Elementwise `f`, where `f(v)` returns the value and its derivative.
    pub fn map(&self, x: Var, f: impl Fn(F) -> (F, F)) -> Var {
        self.map_indexed(x, |_, v| f(v))
    }

    /// Elementwise map that also receives the flat index, for maps that
    /// depend on per-element constants such as targets.
    pub fn map_indexed(&self, x: Var, f: impl Fn(usize, F) -> (F, F)) -> Var {
        let vx = self.value(x);
        let (data, deriv): (Vec<F>, Vec<F>) =
            vx.data().iter().enumerate().map(|(i, &v)| f(i, v)).unzip();
        let out = Tensor {
            shape: vx.shape().to_vec(),
            data,
        };
        self.push(out, Op::Map(x.0, deriv), &[x.0])
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.map(x, |v| {
            let s = if v >= F::zero() {
                F::one() / (F::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (F::one() + e)
            };
            (s, s * (F::one() - s))
        })
    }

    pub fn tanh(&self, x: Var) -> Var {
        self.map(x, |v| {
            let t = v.tanh();
            (t, F::one() - t * t)
        })
    }

    pub fn relu(&self, x: Var) -> Var {
        self.map(x, |v| {
            if v > F::zero() {
                (v, F::one())
            } else {
                (F::zero(), F::zero())
            }
        })
    }

    /// Inverted dropout: zeroes each element with probability `p` and scales
    /// survivors by `1 / (1 - p)`. Identity when not training or `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(
        &self,
        x: Var,
        p: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var, TensorError> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::invalid("dropout", format!("rate {p} outside [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = F::of(1.0 / (1.0 - p));
        let n = self.value(x).len();
        let mask: Vec<F> = (0..n)
            .map(|_| if rng.random::<f64>() < p { F::zero() } else { keep })
            .collect();
        Ok(self.map_indexed(x, |i, v| (v * mask[i], mask[i])))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(va.data(), vb.data(), m, k, n);
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data,
            },
            Op::MatMul(a.0, b.0),
            &[a.0, b.0],
        ))
    }

    pub fn transpose(&self, x: Var) -> Result<Var, TensorError> {
        let t = self.value(x).transpose()?;
        Ok(self.push(t, Op::Transpose(x.0), &[x.0]))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let vx = self.value(x);
        if shape.iter().product::<usize>() != vx.len() {
            return Err(TensorError::mismatch("reshape", vx.shape(), shape));
        }
        let t = Tensor {
            shape: shape.to_vec(),
            data: vx.data().to_vec(),
        };
        Ok(self.push(t, Op::Reshape(x.0), &[x.0]))
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<Arc<Tensor<F>>, TensorError> {
        let vx = self.value(x);
        if axis >= vx.rank() {
            return Err(TensorError::invalid(
                op,
                format!("axis {axis} out of range for shape {:?}", vx.shape()),
            ));
        }
        if vx.dim(axis) == 0 {
            return Err(TensorError::invalid(op, "empty axis"));
        }
        Ok(vx)
    }

    pub fn softmax(&self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let vx = self.check_axis("softmax", x, axis)?;
        let mut out = vx.data().to_vec();
        let (lanes, n, stride) = kernels::lanes(vx.shape(), axis);
        for (_, base) in lanes {
            let idx = |j: usize| base + j * stride;
            let m = (0..n).map(|j| out[idx(j)]).fold(F::neg_infinity(), F::max);
            let mut total = F::zero();
            for j in 0..n {
                let e = (out[idx(j)] - m).exp();
                out[idx(j)] = e;
                total += e;
            }
            for j in 0..n {
                out[idx(j)] /= total;
            }
        }
        let t = Tensor {
            shape: vx.shape().to_vec(),
            data: out,
        };
        Ok(self.push(t, Op::Softmax(x.0, axis), &[x.0]))
    }

    pub fn log_softmax(&self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let vx = self.check_axis("log_softmax", x, axis)?;
        let mut out = vx.data().to_vec();
        let (lanes, n, stride) = kernels::lanes(vx.shape(), axis);
        for (_, base) in lanes {
            let idx = |j: usize| base + j * stride;
            let lse = lse_lane((0..n).map(|j| out[idx(j)]));
            for j in 0..n {
                out[idx(j)] = out[idx(j)] - lse;
            }
        }
        let t = Tensor {
            shape: vx.shape().to_vec(),
            data: out,
        };
        Ok(self.push(t, Op::LogSoftmax(x.0, axis), &[x.0]))
    }

    /// `log(sum(exp(x)))` along `axis`, which is removed from the shape.
    pub fn logsumexp(&self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let vx = self.check_axis("logsumexp", x, axis)?;
        let mut shape = vx.shape().to_vec();
        shape.remove(axis);
        let mut out = vec![F::zero(); shape.iter().product()];
        let (lanes, n, stride) = kernels::lanes(vx.shape(), axis);
        let d = vx.data();
        for (lane, base) in lanes {
            out[lane] = lse_lane((0..n).map(|j| d[base + j * stride]));
        }
        Ok(self.push(Tensor { shape, data: out }, Op::LogSumExp(x.0, axis), &[x.0]))
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::invalid("concat", "no inputs"))?;
        let values: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let base = values[0].shape();
        if axis >= base.len() {
            return Err(TensorError::invalid("concat", format!("axis {axis} out of range for {base:?}")));
        }
        for v in &values[1..] {
            let s = v.shape();
            let compatible = s.len() == base.len()
                && s.iter().zip(base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(TensorError::mismatch("concat", base, s));
            }
        }
        let mut shape = base.to_vec();
        shape[axis] = values.iter().map(|v| v.dim(axis)).sum();
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for v in &values {
                let block = v.dim(axis) * inner;
                data.extend_from_slice(&v.data()[o * block..(o + 1) * block]);
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let _ = first;
        Ok(self.push(Tensor { shape, data }, Op::Concat(ids.clone(), axis), &ids))
    }

    /// `x[.., start..end, ..]` along `axis`.
    pub fn slice(&self, x: Var, axis: usize, range: std::ops::Range<usize>) -> Result<Var, TensorError> {
        let vx = self.value(x);
        let s = vx.shape();
        if axis >= s.len() || range.start >= range.end || range.end > s[axis] {
            return Err(TensorError::invalid(
                "slice",
                format!("range {range:?} on axis {axis} of shape {s:?}"),
            ));
        }
        let (outer, n, inner) = kernels::axis_split(s, axis);
        let width = range.end - range.start;
        let mut data = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            let from = (o * n + range.start) * inner;
            data.extend_from_slice(&vx.data()[from..from + width * inner]);
        }
        let mut shape = s.to_vec();
        shape[axis] = width;
        Ok(self.push(
            Tensor { shape, data },
            Op::Slice {
                x: x.0,
                axis,
                start: range.start,
            },
            &[x.0],
        ))
    }

    /// 1-D convolution of `x: [c_in x t]` with `w: [c_out x c_in x k]` and
    /// bias `b: [c_out]`, producing `[c_out x t]`.
    pub fn conv1d(&self, x: Var, w: Var, b: Var, mode: PadMode) -> Result<Var, TensorError> {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        let (sx, sw, sb) = (vx.shape(), vw.shape(), vb.shape());
        if sx.len() != 2 || sw.len() != 3 || sx[0] != sw[1] {
            return Err(TensorError::mismatch("conv1d", sx, sw));
        }
        if sb != [sw[0]] {
            return Err(TensorError::mismatch("conv1d", sw, sb));
        }
        let k = sw[2];
        if k == 0 || sx[1] == 0 {
            return Err(TensorError::invalid("conv1d", "empty kernel or input"));
        }
        let pad_left = match mode {
            PadMode::Causal => k - 1,
            PadMode::Same if k % 2 == 1 => (k - 1) / 2,
            PadMode::Same => {
                return Err(TensorError::invalid("conv1d", format!("same padding needs an odd kernel, got {k}")))
            }
        };
        let dims = ConvDims {
            c_in: sx[0],
            c_out: sw[0],
            k,
            t: sx[1],
            pad_left,
        };
        let data = kernels::conv1d(vx.data(), vw.data(), vb.data(), &dims);
        Ok(self.push(
            Tensor {
                shape: vec![dims.c_out, dims.t],
                data,
            },
            Op::Conv1d {
                x: x.0,
                w: w.0,
                b: b.0,
                pad_left,
            },
            &[x.0, w.0, b.0],
        ))
    }

    /// Non-overlapping max pooling of width `k` over the last axis. Ties go to
    /// the leftmost element.
    pub fn maxpool1d(&self, x: Var, k: usize) -> Result<Var, TensorError> {
        let vx = self.value(x);
        let s = vx.shape();
        let t = *s.last().ok_or_else(|| TensorError::invalid("maxpool1d", "scalar input"))?;
        if k == 0 || t < k {
            return Err(TensorError::invalid("maxpool1d", format!("length {t} shorter than window {k}")));
        }
        let out_t = t / k;
        let rows = vx.len() / t;
        let d = vx.data();
        let mut data = Vec::with_capacity(rows * out_t);
        let mut argmax = Vec::with_capacity(rows * out_t);
        for r in 0..rows {
            for o in 0..out_t {
                let start = r * t + o * k;
                let mut best = start;
                for i in start + 1..start + k {
                    if d[i] > d[best] {
                        best = i;
                    }
                }
                data.push(d[best]);
                argmax.push(best);
            }
        }
        let mut shape = s.to_vec();
        *shape.last_mut().unwrap() = out_t;
        Ok(self.push(Tensor { shape, data }, Op::MaxPool { x: x.0, argmax }, &[x.0]))
    }

    /// Nearest-neighbour upsampling of the last axis by `factor`.
    pub fn upsample1d(&self, x: Var, factor: usize) -> Result<Var, TensorError> {
        let vx = self.value(x);
        let s = vx.shape();
        let t = *s.last().ok_or_else(|| TensorError::invalid("upsample1d", "scalar input"))?;
        if factor == 0 || t == 0 {
            return Err(TensorError::invalid("upsample1d", "zero factor or empty input"));
        }
        let data = vx
            .data()
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, factor))
            .collect();
        let mut shape = s.to_vec();
        *shape.last_mut().unwrap() = t * factor;
        Ok(self.push(Tensor { shape, data }, Op::Upsample { x: x.0, factor }, &[x.0]))
    }

    pub fn sum(&self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x.0), &[x.0])
    }

    pub fn mean(&self, x: Var) -> Var {
        let vx = self.value(x);
        let n = F::of(vx.len().max(1) as f64);
        self.push(Tensor::scalar(vx.sum() / n), Op::Mean(x.0), &[x.0])
    }

    /// Reverse pass from a scalar `loss`. A graph can be differentiated once.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>, TensorError> {
        let nodes = self.nodes.borrow();
        let loss_shape = nodes[loss.0].value.shape();
        if nodes[loss.0].value.len() != 1 {
            return Err(TensorError::NotScalar(loss_shape.to_vec()));
        }
        if self.differentiated.replace(true) {
            return Err(TensorError::BackwardTwice);
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..nodes.len()).map(|_| None).collect();
        let mut leaves: Vec<Option<Tensor<F>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaves[id] = Some(Tensor {
                    shape: node.value.shape().to_vec(),
                    data: g,
                });
            } else {
                propagate(&nodes, id, &g, &mut grads);
            }
        }
        Ok(Gradients { grads: leaves })
    }
}

fn lse_lane<F: Scalar>(values: impl Iterator<Item = F> + Clone) -> F {
    let m = values.clone().fold(F::neg_infinity(), F::max);
    if m == F::neg_infinity() {
        return m;
    }
    let total: F = values.map(|v| (v - m).exp()).sum();
    m + total.ln()
}

/// Runs `f` on the gradient buffer of `id` when that node needs a gradient.
fn with_grad<F: Scalar>(
    nodes: &[Node<F>],
    grads: &mut [Option<Vec<F>>],
    id: usize,
    f: impl FnOnce(&mut [F]),
) {
    if !nodes[id].requires_grad {
        return;
    }
    let buf = grads[id].get_or_insert_with(|| vec![F::zero(); nodes[id].value.len()]);
    f(buf);
}

fn propagate<F: Scalar>(nodes: &[Node<F>], id: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
    let out = &nodes[id].value;
    let val = |i: usize| &nodes[i].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            with_grad(nodes, grads, *a, |d| fold_into(d, g, |_| F::one()));
            with_grad(nodes, grads, *b, |d| fold_into(d, g, |_| F::one()));
        }
        Op::Sub(a, b) => {
            with_grad(nodes, grads, *a, |d| fold_into(d, g, |_| F::one()));
            with_grad(nodes, grads, *b, |d| fold_into(d, g, |_| -F::one()));
        }
        Op::Mul(a, b, mode) => {
            let (va, vb) = (val(*a).data(), val(*b).data());
            let (na, nb) = (va.len(), vb.len());
            let other_b = |i: usize| match mode {
                Bcast::Rhs => vb[i % nb],
                _ => vb[i],
            };
            let other_a = |i: usize| match mode {
                Bcast::Lhs => va[i % na],
                _ => va[i],
            };
            with_grad(nodes, grads, *a, |d| fold_into(d, g, other_b));
            with_grad(nodes, grads, *b, |d| fold_into(d, g, other_a));
        }
        Op::Scale(x, c) => with_grad(nodes, grads, *x, |d| fold_into(d, g, |_| *c)),
        Op::Map(x, deriv) => with_grad(nodes, grads, *x, |d| fold_into(d, g, |i| deriv[i])),
        Op::MatMul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let (m, k, n) = (va.dim(0), va.dim(1), vb.dim(1));
            with_grad(nodes, grads, *a, |d| kernels::matmul_grad_a(g, vb.data(), d, m, k, n));
            with_grad(nodes, grads, *b, |d| kernels::matmul_grad_b(va.data(), g, d, m, k, n));
        }
        Op::Transpose(x) => {
            let (r, c) = (val(*x).dim(0), val(*x).dim(1));
            with_grad(nodes, grads, *x, |d| {
                for i in 0..r {
                    for j in 0..c {
                        d[i * c + j] += g[j * r + i];
                    }
                }
            });
        }
        Op::Reshape(x) => with_grad(nodes, grads, *x, |d| fold_into(d, g, |_| F::one())),
        Op::Softmax(x, axis) => {
            let y = out.data();
            with_grad(nodes, grads, *x, |d| {
                let (lanes, n, stride) = kernels::lanes(out.shape(), *axis);
                for (_, base) in lanes {
                    let dot: F = (0..n).map(|j| g[base + j * stride] * y[base + j * stride]).sum();
                    for j in 0..n {
                        let i = base + j * stride;
                        d[i] += y[i] * (g[i] - dot);
                    }
                }
            });
        }
        Op::LogSoftmax(x, axis) => {
            let y = out.data();
            with_grad(nodes, grads, *x, |d| {
                let (lanes, n, stride) = kernels::lanes(out.shape(), *axis);
                for (_, base) in lanes {
                    let total: F = (0..n).map(|j| g[base + j * stride]).sum();
                    for j in 0..n {
                        let i = base + j * stride;
                        d[i] += g[i] - y[i].exp() * total;
                    }
                }
            });
        }
        Op::LogSumExp(x, axis) => {
            let vx = val(*x);
            let (xs, ys) = (vx.data(), out.data());
            with_grad(nodes, grads, *x, |d| {
                let (lanes, n, stride) = kernels::lanes(vx.shape(), *axis);
                for (lane, base) in lanes {
                    if ys[lane] == F::neg_infinity() {
                        continue;
                    }
                    for j in 0..n {
                        let i = base + j * stride;
                        d[i] += g[lane] * (xs[i] - ys[lane]).exp();
                    }
                }
            });
        }
        Op::Concat(parts, axis) => {
            let shape = out.shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[*axis + 1..].iter().product();
            let total = shape[*axis] * inner;
            let mut offset = 0;
            for &p in parts {
                let block = val(p).dim(*axis) * inner;
                with_grad(nodes, grads, p, |d| {
                    for o in 0..outer {
                        let src = &g[o * total + offset..o * total + offset + block];
                        for (dv, &gv) in d[o * block..(o + 1) * block].iter_mut().zip(src) {
                            *dv += gv;
                        }
                    }
                });
                offset += block;
            }
        }
        Op::Slice { x, axis, start } => {
            let (outer, n, inner) = kernels::axis_split(val(*x).shape(), *axis);
            let width = out.dim(*axis);
            with_grad(nodes, grads, *x, |d| {
                for o in 0..outer {
                    let to = (o * n + start) * inner;
                    let src = &g[o * width * inner..(o + 1) * width * inner];
                    for (dv, &gv) in d[to..to + width * inner].iter_mut().zip(src) {
                        *dv += gv;
                    }
                }
            });
        }
        Op::Conv1d { x, w, b, pad_left } => {
            let (vx, vw) = (val(*x), val(*w));
            let dims = ConvDims {
                c_in: vx.dim(0),
                c_out: vw.dim(0),
                k: vw.dim(2),
                t: vx.dim(1),
                pad_left: *pad_left,
            };
            let run = |grads_for: ConvGrads<'_, F>| {
                kernels::conv1d_backward(vx.data(), vw.data(), g, &dims, grads_for)
            };
            with_grad(nodes, grads, *x, |d| {
                run(ConvGrads { dx: Some(d), dw: None, db: None })
            });
            with_grad(nodes, grads, *w, |d| {
                run(ConvGrads { dx: None, dw: Some(d), db: None })
            });
            with_grad(nodes, grads, *b, |d| {
                for (o, row) in g.chunks(dims.t).enumerate() {
                    d[o] += row.iter().copied().sum::<F>();
                }
            });
        }
        Op::MaxPool { x, argmax } => with_grad(nodes, grads, *x, |d| {
            for (&src, &gv) in argmax.iter().zip(g) {
                d[src] += gv;
            }
        }),
        Op::Upsample { x, factor } => with_grad(nodes, grads, *x, |d| {
            for (dv, chunk) in d.iter_mut().zip(g.chunks(*factor)) {
                *dv += chunk.iter().copied().sum::<F>();
            }
        }),
        Op::Sum(x) => with_grad(nodes, grads, *x, |d| d.iter_mut().for_each(|v| *v += g[0])),
        Op::Mean(x) => {
            let n = F::of(val(*x).len().max(1) as f64);
            with_grad(nodes, grads, *x, |d| d.iter_mut().for_each(|v| *v += g[0] / n));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vec1(g: &Graph<f64>, v: &[f64], rg: bool) -> Var {
        g.leaf(Tensor::from_vec(v.to_vec()), rg)
    }

    #[test]
    fn activations_at_zero() {
        let g = Graph::<f64>::new();
        let x = vec1(&g, &[0.0], false);
        assert_eq!(g.value(g.sigmoid(x)).item(), 0.5);
        assert_eq!(g.value(g.tanh(x)).item(), 0.0);
        assert_eq!(g.value(g.relu(x)).item(), 0.0);
    }

    #[test]
    fn softmax_and_logsumexp() {
        let g = Graph::<f64>::new();
        let x = vec1(&g, &[0.0, 0.0], false);
        assert_eq!(g.value(g.softmax(x, 0).unwrap()).data(), &[0.5, 0.5]);
        let lse = g.value(g.logsumexp(x, 0).unwrap()).item();
        assert!((lse - 2f64.ln()).abs() < 1e-15);
        let big = vec1(&g, &[1000.0, 1000.0], false);
        let lse = g.value(g.logsumexp(big, 0).unwrap()).item();
        assert!((lse - 1000.0 - 2f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn dropout_identities() {
        let g = Graph::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = vec1(&g, &[1.0, 2.0, 3.0], true);
        assert_eq!(g.dropout(x, 0.0, true, &mut rng).unwrap(), x);
        assert_eq!(g.dropout(x, 0.9, false, &mut rng).unwrap(), x);
        let d = g.dropout(x, 0.5, true, &mut rng).unwrap();
        for (&o, &i) in g.value(d).data().iter().zip(&[1.0, 2.0, 3.0]) {
            assert!(o == 0.0 || o == 2.0 * i);
        }
        assert!(g.dropout(x, 1.0, true, &mut rng).is_err());
    }

    #[test]
    fn conv_examples() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let b = g.constant(Tensor::zeros(&[1]));
        let w1 = g.constant(Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap());
        let y = g.conv1d(x, w1, b, PadMode::Causal).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0]);
        let w2 = g.constant(Tensor::new(vec![1, 1, 2], vec![1.0, 1.0]).unwrap());
        let y = g.conv1d(x, w2, b, PadMode::Causal).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 3.0, 5.0]);
        assert!(g.conv1d(x, w2, b, PadMode::Same).is_err());
    }

    #[test]
    fn pool_and_upsample() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(vec![1, 4], vec![1.0, 3.0, 2.0, 2.0]).unwrap());
        let p = g.maxpool1d(x, 2).unwrap();
        assert_eq!(g.value(p).data(), &[3.0, 2.0]);
        let u = g.upsample1d(p, 2).unwrap();
        assert_eq!(g.value(u).data(), &[3.0, 3.0, 2.0, 2.0]);
        let e = g.constant(Tensor::new(vec![1, 1], vec![1.0]).unwrap());
        assert!(g.maxpool1d(e, 2).is_err());
    }

    #[test]
    fn maxpool_ties_route_left() {
        let g = Graph::<f64>::new();
        let x = g.param(Tensor::from_vec(vec![2.0, 2.0]));
        let p = g.maxpool1d(x, 2).unwrap();
        let l = g.sum(p);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 0.0]);
    }

    #[test]
    fn square_sum_gradient() {
        let g = Graph::<f64>::new();
        let w = vec1(&g, &[1.0, 2.0], true);
        let c = vec1(&g, &[5.0, 5.0], false);
        let sq = g.mul(w, w).unwrap();
        let l = g.sum(g.add(sq, c).unwrap());
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[2.0, 4.0]);
        assert!(grads.get(c).is_none());
        assert!(matches!(g.backward(l), Err(TensorError::BackwardTwice)));
    }

    #[test]
    fn shape_errors_name_op() {
        let g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        assert_eq!(err.to_string(), "matmul: incompatible shapes [2, 3] and [2, 3]");
        let c = g.constant(Tensor::zeros(&[2]));
        assert!(g.add(a, c).is_err());
        let bias = g.constant(Tensor::zeros(&[3]));
        assert_eq!(g.shape(g.add(a, bias).unwrap()), vec![2, 3]);
        assert!(matches!(g.backward(a), Err(TensorError::NotScalar(_))));
    }

    #[test]
    fn concat_and_slice() {
        let g = Graph::<f64>::new();
        let a = g.constant(Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap());
        let b = g.constant(Tensor::new(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap());
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let s = g.slice(c, 1, 1..3).unwrap();
        assert_eq!(g.value(s).data(), &[3.0, 4.0, 5.0, 6.0]);
        let r = g.slice(c, 0, 1..2).unwrap();
        assert_eq!(g.value(r).data(), &[2.0, 5.0, 6.0]);
    }
}
