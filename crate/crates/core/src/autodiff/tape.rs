//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] owns every intermediate value produced during a forward
//! pass. Operations return [`Var`] handles (indices into the tape), so the
//! recorded graph is topologically ordered by construction: an operation
//! can only consume handles that already exist. [`Tape::backward`] walks
//! the nodes once, in reverse, applying each node's vector-Jacobian
//! product.
//!
//! Broadcasting is deliberately absent. The single exception is
//! [`Tape::add_row`], which adds a bias vector to every row of a matrix.

use super::{RngState, Tensor};
use crate::error::{Error, Result};
use crate::params::{Gradients, ParamId, ParamStore};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Abs,
    Tanh,
    Sigmoid,
    Ln,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
    Max,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    Binary(Binary, Var, Var),
    AddRow(Var, Var),
    Affine { x: Var, scale: f64 },
    Unary(Unary, Var),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    Reduce { x: Var, axis: usize, kind: Reduce, argmax: Vec<usize> },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Gather { x: Var, indices: Vec<usize> },
    Transpose(Var),
    Reshape(Var),
    Dropout { x: Var, mask: Vec<f64> },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// `(outer, n, inner)` decomposition of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// `a[m,k] · b[k,n]` accumulated into `out[m,n]`.
fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `a[m,k] · b[n,k]ᵀ` accumulated into `out[m,n]`.
fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `a[k,m]ᵀ · b[k,n]` accumulated into `out[m,n]`.
fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn softmax_slices(x: &[f64], outer: usize, n: usize, inner: usize, log: bool) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * n + k) * inner + i;
            let max = (0..n).map(|k| x[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for k in 0..n {
                let e = (x[idx(k)] - max).exp();
                out[idx(k)] = e;
                total += e;
            }
            if log {
                let log_total = total.ln();
                for k in 0..n {
                    out[idx(k)] = x[idx(k)] - max - log_total;
                }
            } else {
                for k in 0..n {
                    out[idx(k)] /= total;
                }
            }
        }
    }
    out
}

/// Records a computation and replays it backwards.
///
/// A tape may be bound to a [`ParamStore`]; [`Tape::param`] then exposes
/// each stored parameter as a leaf (one leaf per parameter, created on
/// first use). Tapes are single-threaded; run independent replicas on
/// independent tapes.
pub struct Tape<'p> {
    nodes: Vec<Node>,
    store: Option<&'p ParamStore>,
    param_vars: Vec<Option<Var>>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            store: None,
            param_vars: Vec::new(),
        }
    }

    pub fn with_params(store: &'p ParamStore) -> Self {
        Tape {
            nodes: Vec::with_capacity(4096),
            store: Some(store),
            param_vars: vec![None; store.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let grad = requires_grad.then(|| vec![0.0; value.len()]);
        self.nodes.push(Node { value, grad, op });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> Result<&Node> {
        self.nodes.get(v.0).ok_or(Error::Index {
            op: "tape",
            index: v.0,
            extent: self.nodes.len(),
        })
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].grad.is_some()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient, present iff the value requires a gradient.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires(v)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Leaf for a stored parameter; frozen parameters do not require grad.
    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        let store = self
            .store
            .ok_or_else(|| Error::Contract("tape is not bound to a parameter store".into()))?;
        if let Some(v) = self.param_vars.get(id.0).copied().flatten() {
            return Ok(v);
        }
        if id.0 >= store.len() {
            return Err(Error::Index {
                op: "param",
                index: id.0,
                extent: store.len(),
            });
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Param, p.trainable);
        self.param_vars[id.0] = Some(v);
        Ok(v)
    }

    /// Rows of a parameter matrix, without materialising the whole matrix
    /// when the parameter is frozen.
    pub fn param_rows(&mut self, id: ParamId, rows: &[usize]) -> Result<Var> {
        let store = self
            .store
            .ok_or_else(|| Error::Contract("tape is not bound to a parameter store".into()))?;
        if store.get(id).trainable {
            let table = self.param(id)?;
            return self.gather(table, rows);
        }
        let table = &store.get(id).value;
        let width = table.cols();
        let mut data = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            if r >= table.rows() {
                return Err(Error::Index {
                    op: "param_rows",
                    index: r,
                    extent: table.rows(),
                });
            }
            data.extend_from_slice(table.row(r));
        }
        Ok(self.constant(Tensor::new(vec![rows.len(), width], data)?))
    }

    /// Gradient recorded for a parameter on this tape (None if the
    /// parameter was never used or is frozen).
    pub fn param_grad(&self, id: ParamId) -> Option<&[f64]> {
        self.param_vars
            .get(id.0)
            .copied()
            .flatten()
            .and_then(|v| self.grad(v))
    }

    /// Adds every parameter gradient on this tape into `grads`.
    pub fn accumulate_param_grads(&self, grads: &mut Gradients) {
        for (i, v) in self.param_vars.iter().enumerate() {
            if let Some(g) = v.and_then(|v| self.grad(v)) {
                add_into(grads.get_mut(ParamId(i)), g);
            }
        }
    }

    // ---- elementwise ----------------------------------------------------

    pub fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (self.node(a)?, self.node(b)?);
        if na.value.shape() != nb.value.shape() {
            let op = match kind {
                Binary::Add => "add",
                Binary::Sub => "sub",
                Binary::Mul => "mul",
            };
            return Err(Error::dim(op, na.value.shape(), nb.value.shape()));
        }
        let (x, y) = (na.value.data(), nb.value.data());
        let data: Vec<f64> = match kind {
            Binary::Add => x.iter().zip(y).map(|(p, q)| p + q).collect(),
            Binary::Sub => x.iter().zip(y).map(|(p, q)| p - q).collect(),
            Binary::Mul => x.iter().zip(y).map(|(p, q)| p * q).collect(),
        };
        let value = Tensor::from_parts(na.value.shape().to_vec(), data);
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(value, Op::Binary(kind, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn unary(&mut self, kind: Unary, a: Var) -> Result<Var> {
        let na = self.node(a)?;
        let x = na.value.data();
        let data: Vec<f64> = match kind {
            Unary::Abs => x.iter().map(|v| v.abs()).collect(),
            Unary::Tanh => x.iter().map(|v| v.tanh()).collect(),
            Unary::Sigmoid => x.iter().map(|&v| sigmoid(v)).collect(),
            Unary::Ln => {
                if let Some(bad) = x.iter().find(|&&v| v <= 0.0) {
                    return Err(Error::Domain(format!("ln of non-positive value {bad}")));
                }
                x.iter().map(|v| v.ln()).collect()
            }
        };
        let value = Tensor::from_parts(na.value.shape().to_vec(), data);
        let rg = self.requires(a);
        Ok(self.push(value, Op::Unary(kind, a), rg))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Abs, a)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Tanh, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Ln, a)
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let nx = self.node(x)?;
        let data = nx.value.data().iter().map(|v| scale * v + shift).collect();
        let value = Tensor::from_parts(nx.value.shape().to_vec(), data);
        let rg = self.requires(x);
        Ok(self.push(value, Op::Affine { x, scale }, rg))
    }

    /// Adds a bias vector `[C]` to every row of a matrix `[R, C]`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (nx, nb) = (self.node(x)?, self.node(bias)?);
        let (xs, bs) = (nx.value.shape(), nb.value.shape());
        if xs.len() != 2 || bs.len() != 1 || xs[1] != bs[0] {
            return Err(Error::dim("add_row", xs, bs));
        }
        let c = xs[1];
        let b = nb.value.data();
        let data = nx
            .value
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[i % c])
            .collect();
        let value = Tensor::from_parts(xs.to_vec(), data);
        let rg = self.requires(x) || self.requires(bias);
        Ok(self.push(value, Op::AddRow(x, bias), rg))
    }

    // ---- linear algebra -------------------------------------------------

    /// `a[m,k] · b[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (self.node(a)?, self.node(b)?);
        let (sa, sb) = (na.value.shape(), nb.value.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm_nn(na.value.data(), nb.value.data(), &mut out, m, k, n);
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    /// `a[m,k] · b[n,k]ᵀ`, the usual form for `x · Wᵀ` with `W` stored
    /// as (out × in).
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (self.node(a)?, self.node(b)?);
        let (sa, sb) = (na.value.shape(), nb.value.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::dim("matmul_t", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![0.0; m * n];
        gemm_nt(na.value.data(), nb.value.data(), &mut out, m, k, n);
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMulT(a, b), rg))
    }

    /// `x · Wᵀ + b` for row-stacked inputs `x[m, in]`, `W[out, in]`, `b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul_t(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    // ---- normalisation and reductions -----------------------------------

    fn check_axis(&self, x: Var, axis: usize, op: &'static str) -> Result<&Node> {
        let nx = self.node(x)?;
        if axis >= nx.value.rank() {
            return Err(Error::Index {
                op,
                index: axis,
                extent: nx.value.rank(),
            });
        }
        Ok(nx)
    }

    /// Max-stabilised softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let nx = self.check_axis(x, axis, "softmax")?;
        let (o, n, i) = split_axis(nx.value.shape(), axis);
        let data = softmax_slices(nx.value.data(), o, n, i, false);
        let value = Tensor::from_parts(nx.value.shape().to_vec(), data);
        let rg = self.requires(x);
        Ok(self.push(value, Op::Softmax { x, axis }, rg))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let nx = self.check_axis(x, axis, "log_softmax")?;
        let (o, n, i) = split_axis(nx.value.shape(), axis);
        let data = softmax_slices(nx.value.data(), o, n, i, true);
        let value = Tensor::from_parts(nx.value.shape().to_vec(), data);
        let rg = self.requires(x);
        Ok(self.push(value, Op::LogSoftmax { x, axis }, rg))
    }

    /// Reduces along `axis`, removing it from the shape.
    pub fn reduce(&mut self, kind: Reduce, x: Var, axis: usize) -> Result<Var> {
        let nx = self.check_axis(x, axis, "reduce")?;
        let shape = nx.value.shape();
        let (outer, n, inner) = split_axis(shape, axis);
        if n == 0 && kind == Reduce::Max {
            return Err(Error::Domain("max over an empty slice".into()));
        }
        let xs = nx.value.data();
        let mut out = vec![0.0; outer * inner];
        let mut argmax = Vec::new();
        match kind {
            Reduce::Sum | Reduce::Mean => {
                for o in 0..outer {
                    for k in 0..n {
                        let src = &xs[(o * n + k) * inner..(o * n + k + 1) * inner];
                        add_into(&mut out[o * inner..(o + 1) * inner], src);
                    }
                }
                if kind == Reduce::Mean {
                    let scale = 1.0 / n as f64;
                    out.iter_mut().for_each(|v| *v *= scale);
                }
            }
            Reduce::Max => {
                argmax = vec![0; outer * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let mut best = 0;
                        let mut best_v = xs[o * n * inner + i];
                        for k in 1..n {
                            let v = xs[(o * n + k) * inner + i];
                            // strict comparison keeps the lowest index on ties
                            if v > best_v {
                                best = k;
                                best_v = v;
                            }
                        }
                        out[o * inner + i] = best_v;
                        argmax[o * inner + i] = best;
                    }
                }
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape.remove(axis);
        let value = Tensor::from_parts(out_shape, out);
        let rg = self.requires(x);
        Ok(self.push(
            value,
            Op::Reduce {
                x,
                axis,
                kind,
                argmax,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(Reduce::Sum, x, axis)
    }

    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(Reduce::Mean, x, axis)
    }

    pub fn max(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(Reduce::Max, x, axis)
    }

    /// Sum of every element, as a scalar.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let n = self.node(x)?.value.len();
        let flat = self.reshape(x, &[n])?;
        self.sum(flat, 0)
    }

    // ---- structural -----------------------------------------------------

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let base = self.check_axis(first, axis, "concat")?.value.shape().to_vec();
        let mut total = 0;
        for &p in parts {
            let s = self.node(p)?.value.shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::dim("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let np = &self.nodes[p.0].value;
                let n = np.shape()[axis];
                data.extend_from_slice(&np.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Half-open range `[start, end)` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let nx = self.check_axis(x, axis, "slice")?;
        let shape = nx.value.shape();
        if end > shape[axis] {
            return Err(Error::Index {
                op: "slice",
                index: end,
                extent: shape[axis],
            });
        }
        if start >= end {
            return Err(Error::Contract(format!("empty slice {start}..{end}")));
        }
        let (outer, n, inner) = split_axis(shape, axis);
        let len = end - start;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&nx.value.data()[(o * n + start) * inner..(o * n + end) * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let rg = self.requires(x);
        Ok(self.push(
            Tensor::from_parts(out_shape, data),
            Op::Slice { x, axis, start },
            rg,
        ))
    }

    /// Row `r` of a matrix as a `[1, C]` matrix.
    pub fn row(&mut self, x: Var, r: usize) -> Result<Var> {
        self.slice(x, 0, r, r + 1)
    }

    /// Selects entries along axis 0 (rows of a matrix, elements of a vector).
    /// Repeated indices are allowed; their gradients accumulate.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let nx = self.node(x)?;
        let shape = nx.value.shape();
        if shape.is_empty() {
            return Err(Error::Contract("gather on a scalar".into()));
        }
        if indices.is_empty() {
            return Err(Error::Contract("gather with no indices".into()));
        }
        let width: usize = shape[1..].iter().product();
        let mut data = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            if i >= shape[0] {
                return Err(Error::Index {
                    op: "gather",
                    index: i,
                    extent: shape[0],
                });
            }
            data.extend_from_slice(&nx.value.data()[i * width..(i + 1) * width]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[0] = indices.len();
        let rg = self.requires(x);
        Ok(self.push(
            Tensor::from_parts(out_shape, data),
            Op::Gather {
                x,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Repeats a vector `[C]` (or `[1, C]` row) as `n` rows of a matrix.
    pub fn repeat_rows(&mut self, v: Var, n: usize) -> Result<Var> {
        let c = self.node(v)?.value.len();
        let row = self.reshape(v, &[1, c])?;
        self.gather(row, &vec![0; n])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let nx = self.node(x)?;
        let s = nx.value.shape();
        if s.len() != 2 {
            return Err(Error::Contract(format!("transpose needs a matrix, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let src = nx.value.data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.requires(x);
        Ok(self.push(Tensor::from_parts(vec![c, r], data), Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let nx = self.node(x)?;
        if nx.value.shape() == shape {
            return Ok(x);
        }
        let value = Tensor::new(shape.to_vec(), nx.value.data().to_vec())
            .map_err(|_| Error::dim("reshape", nx.value.shape(), shape))?;
        let rg = self.requires(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    // ---- regularisation -------------------------------------------------

    /// Inverted dropout. Identity when `training` is false or `rate` is 0.
    pub fn dropout(&mut self, x: Var, rate: f64, training: bool, rng: &mut RngState) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Parameter(format!("dropout rate {rate} outside [0, 1)")));
        }
        self.node(x)?;
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let nx = &self.nodes[x.0];
        let mask: Vec<f64> = (0..nx.value.len())
            .map(|_| if rng.uniform() < rate { 0.0 } else { keep })
            .collect();
        let data = nx.value.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::from_parts(nx.value.shape().to_vec(), data);
        let rg = self.requires(x);
        Ok(self.push(value, Op::Dropout { x, mask }, rg))
    }

    // ---- backward -------------------------------------------------------

    /// Propagates d(loss)/d(·) to every reachable value that requires a
    /// gradient. Gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let n = self.node(loss)?.value.len();
        if n != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        match self.nodes[loss.0].grad.as_mut() {
            Some(g) => g[0] += 1.0,
            None => return Ok(()),
        }
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            let Some(g) = node.grad.as_deref() else {
                continue;
            };
            backprop(before, node, g);
        }
        Ok(())
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Adds `f`'s contribution into `nodes[v].grad` if that node tracks one.
fn acc(nodes: &mut [Node], v: Var, f: impl FnOnce(&mut [f64], &Tensor)) {
    let node = &mut nodes[v.0];
    if let Some(g) = node.grad.as_mut() {
        f(g, &node.value);
    }
}

fn value_of(nodes: &[Node], v: Var) -> &Tensor {
    &nodes[v.0].value
}

fn backprop(nodes: &mut [Node], node: &Node, g: &[f64]) {
    let y = node.value.data();
    match &node.op {
        Op::Leaf | Op::Param => {}
        Op::Binary(kind, a, b) => match kind {
            Binary::Add => {
                acc(nodes, *a, |ga, _| add_into(ga, g));
                acc(nodes, *b, |gb, _| add_into(gb, g));
            }
            Binary::Sub => {
                acc(nodes, *a, |ga, _| add_into(ga, g));
                acc(nodes, *b, |gb, _| {
                    gb.iter_mut().zip(g).for_each(|(d, s)| *d -= s)
                });
            }
            Binary::Mul => {
                let bv = value_of(nodes, *b).data().to_vec();
                let av = value_of(nodes, *a).data().to_vec();
                acc(nodes, *a, |ga, _| {
                    for ((d, s), w) in ga.iter_mut().zip(g).zip(&bv) {
                        *d += s * w;
                    }
                });
                acc(nodes, *b, |gb, _| {
                    for ((d, s), w) in gb.iter_mut().zip(g).zip(&av) {
                        *d += s * w;
                    }
                });
            }
        },
        Op::AddRow(x, b) => {
            acc(nodes, *x, |gx, _| add_into(gx, g));
            acc(nodes, *b, |gb, _| {
                let c = gb.len();
                for (i, s) in g.iter().enumerate() {
                    gb[i % c] += s;
                }
            });
        }
        Op::Affine { x, scale } => {
            acc(nodes, *x, |gx, _| {
                gx.iter_mut().zip(g).for_each(|(d, s)| *d += scale * s)
            });
        }
        Op::Unary(kind, x) => acc(nodes, *x, |gx, xv| {
            let xs = xv.data();
            for i in 0..gx.len() {
                gx[i] += g[i]
                    * match kind {
                        Unary::Abs => {
                            if xs[i] > 0.0 {
                                1.0
                            } else if xs[i] < 0.0 {
                                -1.0
                            } else {
                                0.0
                            }
                        }
                        Unary::Tanh => 1.0 - y[i] * y[i],
                        Unary::Sigmoid => y[i] * (1.0 - y[i]),
                        Unary::Ln => 1.0 / xs[i],
                    };
            }
        }),
        Op::MatMul(a, b) => {
            let (sa, sb) = (
                value_of(nodes, *a).shape().to_vec(),
                value_of(nodes, *b).shape().to_vec(),
            );
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            if nodes[a.0].grad.is_some() {
                let bv = value_of(nodes, *b).data().to_vec();
                acc(nodes, *a, |ga, _| gemm_nt(g, &bv, ga, m, n, k));
            }
            if nodes[b.0].grad.is_some() {
                let av = value_of(nodes, *a).data().to_vec();
                acc(nodes, *b, |gb, _| gemm_tn(&av, g, gb, k, m, n));
            }
        }
        Op::MatMulT(a, b) => {
            let (sa, sb) = (
                value_of(nodes, *a).shape().to_vec(),
                value_of(nodes, *b).shape().to_vec(),
            );
            let (m, k, n) = (sa[0], sa[1], sb[0]);
            if nodes[a.0].grad.is_some() {
                let bv = value_of(nodes, *b).data().to_vec();
                acc(nodes, *a, |ga, _| gemm_nn(g, &bv, ga, m, n, k));
            }
            if nodes[b.0].grad.is_some() {
                let av = value_of(nodes, *a).data().to_vec();
                acc(nodes, *b, |gb, _| gemm_tn(g, &av, gb, n, m, k));
            }
        }
        Op::Softmax { x, axis } => acc(nodes, *x, |gx, xv| {
            let (outer, n, inner) = split_axis(xv.shape(), *axis);
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |k: usize| (o * n + k) * inner + i;
                    let dot: f64 = (0..n).map(|k| g[idx(k)] * y[idx(k)]).sum();
                    for k in 0..n {
                        gx[idx(k)] += y[idx(k)] * (g[idx(k)] - dot);
                    }
                }
            }
        }),
        Op::LogSoftmax { x, axis } => acc(nodes, *x, |gx, xv| {
            let (outer, n, inner) = split_axis(xv.shape(), *axis);
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |k: usize| (o * n + k) * inner + i;
                    let total: f64 = (0..n).map(|k| g[idx(k)]).sum();
                    for k in 0..n {
                        gx[idx(k)] += g[idx(k)] - y[idx(k)].exp() * total;
                    }
                }
            }
        }),
        Op::Reduce {
            x,
            axis,
            kind,
            argmax,
        } => acc(nodes, *x, |gx, xv| {
            let (outer, n, inner) = split_axis(xv.shape(), *axis);
            for o in 0..outer {
                for i in 0..inner {
                    let go = g[o * inner + i];
                    match kind {
                        Reduce::Sum | Reduce::Mean => {
                            let s = if *kind == Reduce::Mean { go / n as f64 } else { go };
                            for k in 0..n {
                                gx[(o * n + k) * inner + i] += s;
                            }
                        }
                        Reduce::Max => {
                            gx[(o * n + argmax[o * inner + i]) * inner + i] += go;
                        }
                    }
                }
            }
        }),
        Op::Concat { parts, axis } => {
            let total = node.value.shape()[*axis];
            let (outer, _, inner) = split_axis(node.value.shape(), *axis);
            let mut offset = 0;
            for &p in parts {
                let n = value_of(nodes, p).shape()[*axis];
                acc(nodes, p, |gp, _| {
                    for o in 0..outer {
                        let src = &g[(o * total + offset) * inner..(o * total + offset + n) * inner];
                        add_into(&mut gp[o * n * inner..(o + 1) * n * inner], src);
                    }
                });
                offset += n;
            }
        }
        Op::Slice { x, axis, start } => acc(nodes, *x, |gx, xv| {
            let (outer, n, inner) = split_axis(xv.shape(), *axis);
            let len = node.value.shape()[*axis];
            for o in 0..outer {
                let dst = &mut gx[(o * n + start) * inner..(o * n + start + len) * inner];
                add_into(dst, &g[o * len * inner..(o + 1) * len * inner]);
            }
        }),
        Op::Gather { x, indices } => acc(nodes, *x, |gx, xv| {
            let width = xv.len() / xv.shape()[0];
            for (row, &i) in indices.iter().enumerate() {
                add_into(
                    &mut gx[i * width..(i + 1) * width],
                    &g[row * width..(row + 1) * width],
                );
            }
        }),
        Op::Transpose(x) => acc(nodes, *x, |gx, xv| {
            let (r, c) = (xv.shape()[0], xv.shape()[1]);
            for i in 0..r {
                for j in 0..c {
                    gx[i * c + j] += g[j * r + i];
                }
            }
        }),
        Op::Reshape(x) => acc(nodes, *x, |gx, _| add_into(gx, g)),
        Op::Dropout { x, mask } => acc(nodes, *x, |gx, _| {
            for ((d, s), m) in gx.iter_mut().zip(g).zip(mask) {
                *d += s * m;
            }
        }),
    }
}
