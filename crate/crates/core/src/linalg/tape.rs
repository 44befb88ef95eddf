//! Reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records every primitive as it is evaluated. Calling
//! [`Tape::backward`] on a `1×1` node walks the record in exact reverse order
//! and returns the adjoint of every leaf registered with [`Tape::param`].
//! A tape supports one backward pass; build a fresh tape for the next forward.

use super::{FlopCount, FlopMeter, Matrix};
use crate::error::{Error, Result};

/// Norm below which a row is treated as zero by [`Tape::cosine_rows`].
pub const DEGENERATE_NORM: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    AddRow(Var, Var),
    Sum(Var),
    FrobeniusSq(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        shift: Var,
        normalized: Matrix,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    SliceRows {
        src: Var,
        start: usize,
    },
    SliceCols {
        src: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Matrix,
    },
    CosineRows {
        a: Var,
        b: Var,
        norms: Vec<(f64, f64)>,
    },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
    is_param: bool,
}

/// Gradients of a scalar with respect to every parameter leaf of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient for a parameter leaf; `None` if `var` is not a parameter.
    pub fn get(&self, var: Var) -> Option<&Matrix> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Matrix> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    meter: FlopMeter,
    consumed: bool,
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn meter(&self) -> &FlopMeter {
        &self.meter
    }

    pub fn flops(&self) -> FlopCount {
        self.meter.snapshot()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a `1×1` node.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        let m = self.value(v);
        if m.shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "expected a 1x1 node, got {:?}",
                m.shape()
            )));
        }
        Ok(m.data()[0])
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            is_param: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable input whose gradient is reported by `backward`.
    pub fn param(&mut self, value: Matrix) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.nodes[v.0].is_param = true;
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_metered(self.value(b), &self.meter)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        self.meter.add_other(out.len());
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        self.meter.add_other(out.len());
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).hadamard(self.value(b))?;
        self.meter.add_other(out.len());
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        self.meter.add_other(out.len());
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(out, Op::Transpose(a), rg)
    }

    /// Adds the `1×k` row `row` to every row of the `t×k` matrix `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (am, rm) = (self.value(a), self.value(row));
        if rm.rows() != 1 || rm.cols() != am.cols() {
            return Err(Error::shape("add_row", am.shape(), rm.shape()));
        }
        let out = Matrix::from_fn(am.rows(), am.cols(), |i, j| am.get(i, j) + rm.get(0, j));
        self.meter.add_other(out.len());
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(out, Op::AddRow(a, row), rg))
    }

    /// Sum of all entries, as a `1×1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.meter.add_other(self.value(a).len());
        let rg = self.rg(a);
        self.push(Matrix::filled(1, 1, s), Op::Sum(a), rg)
    }

    /// Squared Frobenius norm, as a `1×1` node.
    pub fn frobenius_sq(&mut self, a: Var) -> Var {
        let s = self.value(a).frobenius_sq();
        self.meter.add_other(2 * self.value(a).len());
        let rg = self.rg(a);
        self.push(Matrix::filled(1, 1, s), Op::FrobeniusSq(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        for i in 0..x.rows() {
            let row = &mut out.data_mut()[i * x.cols()..(i + 1) * x.cols()];
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        self.meter.add_other(5 * out.len());
        let rg = self.rg(a);
        self.push(out, Op::SoftmaxRows(a), rg)
    }

    /// Row-wise layer normalization with `1×d` gain and shift.
    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var, eps: f64) -> Result<Var> {
        let xm = self.value(x);
        let (t, d) = xm.shape();
        for v in [gain, shift] {
            if self.shape(v) != (1, d) {
                return Err(Error::shape("layer_norm", xm.shape(), self.shape(v)));
            }
        }
        let mut normalized = Matrix::zeros(t, d);
        let mut inv_std = Vec::with_capacity(t);
        for i in 0..t {
            let row = xm.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for (j, v) in row.iter().enumerate() {
                normalized.set(i, j, (v - mean) * is);
            }
        }
        let (g, b) = (self.value(gain), self.value(shift));
        let out = Matrix::from_fn(t, d, |i, j| {
            normalized.get(i, j) * g.get(0, j) + b.get(0, j)
        });
        self.meter.add_other(8 * out.len());
        let rg = self.rg(x) || self.rg(gain) || self.rg(shift);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                shift,
                normalized,
                inv_std,
            },
            rg,
        ))
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        self.meter.add_other(8 * out.len());
        let rg = self.rg(a);
        self.push(out, Op::Gelu(a), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let m = self.value(a);
        if start + len > m.rows() {
            return Err(Error::Index {
                what: "row slice end",
                index: start + len,
                len: m.rows(),
            });
        }
        let out = Matrix::from_fn(len, m.cols(), |i, j| m.get(start + i, j));
        let rg = self.rg(a);
        Ok(self.push(out, Op::SliceRows { src: a, start }, rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let m = self.value(a);
        if start + len > m.cols() {
            return Err(Error::Index {
                what: "column slice end",
                index: start + len,
                len: m.cols(),
            });
        }
        let out = Matrix::from_fn(m.rows(), len, |i, j| m.get(i, start + j));
        let rg = self.rg(a);
        Ok(self.push(out, Op::SliceCols { src: a, start }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts
            .first()
            .map(|&v| self.shape(v).1)
            .ok_or_else(|| Error::Contract("concat_rows of nothing".into()))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            if m.cols() != cols {
                return Err(Error::shape("concat_rows", (rows, cols), m.shape()));
            }
            data.extend_from_slice(m.data());
            rows += m.rows();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Matrix::new(rows, cols, data)?,
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|&v| self.shape(v).0)
            .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
        let mut cols = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.0 != rows {
                return Err(Error::shape("concat_cols", (rows, cols), s));
            }
            cols += s.1;
        }
        let mut out = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let m = self.value(p);
            for i in 0..rows {
                out.data_mut()[i * cols + offset..i * cols + offset + m.cols()]
                    .copy_from_slice(m.row(i));
            }
            offset += m.cols();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Mean softmax cross-entropy of `b×k` logits against `labels`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lm = self.value(logits);
        let (b, k) = lm.shape();
        if labels.len() != b || b == 0 {
            return Err(Error::Contract(format!(
                "cross_entropy: {b} logit rows but {} labels",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Index {
                what: "class label",
                index: bad,
                len: k,
            });
        }
        let mut probs = Matrix::zeros(b, k);
        let mut loss = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let row = lm.row(i);
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[label];
            for (j, v) in row.iter().enumerate() {
                probs.set(i, j, (v - lse).exp());
            }
        }
        self.meter.add_other(5 * b * k);
        let rg = self.rg(logits);
        Ok(self.push(
            Matrix::filled(1, 1, loss / b as f64),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Row-wise cosine similarity of two `t×d` matrices, returned as `t×1`.
    ///
    /// Rows where either side has norm below [`DEGENERATE_NORM`] yield 0 and
    /// pass no gradient.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (am, bm) = (self.value(a), self.value(b));
        if am.shape() != bm.shape() {
            return Err(Error::shape("cosine_rows", am.shape(), bm.shape()));
        }
        let t = am.rows();
        let mut out = Matrix::zeros(t, 1);
        let mut norms = Vec::with_capacity(t);
        for i in 0..t {
            let (ra, rb) = (am.row(i), bm.row(i));
            let na = ra.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb = rb.iter().map(|v| v * v).sum::<f64>().sqrt();
            norms.push((na, nb));
            if na < DEGENERATE_NORM || nb < DEGENERATE_NORM {
                continue;
            }
            let dot: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
            out.set(i, 0, dot / (na * nb));
        }
        self.meter.add_other(6 * am.len() + 3 * t);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::CosineRows { a, b, norms }, rg))
    }

    /// Reverse sweep from the `1×1` node `output`.
    pub fn backward(&mut self, output: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if self.shape(output) != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got {:?}",
                self.shape(output)
            )));
        }
        self.consumed = true;

        let n = self.nodes.len();
        let mut adj: Vec<Option<Matrix>> = (0..n).map(|_| None).collect();
        adj[output.0] = Some(Matrix::filled(1, 1, 1.0));

        for i in (0..=output.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            if self.nodes[i].is_param {
                adj[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut adj)?;
        }

        let grads = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, node)| {
                node.is_param.then(|| {
                    adj[i]
                        .take()
                        .unwrap_or_else(|| Matrix::zeros(node.value.rows(), node.value.cols()))
                })
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate(&self, adj: &mut [Option<Matrix>], v: Var, g: Matrix) -> Result<()> {
        if !self.rg(v) {
            return Ok(());
        }
        match &mut adj[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    fn propagate(&self, i: usize, g: &Matrix, adj: &mut [Option<Matrix>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (am, bm) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let ga = g.matmul_metered(&bm.transpose(), &self.meter)?;
                    self.accumulate(adj, *a, ga)?;
                }
                if self.rg(*b) {
                    let gb = am.transpose().matmul_metered(g, &self.meter)?;
                    self.accumulate(adj, *b, gb)?;
                }
            }
            Op::Add(a, b) => {
                self.accumulate(adj, *a, g.clone())?;
                self.accumulate(adj, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(adj, *a, g.clone())?;
                self.accumulate(adj, *b, g.scale(-1.0))?;
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(adj, *a, g.hadamard(self.value(*b))?)?;
                }
                if self.rg(*b) {
                    self.accumulate(adj, *b, g.hadamard(self.value(*a))?)?;
                }
            }
            Op::Scale(a, s) => self.accumulate(adj, *a, g.scale(*s))?,
            Op::Transpose(a) => self.accumulate(adj, *a, g.transpose())?,
            Op::AddRow(a, row) => {
                self.accumulate(adj, *a, g.clone())?;
                if self.rg(*row) {
                    let sums = Matrix::from_fn(1, g.cols(), |_, j| {
                        (0..g.rows()).map(|r| g.get(r, j)).sum()
                    });
                    self.accumulate(adj, *row, sums)?;
                }
            }
            Op::Sum(a) => {
                let (r, c) = self.shape(*a);
                self.accumulate(adj, *a, Matrix::filled(r, c, g.get(0, 0)))?;
            }
            Op::FrobeniusSq(a) => {
                let s = 2.0 * g.get(0, 0);
                self.accumulate(adj, *a, self.value(*a).scale(s))?;
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut out = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let dot: f64 = y.row(r).iter().zip(g.row(r)).map(|(p, q)| p * q).sum();
                    for c in 0..y.cols() {
                        out.set(r, c, y.get(r, c) * (g.get(r, c) - dot));
                    }
                }
                self.accumulate(adj, *a, out)?;
            }
            Op::LayerNorm {
                x,
                gain,
                shift,
                normalized,
                inv_std,
            } => {
                let (t, d) = normalized.shape();
                let gm = self.value(*gain);
                if self.rg(*x) {
                    let mut dx = Matrix::zeros(t, d);
                    for (r, &inv) in inv_std.iter().enumerate() {
                        let dxhat: Vec<f64> = (0..d).map(|c| g.get(r, c) * gm.get(0, c)).collect();
                        let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dxhat_xhat = dxhat
                            .iter()
                            .zip(normalized.row(r))
                            .map(|(p, q)| p * q)
                            .sum::<f64>()
                            / d as f64;
                        for (c, &dh) in dxhat.iter().enumerate() {
                            let v =
                                inv * (dh - mean_dxhat - normalized.get(r, c) * mean_dxhat_xhat);
                            dx.set(r, c, v);
                        }
                    }
                    self.accumulate(adj, *x, dx)?;
                }
                if self.rg(*gain) {
                    let dg = Matrix::from_fn(1, d, |_, c| {
                        (0..t).map(|r| g.get(r, c) * normalized.get(r, c)).sum()
                    });
                    self.accumulate(adj, *gain, dg)?;
                }
                if self.rg(*shift) {
                    let db = Matrix::from_fn(1, d, |_, c| (0..t).map(|r| g.get(r, c)).sum());
                    self.accumulate(adj, *shift, db)?;
                }
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let d = x.map(gelu_grad).hadamard(g)?;
                self.accumulate(adj, *a, d)?;
            }
            Op::SliceRows { src, start } => {
                let (r, c) = self.shape(*src);
                let mut out = Matrix::zeros(r, c);
                for i in 0..g.rows() {
                    out.data_mut()[(start + i) * c..(start + i + 1) * c].copy_from_slice(g.row(i));
                }
                self.accumulate(adj, *src, out)?;
            }
            Op::SliceCols { src, start } => {
                let (r, c) = self.shape(*src);
                let mut out = Matrix::zeros(r, c);
                for i in 0..r {
                    for j in 0..g.cols() {
                        out.set(i, start + j, g.get(i, j));
                    }
                }
                self.accumulate(adj, *src, out)?;
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    if self.rg(p) {
                        let piece =
                            Matrix::new(r, c, g.data()[offset * c..(offset + r) * c].to_vec())?;
                        self.accumulate(adj, p, piece)?;
                    }
                    offset += r;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    if self.rg(p) {
                        let piece = Matrix::from_fn(r, c, |i, j| g.get(i, offset + j));
                        self.accumulate(adj, p, piece)?;
                    }
                    offset += c;
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let b = labels.len() as f64;
                let s = g.get(0, 0) / b;
                let mut out = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    out.set(i, l, out.get(i, l) - 1.0);
                }
                self.accumulate(adj, *logits, out.scale(s))?;
            }
            Op::CosineRows { a, b, norms } => {
                let (am, bm) = (self.value(*a), self.value(*b));
                let (t, d) = am.shape();
                let mut ga = Matrix::zeros(t, d);
                let mut gb = Matrix::zeros(t, d);
                for (r, &(na, nb)) in norms.iter().enumerate() {
                    if na < DEGENERATE_NORM || nb < DEGENERATE_NORM {
                        continue;
                    }
                    let cos = node.value.get(r, 0);
                    let up = g.get(r, 0);
                    for c in 0..d {
                        let (x, y) = (am.get(r, c), bm.get(r, c));
                        ga.set(r, c, up * (y / (na * nb) - cos * x / (na * na)));
                        gb.set(r, c, up * (x / (na * nb) - cos * y / (nb * nb)));
                    }
                }
                self.accumulate(adj, *a, ga)?;
                self.accumulate(adj, *b, gb)?;
            }
        }
        Ok(())
    }
}

/// Evaluates `f` on a fresh tape with `params` as differentiable leaves and
/// returns the scalar value together with `∂f/∂p` for each parameter.
pub fn grad<F>(params: &[Matrix], f: F) -> Result<(f64, Vec<Matrix>)>
where
    F: FnOnce(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let value = tape.scalar(out)?;
    let mut grads = tape.backward(out)?;
    let gs = vars
        .iter()
        .map(|&v| {
            grads
                .take(v)
                .expect("every registered parameter has a gradient")
        })
        .collect();
    Ok((value, gs))
}
