//! Reverse-mode differentiation over a small set of dense primitives.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value and
//! enough bookkeeping to push a cotangent back to its inputs. Nodes built only
//! from constants are marked as not requiring gradients and are skipped during
//! the backward sweep, which is how frozen networks stay cheap.

use rand::Rng as _;

use super::params::ParamSet;
use super::tensor::{gemm, MatLayout, Tensor};
use crate::rng::Rng;
use crate::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Mish(Var),
    Gelu(Var),
    Tanh(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax(Var),
    Gather {
        table: Var,
        idx: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    Transpose(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    Mse(Var, Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Tape of tensor operations.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Cotangents produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, zero-filled when the loss does not depend on it.
    pub fn get_or_zeros(&self, v: Var) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    /// Gradients for a list of leaves, in order.
    pub fn collect(&self, vars: &[Var]) -> Vec<Tensor> {
        vars.iter().map(|&v| self.get_or_zeros(v)).collect()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that receives a gradient.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// One differentiable leaf per parameter, in `ParamSet` order.
    pub fn bind(&mut self, params: &ParamSet) -> Vec<Var> {
        params
            .iter()
            .map(|(_, t)| self.variable(t.clone()))
            .collect()
    }

    /// One constant leaf per parameter; used for frozen networks.
    pub fn bind_frozen(&mut self, params: &ParamSet) -> Vec<Var> {
        params
            .iter()
            .map(|(_, t)| self.constant(t.clone()))
            .collect()
    }

    fn check_same(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `x + b` with `b` broadcast over the rows of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let cols = xv.cols();
        if bv.len() != cols {
            return Err(Error::shape("add_row", xv.shape(), bv.shape()));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(cols) {
            for (o, bb) in row.iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        let rg = self.needs(&[x, b]);
        Ok(self.push(out, Op::AddRow(x, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("sub", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("mul", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        let rg = self.needs(&[a]);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn mish(&mut self, a: Var) -> Var {
        let out = self.value(a).map(mish);
        let rg = self.needs(&[a]);
        self.push(out, Op::Mish(a), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        let rg = self.needs(&[a]);
        self.push(out, Op::Gelu(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        let rg = self.needs(&[a]);
        self.push(out, Op::Tanh(a), rg)
    }

    /// Row-wise layer normalisation with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let cols = xv.cols();
        let (gv, bv) = (self.value(gamma), self.value(beta));
        if gv.len() != cols || bv.len() != cols {
            return Err(Error::shape("layer_norm", xv.shape(), gv.shape()));
        }
        let rows = xv.rows();
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv.data()[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * gv.data()[c] + bv.data()[c];
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.needs(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let cols = xv.cols();
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(cols) {
            softmax_in_place(row);
        }
        let rg = self.needs(&[x]);
        self.push(out, Op::Softmax(x), rg)
    }

    /// Row lookup: output row `i` is `table[idx[i]]`.
    pub fn gather(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (rows, cols) = (tv.rows(), tv.cols());
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            if i >= rows {
                return Err(Error::OutOfRange {
                    what: "gather row",
                    index: i,
                    limit: rows,
                });
            }
            out.extend_from_slice(&tv.data()[i * cols..(i + 1) * cols]);
        }
        let out = Tensor::matrix(idx.len(), cols, out)?;
        let rg = self.needs(&[table]);
        Ok(self.push(
            out,
            Op::Gather {
                table,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Stacks matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(Error::shape(
                    "concat_rows",
                    self.value(parts[0]).shape(),
                    v.shape(),
                ));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let out = Tensor::matrix(rows, cols, data)?;
        let rg = self.needs(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Places matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let mut total = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != rows {
                return Err(Error::shape(
                    "concat_cols",
                    self.value(parts[0]).shape(),
                    v.shape(),
                ));
            }
            total += v.cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let v = self.value(p);
                let c = v.cols();
                data.extend_from_slice(&v.data()[r * c..(r + 1) * c]);
            }
        }
        let out = Tensor::matrix(rows, total, data)?;
        let rg = self.needs(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        let (rows, cols) = (v.rows(), v.cols());
        if start + len > cols {
            return Err(Error::OutOfRange {
                what: "slice_cols end",
                index: start + len,
                limit: cols,
            });
        }
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&v.data()[r * cols + start..r * cols + start + len]);
        }
        let out = Tensor::matrix(rows, len, data)?;
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::SliceCols { x, start }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let out = self.value(x).transpose();
        let rg = self.needs(&[x]);
        self.push(out, Op::Transpose(x), rg)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(x).map(|v| v.clamp(lo, hi));
        let rg = self.needs(&[x]);
        self.push(out, Op::Clamp { x, lo, hi }, rg)
    }

    /// Scalar mean of `(a - b)²` over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("mse", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let n = av.len().max(1) as f64;
        let s: f64 = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::scalar(s / n), Op::Mse(a, b), rg))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let m = v.sum() / v.len().max(1) as f64;
        let rg = self.needs(&[a]);
        self.push(Tensor::scalar(m), Op::Mean(a), rg)
    }

    /// Inverted dropout: zeroes each element with probability `p` and
    /// rescales survivors by `1 / (1 - p)`.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut Rng) -> Result<Var> {
        if p <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - p;
        let shape = self.value(x).shape().to_vec();
        let n = self.value(x).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| {
                if rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let m = self.constant(Tensor::new(shape, mask)?);
        self.mul(x, m)
    }

    /// Multi-head causal scaled dot-product attention.
    ///
    /// `q`, `k`, `v` hold `batch` sequences of `seq` rows each, stacked as a
    /// `(batch·seq) × d` matrix; heads split the `d` columns evenly. Position
    /// `t` attends to positions `0..=t` of its own sequence.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    ) -> Result<Var> {
        self.check_same("causal_attention", q, k)?;
        self.check_same("causal_attention", q, v)?;
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        if qv.rows() != batch * seq || heads == 0 || d % heads != 0 || seq == 0 {
            return Err(Error::shape(
                "causal_attention",
                qv.shape(),
                &[batch, seq, heads],
            ));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut out = vec![0.0; batch * seq * d];
        let mut head_out = vec![0.0; seq * dh];
        for b in 0..batch {
            for h in 0..heads {
                let off = b * seq * d + h * dh;
                let p = &mut probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                gemm(
                    seq,
                    dh,
                    seq,
                    &qv.data()[off..],
                    MatLayout::row_major(d),
                    &kv.data()[off..],
                    MatLayout::transposed(d),
                    p,
                    0.0,
                );
                for i in 0..seq {
                    let row = &mut p[i * seq..(i + 1) * seq];
                    for s in row[..=i].iter_mut() {
                        *s *= scale;
                    }
                    softmax_in_place(&mut row[..=i]);
                    for s in row[i + 1..].iter_mut() {
                        *s = 0.0;
                    }
                }
                gemm(
                    seq,
                    seq,
                    dh,
                    p,
                    MatLayout::row_major(seq),
                    &vv.data()[off..],
                    MatLayout::row_major(d),
                    &mut head_out,
                    0.0,
                );
                for i in 0..seq {
                    let dst = (b * seq + i) * d + h * dh;
                    out[dst..dst + dh].copy_from_slice(&head_out[i * dh..(i + 1) * dh]);
                }
            }
        }
        let out = Tensor::matrix(batch * seq, d, out)?;
        let rg = self.needs(&[q, k, v]);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::shape("backward", lv.shape(), &[1]));
        }
        if !lv.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        let shapes = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(node, &g, &mut grads)?;
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
        if !self.nodes[v.0].requires_grad {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_scaled(&g, 1.0)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.requires_grad(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(
                        m,
                        n,
                        k,
                        g.data(),
                        MatLayout::row_major(n),
                        bv.data(),
                        MatLayout::transposed(n),
                        &mut da,
                        0.0,
                    );
                    self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), da)?)?;
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(
                        k,
                        m,
                        n,
                        av.data(),
                        MatLayout::transposed(k),
                        g.data(),
                        MatLayout::row_major(n),
                        &mut db,
                        0.0,
                    );
                    self.accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), db)?)?;
                }
            }
            Op::AddRow(x, b) => {
                self.accumulate(grads, *x, g.clone())?;
                if self.requires_grad(*b) {
                    let cols = g.cols();
                    let mut db = vec![0.0; cols];
                    for row in g.data().chunks(cols) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    let shape = self.value(*b).shape().to_vec();
                    self.accumulate(grads, *b, Tensor::new(shape, db)?)?;
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.map(|v| -v))?;
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |x, y| x * y)?)?;
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |x, y| x * y)?)?;
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(grads, *a, g.map(|v| v * s))?;
            }
            Op::Mish(a) => {
                let d = self.value(*a).zip_map(g, |x, gy| gy * mish_grad(x))?;
                self.accumulate(grads, *a, d)?;
            }
            Op::Gelu(a) => {
                let d = self.value(*a).zip_map(g, |x, gy| gy * gelu_grad(x))?;
                self.accumulate(grads, *a, d)?;
            }
            Op::Tanh(a) => {
                let d = y.zip_map(g, |t, gy| gy * (1.0 - t * t))?;
                self.accumulate(grads, *a, d)?;
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let cols = g.cols();
                let rows = g.rows();
                let gv = self.value(*gamma);
                if self.requires_grad(*gamma) || self.requires_grad(*beta) {
                    let mut dg = vec![0.0; cols];
                    let mut db = vec![0.0; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            let gy = g.data()[r * cols + c];
                            dg[c] += gy * xhat[r * cols + c];
                            db[c] += gy;
                        }
                    }
                    self.accumulate(grads, *gamma, Tensor::new(gv.shape().to_vec(), dg)?)?;
                    let bs = self.value(*beta).shape().to_vec();
                    self.accumulate(grads, *beta, Tensor::new(bs, db)?)?;
                }
                if self.requires_grad(*x) {
                    let mut dx = vec![0.0; rows * cols];
                    let mut dxhat = vec![0.0; cols];
                    for r in 0..rows {
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for c in 0..cols {
                            let v = g.data()[r * cols + c] * gv.data()[c];
                            dxhat[c] = v;
                            mean_d += v;
                            mean_dh += v * xhat[r * cols + c];
                        }
                        mean_d /= cols as f64;
                        mean_dh /= cols as f64;
                        for c in 0..cols {
                            dx[r * cols + c] =
                                rstd[r] * (dxhat[c] - mean_d - xhat[r * cols + c] * mean_dh);
                        }
                    }
                    let xs = self.value(*x).shape().to_vec();
                    self.accumulate(grads, *x, Tensor::new(xs, dx)?)?;
                }
            }
            Op::Softmax(x) => {
                let cols = y.cols();
                let mut dx = vec![0.0; y.len()];
                for ((dr, yr), gr) in dx
                    .chunks_mut(cols)
                    .zip(y.data().chunks(cols))
                    .zip(g.data().chunks(cols))
                {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        dr[c] = yr[c] * (gr[c] - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), dx)?)?;
            }
            Op::Gather { table, idx } => {
                let tv = self.value(*table);
                let cols = tv.cols();
                let mut dt = Tensor::zeros(tv.shape());
                for (r, &i) in idx.iter().enumerate() {
                    let src = &g.data()[r * cols..(r + 1) * cols];
                    for (d, s) in dt.data_mut()[i * cols..(i + 1) * cols].iter_mut().zip(src) {
                        *d += s;
                    }
                }
                self.accumulate(grads, *table, dt)?;
            }
            Op::ConcatRows(parts) => {
                let cols = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let n = pv.rows() * cols;
                    if self.requires_grad(p) {
                        let part = g.data()[offset..offset + n].to_vec();
                        self.accumulate(grads, p, Tensor::new(pv.shape().to_vec(), part)?)?;
                    }
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let rows = g.rows();
                let total = g.cols();
                let mut start = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let c = pv.cols();
                    if self.requires_grad(p) {
                        let mut part = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            part.extend_from_slice(
                                &g.data()[r * total + start..r * total + start + c],
                            );
                        }
                        self.accumulate(grads, p, Tensor::new(pv.shape().to_vec(), part)?)?;
                    }
                    start += c;
                }
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let (rows, cols) = (xv.rows(), xv.cols());
                let len = g.cols();
                let mut dx = Tensor::zeros(xv.shape());
                for r in 0..rows {
                    dx.data_mut()[r * cols + start..r * cols + start + len]
                        .copy_from_slice(&g.data()[r * len..(r + 1) * len]);
                }
                self.accumulate(grads, *x, dx)?;
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, g.clone().reshape(shape)?)?;
            }
            Op::Transpose(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, g.transpose().reshape(shape)?)?;
            }
            Op::Clamp { x, lo, hi } => {
                let (lo, hi) = (*lo, *hi);
                let d = self
                    .value(*x)
                    .zip_map(g, |v, gy| if v >= lo && v <= hi { gy } else { 0.0 })?;
                self.accumulate(grads, *x, d)?;
            }
            Op::Mse(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let s = 2.0 * g.item() / av.len().max(1) as f64;
                let da = av.zip_map(bv, |x, y| s * (x - y))?;
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, da.map(|v| -v))?;
                }
                self.accumulate(grads, *a, da)?;
            }
            Op::Mean(a) => {
                let av = self.value(*a);
                let s = g.item() / av.len().max(1) as f64;
                self.accumulate(grads, *a, Tensor::full(av.shape(), s))?;
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            } => {
                self.attention_backward((*q, *k, *v), (*batch, *seq, *heads), probs, g, grads)?;
            }
        }
        Ok(())
    }

    fn attention_backward(
        &self,
        (q, k, v): (Var, Var, Var),
        (batch, seq, heads): (usize, usize, usize),
        probs: &[f64],
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = vec![0.0; batch * seq * d];
        let mut dk = vec![0.0; batch * seq * d];
        let mut dv = vec![0.0; batch * seq * d];
        let mut dp = vec![0.0; seq * seq];
        let mut tmp = vec![0.0; seq * dh];
        for b in 0..batch {
            for h in 0..heads {
                let off = b * seq * d + h * dh;
                let p = &probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                // dV = Pᵀ G
                gemm(
                    seq,
                    seq,
                    dh,
                    p,
                    MatLayout::transposed(seq),
                    &g.data()[off..],
                    MatLayout::row_major(d),
                    &mut tmp,
                    0.0,
                );
                scatter_head(&mut dv, &tmp, b, h, seq, d, dh);
                // dP = G Vᵀ
                gemm(
                    seq,
                    dh,
                    seq,
                    &g.data()[off..],
                    MatLayout::row_major(d),
                    &vv.data()[off..],
                    MatLayout::transposed(d),
                    &mut dp,
                    0.0,
                );
                // dS = P ⊙ (dP - rowsum(P ⊙ dP)), then fold in the 1/sqrt(dh) scale
                for i in 0..seq {
                    let pr = &p[i * seq..(i + 1) * seq];
                    let dr = &mut dp[i * seq..(i + 1) * seq];
                    let dot: f64 = pr[..=i].iter().zip(&dr[..=i]).map(|(a, b)| a * b).sum();
                    for j in 0..=i {
                        dr[j] = pr[j] * (dr[j] - dot) * scale;
                    }
                    for s in dr[i + 1..].iter_mut() {
                        *s = 0.0;
                    }
                }
                // dQ = dS K
                gemm(
                    seq,
                    seq,
                    dh,
                    &dp,
                    MatLayout::row_major(seq),
                    &kv.data()[off..],
                    MatLayout::row_major(d),
                    &mut tmp,
                    0.0,
                );
                scatter_head(&mut dq, &tmp, b, h, seq, d, dh);
                // dK = dSᵀ Q
                gemm(
                    seq,
                    seq,
                    dh,
                    &dp,
                    MatLayout::transposed(seq),
                    &qv.data()[off..],
                    MatLayout::row_major(d),
                    &mut tmp,
                    0.0,
                );
                scatter_head(&mut dk, &tmp, b, h, seq, d, dh);
            }
        }
        let shape = qv.shape().to_vec();
        self.accumulate(grads, q, Tensor::new(shape.clone(), dq)?)?;
        self.accumulate(grads, k, Tensor::new(shape.clone(), dk)?)?;
        self.accumulate(grads, v, Tensor::new(shape, dv)?)?;
        Ok(())
    }
}

fn scatter_head(dst: &mut [f64], src: &[f64], b: usize, h: usize, seq: usize, d: usize, dh: usize) {
    for i in 0..seq {
        let o = (b * seq + i) * d + h * dh;
        dst[o..o + dh].copy_from_slice(&src[i * dh..(i + 1) * dh]);
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// `ln(1 + e^x)`, switching to asymptotic forms for |x| > 20.
pub fn softplus(x: f64) -> f64 {
    if x > 20.0 {
        x
    } else if x < -20.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `tanh(softplus(x))` written as `n / (n + 2)` with `n = e^x (e^x + 2)`.
fn tanh_softplus(x: f64) -> f64 {
    if x > 20.0 {
        1.0
    } else {
        let e = x.exp();
        let n = e * (e + 2.0);
        n / (n + 2.0)
    }
}

pub fn mish(x: f64) -> f64 {
    x * tanh_softplus(x)
}

fn mish_grad(x: f64) -> f64 {
    let t = tanh_softplus(x);
    t + x * (1.0 - t * t) * sigmoid(x)
}

/// GELU, tanh approximation, using `(1 + tanh u) / 2 = σ(2u)`.
pub fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    x * sigmoid(2.0 * u)
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let s = sigmoid(2.0 * u);
    s + 2.0 * x * s * (1.0 - s) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}
