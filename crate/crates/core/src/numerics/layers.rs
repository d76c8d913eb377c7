//! Layer primitives built on the tape.

use rand::Rng as _;

use super::graph::{Graph, Var};
use super::params::ParamSet;
use super::tensor::Tensor;
use crate::rng::Rng;
use crate::{Error, Result};

/// `y[i, j] = Σ_k x[i, k]·w[k, j] + b[j]`, evaluated eagerly.
pub fn affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    if x.cols() != w.rows() {
        return Err(Error::shape("affine (x vs W)", x.shape(), w.shape()));
    }
    if b.len() != w.cols() {
        return Err(Error::shape("affine (W vs b)", w.shape(), b.shape()));
    }
    let mut y = x.matmul(w)?;
    let cols = y.cols();
    for row in y.data_mut().chunks_mut(cols) {
        for (v, bb) in row.iter_mut().zip(b.data()) {
            *v += bb;
        }
    }
    Ok(y)
}

fn uniform(rng: &mut Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// Fully connected layer; weights `U(±1/√fan_in)`, zero bias.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        let w = params.add(
            format!("{name}.weight"),
            uniform(rng, &[d_in, d_out], bound),
        )?;
        let b = params.add(format!("{name}.bias"), Tensor::zeros(&[d_out]))?;
        Ok(Self { w, b, d_in, d_out })
    }

    pub fn forward(&self, g: &mut Graph, vars: &[Var], x: Var) -> Result<Var> {
        let h = g.matmul(x, vars[self.w])?;
        g.add_row(h, vars[self.b])
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: usize,
    pub beta: usize,
}

impl LayerNorm {
    pub fn new(params: &mut ParamSet, name: &str, dim: usize) -> Result<Self> {
        let gamma = params.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0))?;
        let beta = params.add(format!("{name}.beta"), Tensor::zeros(&[dim]))?;
        Ok(Self { gamma, beta })
    }

    pub fn forward(&self, g: &mut Graph, vars: &[Var], x: Var) -> Result<Var> {
        g.layer_norm(x, vars[self.gamma], vars[self.beta])
    }
}

/// Lookup table of `rows × dim` learned vectors.
#[derive(Clone, Copy, Debug)]
pub struct Embedding {
    pub table: usize,
    pub rows: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        rows: usize,
        dim: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let bound = 1.0 / (dim as f64).sqrt();
        let table = params.add(format!("{name}.table"), uniform(rng, &[rows, dim], bound))?;
        Ok(Self { table, rows, dim })
    }

    pub fn forward(&self, g: &mut Graph, vars: &[Var], idx: &[usize]) -> Result<Var> {
        g.gather(vars[self.table], idx)
    }
}

/// Causal self-attention block: fused QKV projection, masked attention and
/// an output projection.
#[derive(Clone, Copy, Debug)]
pub struct CausalSelfAttention {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl CausalSelfAttention {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::InvalidArgument(format!(
                "embedding width {dim} not divisible by {heads} heads"
            )));
        }
        let qkv = Linear::new(params, &format!("{name}.qkv"), dim, 3 * dim, rng)?;
        let proj = Linear::new(params, &format!("{name}.proj"), dim, dim, rng)?;
        Ok(Self {
            qkv,
            proj,
            heads,
            dim,
        })
    }

    /// `x` holds `batch` sequences of `seq` tokens, stacked row-wise.
    pub fn forward(
        &self,
        g: &mut Graph,
        vars: &[Var],
        x: Var,
        batch: usize,
        seq: usize,
    ) -> Result<Var> {
        let qkv = self.qkv.forward(g, vars, x)?;
        let q = g.slice_cols(qkv, 0, self.dim)?;
        let k = g.slice_cols(qkv, self.dim, self.dim)?;
        let v = g.slice_cols(qkv, 2 * self.dim, self.dim)?;
        let a = g.causal_attention(q, k, v, batch, seq, self.heads)?;
        self.proj.forward(g, vars, a)
    }
}
