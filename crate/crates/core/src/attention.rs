//! Multi-head scaled dot-product attention over token matrices `(n, d)`.

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::{softmax_last, Linear, ParamBuilder};

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    heads: usize,
    dim: usize,
}

impl MultiHeadAttention {
    pub fn new(pb: &mut ParamBuilder<'_>, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("embedding dim {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            q: Linear::new(pb, "q", dim, dim)?,
            k: Linear::new(pb, "k", dim, dim)?,
            v: Linear::new(pb, "v", dim, dim)?,
            out: Linear::new(pb, "out", dim, dim)?,
            heads,
            dim,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    /// Queries come from `query_src (n, d)`, keys and values from `kv_src (m, d)`.
    /// Returns `(n, d)`, already passed through the output projection.
    pub fn forward(&self, query_src: &Tensor, kv_src: &Tensor) -> Result<Tensor> {
        let (n, d) = query_src.dims2()?;
        let (m, d2) = kv_src.dims2()?;
        if d != self.dim || d2 != self.dim {
            return Err(Error::Shape(format!("attention expects dim {}, got {d} and {d2}", self.dim)));
        }
        let dh = d / self.heads;
        let split = |t: Tensor, len: usize| -> Result<Tensor> {
            Ok(t.reshape((len, self.heads, dh))?.transpose(0, 1)?.contiguous()?)
        };
        let q = split(self.q.forward(query_src)?, n)?;
        let k = split(self.k.forward(kv_src)?, m)?;
        let v = split(self.v.forward(kv_src)?, m)?;
        let scores = (q.matmul(&k.t()?)? / (dh as f64).sqrt())?;
        let weights = softmax_last(&scores)?;
        let ctx = weights.matmul(&v)?.transpose(0, 1)?.contiguous()?.reshape((n, d))?;
        self.out.forward(&ctx)
    }
}

/// Two-layer feed-forward block `Linear -> ReLU -> Linear`.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new(pb: &mut ParamBuilder<'_>, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(pb, "fc1", dim, hidden)?,
            fc2: Linear::new(pb, "fc2", hidden, dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.relu()?)
    }
}
