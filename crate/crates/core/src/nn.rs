//! Small neural-network toolkit on top of `candle-core`.
//!
//! Parameters live in a [`ParamStore`] keyed by dotted names. Initialization
//! draws from a seeded ChaCha stream so that a (config, seed) pair always
//! yields the same weights, which the checkpoint and determinism guarantees
//! depend on.

use std::collections::BTreeMap;

use candle_core::{backprop::GradStore, DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// He-uniform, bound `sqrt(6 / fan_in)`.
    Kaiming,
    /// Glorot-uniform, bound `sqrt(6 / (fan_in + fan_out))`.
    Xavier,
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, the usual bias init.
    FanIn,
    /// Uniform in `[-b, b]`.
    Uniform(f64),
    Const(f64),
}

pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    device: Device,
    dtype: DType,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            vars: BTreeMap::new(),
            device: Device::Cpu,
            dtype,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&mut self) -> ParamBuilder<'_> {
        ParamBuilder {
            store: self,
            prefix: String::new(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn vars(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn all_vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn num_params(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Flattened values of one parameter, for inspection and oracles.
    pub fn values_f64(&self, name: &str) -> Result<Vec<f64>> {
        let var = self
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter `{name}`")))?;
        Ok(var
            .as_tensor()
            .flatten_all()?
            .to_dtype(DType::F64)?
            .to_vec1()?)
    }

    /// Overwrite one parameter in place; every layer holding it sees the change.
    pub fn set_values(&self, name: &str, values: &[f64]) -> Result<()> {
        let var = self
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter `{name}`")))?;
        if values.len() != var.elem_count() {
            return Err(Error::Shape(format!(
                "parameter `{name}` has {} elements, got {}",
                var.elem_count(),
                values.len()
            )));
        }
        let t = Tensor::from_slice(values, var.shape(), &self.device)?.to_dtype(self.dtype)?;
        var.set(&t)?;
        Ok(())
    }

    /// Copy of every parameter as raw tensors, keyed by name.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        let mut out = BTreeMap::new();
        for (name, var) in &self.vars {
            out.insert(name.clone(), var.as_tensor().detach().copy()?);
        }
        Ok(out)
    }

    /// Load values for every parameter. Names and shapes must match exactly.
    pub fn load(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.vars {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if t.shape() != var.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    t.shape().dims(),
                    var.shape().dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        if let Some(extra) = tensors.keys().find(|k| !self.vars.contains_key(*k)) {
            return Err(Error::Checkpoint(format!("unexpected tensor `{extra}`")));
        }
        Ok(())
    }

    /// Content hash over all parameter bytes (FNV-1a), used to compare states.
    pub fn fingerprint(&self) -> Result<u64> {
        let mut h: u64 = 0xcbf29ce484222325;
        for (name, var) in &self.vars {
            for b in name.bytes() {
                h = (h ^ b as u64).wrapping_mul(0x100000001b3);
            }
            let vals: Vec<f64> = var.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1()?;
            for v in vals {
                for b in v.to_bits().to_le_bytes() {
                    h = (h ^ b as u64).wrapping_mul(0x100000001b3);
                }
            }
        }
        Ok(h)
    }
}

pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    prefix: String,
}

impl ParamBuilder<'_> {
    pub fn pp(&mut self, name: &str) -> ParamBuilder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        ParamBuilder {
            store: self.store,
            prefix,
        }
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    /// Create a parameter. `fan_in`/`fan_out` feed the init bounds.
    pub fn var(&mut self, name: &str, dims: &[usize], init: Init, fan_in: usize, fan_out: usize) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        if self.store.vars.contains_key(&full) {
            return Err(Error::Invalid(format!("duplicate parameter `{full}`")));
        }
        let n: usize = dims.iter().product();
        let bound = match init {
            Init::Kaiming => (6.0 / fan_in.max(1) as f64).sqrt(),
            Init::Xavier => (6.0 / (fan_in + fan_out).max(1) as f64).sqrt(),
            Init::FanIn => 1.0 / (fan_in.max(1) as f64).sqrt(),
            Init::Uniform(b) => b,
            Init::Const(_) => 0.0,
        };
        let values: Vec<f64> = match init {
            Init::Const(c) => vec![c; n],
            _ => (0..n)
                .map(|_| self.store.rng.random_range(-bound..=bound))
                .collect(),
        };
        let t = Tensor::from_vec(values, dims, &self.store.device)?.to_dtype(self.store.dtype)?;
        let var = Var::from_tensor(&t)?;
        let tensor = var.as_tensor().clone();
        self.store.vars.insert(full, var);
        Ok(tensor)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, c_in: usize, c_out: usize, kernel: usize, stride: usize, padding: usize) -> Result<Self> {
        Self::with_init(pb, name, (c_in, c_out, kernel), stride, padding, Init::Kaiming, Init::Const(0.0))
    }

    /// Like [`Conv2d::new`] with explicit weight and bias initialisers;
    /// `dims` is `(c_in, c_out, kernel)`.
    pub fn with_init(
        pb: &mut ParamBuilder<'_>,
        name: &str,
        dims: (usize, usize, usize),
        stride: usize,
        padding: usize,
        weight_init: Init,
        bias_init: Init,
    ) -> Result<Self> {
        let (c_in, c_out, kernel) = dims;
        let mut pb = pb.pp(name);
        let fan_in = c_in * kernel * kernel;
        let weight = pb.var("weight", &[c_out, c_in, kernel, kernel], weight_init, fan_in, c_out * kernel * kernel)?;
        let bias = pb.var("bias", &[c_out], bias_init, fan_in, c_out)?;
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    /// 3x3, stride 1, same padding.
    pub fn same3(pb: &mut ParamBuilder<'_>, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        Self::new(pb, name, c_in, c_out, 3, 1, 1)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, kh, kw) = self.weight.dims4()?;
        let y = if self.stride == 1 && kh == kw && kh % 2 == 1 && self.padding == kh / 2 {
            same_conv(x, &self.weight)?
        } else {
            x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?
        };
        let c = self.bias.dim(0)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

/// Stride-1 "same" convolution as a single GEMM over a channel-major patch
/// matrix built from shifted views of the padded input. On CPU this beats
/// the im2col path of `Tensor::conv2d` most at high resolution and few
/// channels.
fn same_conv(x: &Tensor, weight: &Tensor) -> Result<Tensor> {
    let (b, c_in, h, w) = x.dims4()?;
    let (c_out, _, k, _) = weight.dims4()?;
    let p = k / 2;
    let padded = x.pad_with_zeros(2, p, p)?.pad_with_zeros(3, p, p)?;
    let mut views = Vec::with_capacity(k * k);
    for dy in 0..k {
        for dx in 0..k {
            views.push(padded.narrow(2, dy, h)?.narrow(3, dx, w)?);
        }
    }
    let cols = Tensor::cat(&views, 1)?.reshape((b, k * k * c_in, h * w))?;
    let wm = weight.permute((0, 2, 3, 1))?.reshape((c_out, k * k * c_in))?;
    Ok(wm.broadcast_matmul(&cols)?.reshape((b, c_out, h, w))?)
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let mut pb = pb.pp(name);
        let weight = pb.var("weight", &[d_out, d_in], Init::Xavier, d_in, d_out)?;
        let bias = pb.var("bias", &[d_out], Init::Const(0.0), d_in, d_out)?;
        Ok(Self { weight, bias })
    }

    /// `x` is `(n, d_in)` or `(b, n, d_in)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.broadcast_matmul(&self.weight.t()?)?;
        Ok(y.broadcast_add(&self.bias)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, dim: usize) -> Result<Self> {
        let mut pb = pb.pp(name);
        let gamma = pb.var("weight", &[dim], Init::Const(1.0), dim, dim)?;
        let beta = pb.var("bias", &[dim], Init::Const(0.0), dim, dim)?;
        Ok(Self {
            gamma,
            beta,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// Softmax over the last dimension, with the row max subtracted for stability.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

/// Logistic function written through `tanh` so large magnitudes stay finite.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((((x * 0.5)?.tanh()? + 1.0)? * 0.5)?)
}

/// Row-interpolation matrix `(n_out, n_in)` for half-pixel-centre bilinear
/// resampling (the `align_corners = false` convention).
pub fn bilinear_matrix(n_in: usize, n_out: usize) -> Vec<f64> {
    let mut m = vec![0.0; n_out * n_in];
    let scale = n_in as f64 / n_out as f64;
    for o in 0..n_out {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        let frac = src - i0 as f64;
        m[o * n_in + i0] += 1.0 - frac;
        m[o * n_in + i1] += frac;
    }
    m
}

/// Bilinear resize of a `(b, c, h, w)` tensor, expressed as two matmuls so it
/// is differentiable end to end.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if h == out_h && w == out_w {
        return Ok(x.clone());
    }
    let dev = x.device();
    let dt = x.dtype();
    let aw = Tensor::from_vec(bilinear_matrix(w, out_w), (out_w, w), dev)?.to_dtype(dt)?;
    let ah = Tensor::from_vec(bilinear_matrix(h, out_h), (out_h, h), dev)?.to_dtype(dt)?;
    let y = x.broadcast_matmul(&aw.t()?)?;
    Ok(ah.broadcast_matmul(&y)?)
}

/// Adam with L2 weight decay folded into the gradient.
pub struct Adam {
    vars: Vec<Var>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: i32,
    pub lr: f64,
    pub weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(vars: Vec<Var>, lr: f64, weight_decay: f64) -> Result<Self> {
        let m = vars
            .iter()
            .map(|v| v.as_tensor().zeros_like())
            .collect::<candle_core::Result<Vec<_>>>()?;
        let v = m.clone();
        Ok(Self {
            vars,
            m,
            v,
            step: 0,
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        })
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for (i, var) in self.vars.iter().enumerate() {
            let Some(g) = grads.get(var) else { continue };
            // detached so optimizer state never chains an op graph across steps
            let theta = var.as_tensor().detach();
            let g = if self.weight_decay != 0.0 {
                (g.detach() + (&theta * self.weight_decay)?)?
            } else {
                g.detach()
            };
            let m = ((&self.m[i] * self.beta1)? + (&g * (1.0 - self.beta1))?)?.detach();
            let v = ((&self.v[i] * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?.detach();
            let m_hat = (&m / bc1)?;
            let v_hat = (&v / bc2)?;
            let update = (m_hat / (v_hat.sqrt()? + self.eps)?)?;
            var.set(&(theta - (update * self.lr)?)?.detach())?;
            self.m[i] = m;
            self.v[i] = v;
        }
        Ok(())
    }
}
