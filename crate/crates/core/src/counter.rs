//! Triple-modal counting network.
//!
//! One extractor (convolutional backbone, linear token projection with
//! learned positional embeddings, transformer encoder) is applied to the RGB,
//! broker and auxiliary images. The three feature maps are summed and a small
//! convolutional head regresses a non-negative density map at `1 / stride`
//! of the input resolution.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::attention::{FeedForward, MultiHeadAttention};
use crate::error::{Error, Result};
use crate::nn::{resize_bilinear, Conv2d, Init, LayerNorm, Linear, ParamBuilder, ParamStore};

/// Backbone output stride.
pub const BACKBONE_STRIDE: usize = 16;
/// Initial per-cell density of the regression head.
pub const HEAD_BIAS_INIT: f64 = 0.01;
/// Bound of the uniform init of the final 1x1 conv weights.
pub const HEAD_WEIGHT_INIT: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backbone {
    /// VGG-19 convolutions without the last pooling layer (stride 16, 512 channels).
    Vgg19,
    /// Four conv+pool blocks, 16..128 channels. For tests and desk-scale runs.
    Tiny,
}

const VGG19: &[Option<usize>] = &[
    Some(64), Some(64), None,
    Some(128), Some(128), None,
    Some(256), Some(256), Some(256), Some(256), None,
    Some(512), Some(512), Some(512), Some(512), None,
    Some(512), Some(512), Some(512), Some(512),
];

const TINY: &[Option<usize>] = &[Some(16), None, Some(32), None, Some(64), None, Some(128), None];

impl Backbone {
    fn layers(self) -> &'static [Option<usize>] {
        match self {
            Backbone::Vgg19 => VGG19,
            Backbone::Tiny => TINY,
        }
    }

    pub fn out_channels(self) -> usize {
        self.layers().iter().rev().find_map(|l| *l).unwrap_or(3)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractorConfig {
    pub backbone: Backbone,
    pub embed_dim: usize,
    pub encoder_layers: usize,
    pub heads: usize,
    pub patch_count: usize,
    pub ffn_ratio: usize,
    pub input_size: (usize, usize),
    /// Input pixels per density cell along each axis.
    pub density_stride: usize,
    /// Widths of the two 3x3 convolutions of the regression head.
    pub head_channels: (usize, usize),
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            backbone: Backbone::Vgg19,
            embed_dim: 768,
            encoder_layers: 2,
            heads: 6,
            patch_count: 196,
            ffn_ratio: 4,
            input_size: (224, 224),
            density_stride: 8,
            head_channels: (256, 128),
        }
    }
}

impl ExtractorConfig {
    pub fn tiny() -> Self {
        Self {
            backbone: Backbone::Tiny,
            embed_dim: 128,
            encoder_layers: 1,
            heads: 4,
            patch_count: 16,
            input_size: (64, 64),
            head_channels: (64, 32),
            ..Self::default()
        }
    }

    pub fn token_grid(&self) -> (usize, usize) {
        (self.input_size.0 / BACKBONE_STRIDE, self.input_size.1 / BACKBONE_STRIDE)
    }

    pub fn density_size(&self) -> (usize, usize) {
        (self.input_size.0 / self.density_stride, self.input_size.1 / self.density_stride)
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.input_size;
        if h % BACKBONE_STRIDE != 0 || w % BACKBONE_STRIDE != 0 {
            return Err(Error::Shape(format!("input {h}x{w} not divisible by backbone stride 16")));
        }
        let (gh, gw) = self.token_grid();
        if gh != gw {
            return Err(Error::Shape(format!("token grid {gh}x{gw} is not square")));
        }
        if gh * gw != self.patch_count {
            return Err(Error::Config(format!(
                "patch_count {} does not match {gh}x{gw} token grid of a {h}x{w} input",
                self.patch_count
            )));
        }
        if self.density_stride == 0 || h % self.density_stride != 0 || w % self.density_stride != 0 {
            return Err(Error::Shape(format!("input {h}x{w} not divisible by density stride {}", self.density_stride)));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Config("embed_dim must be divisible by heads".into()));
        }
        Ok(())
    }
}

/// Non-negative density grid; its sum is the estimated count.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMap {
    pub height: usize,
    pub width: usize,
    /// Input pixels per cell.
    pub stride: usize,
    pub values: Vec<f64>,
}

impl DensityMap {
    pub fn new(height: usize, width: usize, stride: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Shape(format!("{} values for a {height}x{width} map", values.len())));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::Invalid(format!("density entry {v} is negative or not finite")));
        }
        Ok(Self {
            height,
            width,
            stride,
            values,
        })
    }

    pub fn zeros(height: usize, width: usize, stride: usize) -> Self {
        Self {
            height,
            width,
            stride,
            values: vec![0.0; height * width],
        }
    }

    pub fn from_tensor(t: &Tensor, stride: usize) -> Result<Self> {
        let t = t.detach().to_dtype(DType::F64)?;
        let dims = t.dims().to_vec();
        let (h, w) = match dims.as_slice() {
            [h, w] | [1, h, w] | [1, 1, h, w] => (*h, *w),
            _ => return Err(Error::Shape(format!("expected a single-channel map, got {dims:?}"))),
        };
        Self::new(h, w, stride, t.flatten_all()?.to_vec1()?)
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn to_tensor(&self, dtype: DType, device: &candle_core::Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.values, (1, 1, self.height, self.width), device)?.to_dtype(dtype)?)
    }
}

/// Estimated count: the sum of all density entries.
pub fn predict_count(density: &DensityMap) -> f64 {
    density.values.iter().sum()
}

struct EncoderLayer {
    attn: MultiHeadAttention,
    norm1: LayerNorm,
    ffn: FeedForward,
    norm2: LayerNorm,
}

impl EncoderLayer {
    fn new(pb: &mut ParamBuilder<'_>, dim: usize, heads: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadAttention::new(&mut pb.pp("attn"), dim, heads)?,
            norm1: LayerNorm::new(pb, "norm1", dim)?,
            ffn: FeedForward::new(&mut pb.pp("ffn"), dim, hidden)?,
            norm2: LayerNorm::new(pb, "norm2", dim)?,
        })
    }

    /// Post-norm self-attention block on `(n, d)` tokens.
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = self.norm1.forward(&(x + self.attn.forward(x, x)?)?)?;
        self.norm2.forward(&(&x + self.ffn.forward(&x)?)?)
    }
}

enum BackboneOp {
    Conv(Conv2d),
    Pool,
}

pub struct CountingNet {
    cfg: ExtractorConfig,
    store: ParamStore,
    backbone: Vec<BackboneOp>,
    proj: Linear,
    pos: Tensor,
    encoder: Vec<EncoderLayer>,
    head1: Conv2d,
    head2: Conv2d,
    head_out: Conv2d,
}

impl CountingNet {
    pub fn new(cfg: ExtractorConfig, dtype: DType, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(dtype, seed);
        let mut root = store.root();

        let mut backbone = Vec::new();
        let mut c_prev = 3;
        {
            let mut pb = root.pp("backbone");
            for (i, layer) in cfg.backbone.layers().iter().enumerate() {
                match layer {
                    Some(c) => {
                        backbone.push(BackboneOp::Conv(Conv2d::same3(&mut pb, &format!("conv{i}"), c_prev, *c)?));
                        c_prev = *c;
                    }
                    None => backbone.push(BackboneOp::Pool),
                }
            }
        }
        let d = cfg.embed_dim;
        let proj = Linear::new(&mut root, "proj", c_prev, d)?;
        let pos = root.var("pos_embed", &[cfg.patch_count, d], Init::Const(0.0), d, d)?;
        let encoder = (0..cfg.encoder_layers)
            .map(|l| EncoderLayer::new(&mut root.pp(&format!("encoder{l}")), d, cfg.heads, cfg.ffn_ratio * d))
            .collect::<Result<Vec<_>>>()?;
        let (c1, c2) = cfg.head_channels;
        let mut hp = root.pp("head");
        let head1 = Conv2d::same3(&mut hp, "conv1", d, c1)?;
        let head2 = Conv2d::same3(&mut hp, "conv2", c1, c2)?;
        // starts as a small uniform density so the output rectifier is live
        let head_out = Conv2d::with_init(&mut hp, "out", (c2, 1, 1), 1, 0, Init::Uniform(HEAD_WEIGHT_INIT), Init::Const(HEAD_BIAS_INIT))?;

        Ok(Self {
            cfg,
            store,
            backbone,
            proj,
            pos,
            encoder,
            head1,
            head2,
            head_out,
        })
    }

    pub fn config(&self) -> &ExtractorConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn param_count(&self) -> usize {
        self.store.num_params()
    }

    /// Shared feature extractor: `(1, 3, H, W)` to `(1, D, H/16, W/16)`.
    pub fn extract(&self, image: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = image.dims4()?;
        if b != 1 || c != 3 || (h, w) != self.cfg.input_size {
            return Err(Error::Shape(format!(
                "extractor expects (1, 3, {}, {}), got {:?}",
                self.cfg.input_size.0,
                self.cfg.input_size.1,
                image.dims()
            )));
        }
        let mut x = image.clone();
        for op in &self.backbone {
            x = match op {
                BackboneOp::Conv(conv) => conv.forward(&x)?.relu()?,
                BackboneOp::Pool => x.max_pool2d(2)?,
            };
        }
        let (_, ch, gh, gw) = x.dims4()?;
        let tokens = x.reshape((ch, gh * gw))?.t()?.contiguous()?;
        let mut t = self.proj.forward(&tokens)?.broadcast_add(&self.pos)?;
        for layer in &self.encoder {
            t = layer.forward(&t)?;
        }
        Ok(t.t()?.contiguous()?.reshape((1, self.cfg.embed_dim, gh, gw))?)
    }

    /// Regression head on an already-summed feature map.
    pub fn head(&self, features: &Tensor) -> Result<Tensor> {
        let (h, w) = self.cfg.density_size();
        let x = resize_bilinear(features, h, w)?;
        let x = self.head1.forward(&x)?.relu()?;
        let x = self.head2.forward(&x)?.relu()?;
        Ok(self.head_out.forward(&x)?.relu()?)
    }

    /// Sum the given feature maps and regress a density map `(1, 1, h, w)`.
    pub fn head_on_sum(&self, features: &[Tensor]) -> Result<Tensor> {
        let mut it = features.iter();
        let first = it
            .next()
            .ok_or_else(|| Error::Invalid("no features to sum".into()))?
            .clone();
        let sum = it.try_fold(first, |acc, f| acc + f)?;
        self.head(&sum)
    }

    /// Density map from RGB, optional broker and auxiliary images.
    /// Without a broker only `F_r + F_b` is summed.
    pub fn count_forward(&self, rgb: &Tensor, broker: Option<&Tensor>, aux: &Tensor) -> Result<Tensor> {
        let mut feats = vec![self.extract(rgb)?];
        if let Some(b) = broker {
            feats.push(self.extract(b)?);
        }
        feats.push(self.extract(aux)?);
        self.head_on_sum(&feats)
    }

    pub fn density(&self, rgb: &Tensor, broker: Option<&Tensor>, aux: &Tensor) -> Result<DensityMap> {
        DensityMap::from_tensor(&self.count_forward(rgb, broker, aux)?, self.cfg.density_stride)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn input(seed: u64, n: usize, dt: DType) -> Tensor {
        let v: Vec<f32> = (0..3 * n * n)
            .map(|i| (((i as u64 + 1) * 2654435761 + seed * 97) % 1000) as f32 / 999.0)
            .collect();
        Tensor::from_vec(v, (1, 3, n, n), &Device::Cpu).unwrap().to_dtype(dt).unwrap()
    }

    #[test]
    fn tiny_shapes() {
        let net = CountingNet::new(ExtractorConfig::tiny(), DType::F32, 0).unwrap();
        let f = net.extract(&input(1, 64, DType::F32)).unwrap();
        assert_eq!(f.dims(), &[1, 128, 4, 4]);
        let x = input(1, 64, DType::F32);
        let d = net.count_forward(&x, Some(&x), &x).unwrap();
        assert_eq!(d.dims(), &[1, 1, 8, 8]);
    }

    #[test]
    fn wrong_input_size_rejected() {
        let net = CountingNet::new(ExtractorConfig::tiny(), DType::F32, 0).unwrap();
        assert!(net.extract(&input(1, 32, DType::F32)).is_err());
        let bad = ExtractorConfig {
            patch_count: 17,
            ..ExtractorConfig::tiny()
        };
        assert!(CountingNet::new(bad, DType::F32, 0).is_err());
    }

    #[test]
    fn summation_is_order_free() {
        let net = CountingNet::new(ExtractorConfig::tiny(), DType::F64, 3).unwrap();
        let f: Vec<Tensor> = (0..3).map(|s| net.extract(&input(s, 64, DType::F64)).unwrap()).collect();
        let a = net.head_on_sum(&[f[0].clone(), f[1].clone(), f[2].clone()]).unwrap();
        let b = net.head_on_sum(&[f[2].clone(), f[0].clone(), f[1].clone()]).unwrap();
        let diff: f64 = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar().unwrap();
        assert!(diff < 1e-12);
    }

    #[test]
    fn zero_features_give_bias_response() {
        let net = CountingNet::new(ExtractorConfig::tiny(), DType::F64, 3).unwrap();
        let z = Tensor::zeros((1, 128, 4, 4), DType::F64, &Device::Cpu).unwrap();
        let d = DensityMap::from_tensor(&net.head_on_sum(&[z.clone(), z.clone(), z]).unwrap(), 8).unwrap();
        assert!(d.values.iter().all(|&v| v == HEAD_BIAS_INIT));
    }

    #[test]
    fn predict_count_sums() {
        assert_eq!(predict_count(&DensityMap::zeros(4, 4, 8)), 0.0);
        let m = DensityMap::new(4, 4, 8, vec![0.25; 16]).unwrap();
        assert_eq!(predict_count(&m), 4.0);
        assert!(DensityMap::new(1, 2, 8, vec![0.1, -0.1]).is_err());
    }
}
