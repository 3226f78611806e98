//! Broker modal generator.
//!
//! Three parts share one parameter store:
//!
//! * **CMC** (`cmc_encode`): per-modality 3x3 stems `xi_r`, `xi_t`, channel
//!   concatenation, then a strided U-Net encoder down to `d` channels at
//!   `1 / 2^stages` resolution.
//! * **CMA** (`cma_enhance`): both images are patch-embedded by one shared
//!   convolution `xi` (kernel = stride = patch size). Thermal tokens are the
//!   queries and the residual; RGB tokens supply keys and values. A
//!   feed-forward block with its own residual follows. The token grid is
//!   resized bilinearly to the encoder resolution.
//! * **MFD** (`forward`): `decode(F_e + F_h)` through skip connections back to
//!   full resolution, bounded to `[0, 1]` by a logistic output.

use std::sync::atomic::{AtomicUsize, Ordering};

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::attention::{FeedForward, MultiHeadAttention};
use crate::data::{Modality, ModalImage};
use crate::error::{Error, Result};
use crate::nn::{resize_bilinear, sigmoid, Conv2d, Init, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BmgConfig {
    /// Bottleneck width `d`, shared by the encoder output and the CMA tokens.
    pub bottleneck_channels: usize,
    /// Side of the square CMA patch grid; `grid^2` tokens per modality.
    pub cma_patch_grid: usize,
    pub cma_heads: usize,
    pub cma_layers: usize,
    pub encoder_stages: usize,
    pub base_channels: usize,
    /// Hidden width of the CMA feed-forward block, as a multiple of `d`.
    pub ffn_ratio: usize,
    /// `(H, W)` the generator is built for; fixes the CMA patch size.
    pub input_size: (usize, usize),
    /// When false the CMA branch is absent and `F_h = 0`.
    pub use_cma: bool,
}

impl Default for BmgConfig {
    fn default() -> Self {
        Self {
            bottleneck_channels: 256,
            cma_patch_grid: 8,
            cma_heads: 4,
            cma_layers: 1,
            encoder_stages: 3,
            base_channels: 64,
            ffn_ratio: 4,
            input_size: (224, 224),
            use_cma: true,
        }
    }
}

impl BmgConfig {
    /// Test-scale generator for 64x64 inputs.
    pub fn tiny() -> Self {
        Self {
            bottleneck_channels: 64,
            cma_patch_grid: 4,
            cma_heads: 4,
            base_channels: 16,
            input_size: (64, 64),
            ..Self::default()
        }
    }

    pub fn patch_count(&self) -> usize {
        self.cma_patch_grid * self.cma_patch_grid
    }

    pub fn patch_size(&self) -> (usize, usize) {
        (self.input_size.0 / self.cma_patch_grid, self.input_size.1 / self.cma_patch_grid)
    }

    /// Spatial size of `F_e`.
    pub fn bottleneck_size(&self) -> (usize, usize) {
        let f = 1 << self.encoder_stages;
        (self.input_size.0 / f, self.input_size.1 / f)
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.input_size;
        if self.encoder_stages == 0 || self.encoder_stages > 6 {
            return Err(Error::Config("encoder_stages must be in 1..=6".into()));
        }
        let f = 1 << self.encoder_stages;
        if h % f != 0 || w % f != 0 {
            return Err(Error::Shape(format!(
                "input {h}x{w} not divisible by downsampling factor {f}"
            )));
        }
        if self.cma_patch_grid == 0 || h % self.cma_patch_grid != 0 || w % self.cma_patch_grid != 0 {
            return Err(Error::Shape(format!(
                "input {h}x{w} not divisible by CMA patch grid {}",
                self.cma_patch_grid
            )));
        }
        if self.cma_heads == 0 || self.bottleneck_channels % self.cma_heads != 0 {
            return Err(Error::Config("bottleneck_channels must be divisible by cma_heads".into()));
        }
        if self.base_channels < 4 || self.cma_layers == 0 || self.ffn_ratio == 0 {
            return Err(Error::Config("base_channels >= 4, cma_layers >= 1, ffn_ratio >= 1".into()));
        }
        Ok(())
    }

    fn stage_channels(&self, i: usize) -> usize {
        if i + 1 == self.encoder_stages {
            self.bottleneck_channels
        } else {
            self.base_channels << i
        }
    }
}

struct EncoderStage {
    down: Conv2d,
    convs: Vec<Conv2d>,
}

struct DecoderStage {
    fuse: Conv2d,
}

struct CmaLayer {
    attn: MultiHeadAttention,
    ffn: FeedForward,
}

struct Cma {
    patch_weight: Tensor,
    patch_bias: Tensor,
    layers: Vec<CmaLayer>,
}

pub struct Bmg {
    cfg: BmgConfig,
    store: ParamStore,
    xi_r: Conv2d,
    xi_t: Conv2d,
    encoder: Vec<EncoderStage>,
    cma: Option<Cma>,
    decoder: Vec<DecoderStage>,
    out_mid: Conv2d,
    out: Conv2d,
    forward_calls: AtomicUsize,
}

/// Encoder activations kept for the skip connections.
pub struct Encoded {
    /// `[xi_r(R); xi_t(T)]` at full resolution.
    pub stem: Tensor,
    /// Output of every encoder stage; the last one is `F_e`.
    pub stages: Vec<Tensor>,
}

impl Encoded {
    pub fn bottleneck(&self) -> &Tensor {
        self.stages.last().expect("at least one stage")
    }
}

impl Bmg {
    pub fn new(cfg: BmgConfig, dtype: DType, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(dtype, seed);
        let mut root = store.root();

        let xi_r = Conv2d::same3(&mut root, "xi_r", 3, 3)?;
        let xi_t = Conv2d::same3(&mut root, "xi_t", 3, 3)?;

        let mut encoder = Vec::new();
        let mut c_prev = 6;
        for i in 0..cfg.encoder_stages {
            let c = cfg.stage_channels(i);
            let mut pb = root.pp(&format!("enc{i}"));
            let down = Conv2d::new(&mut pb, "down", c_prev, c, 3, 2, 1)?;
            let convs = (0..i.min(2))
                .map(|j| Conv2d::same3(&mut pb, &format!("conv{j}"), c, c))
                .collect::<Result<Vec<_>>>()?;
            encoder.push(EncoderStage { down, convs });
            c_prev = c;
        }

        let cma = if cfg.use_cma {
            let d = cfg.bottleneck_channels;
            let (ph, pw) = cfg.patch_size();
            let mut pb = root.pp("cma");
            let fan_in = 3 * ph * pw;
            let patch_weight = pb.var("patch.weight", &[d, 3, ph, pw], Init::FanIn, fan_in, d)?;
            let patch_bias = pb.var("patch.bias", &[d], Init::Const(0.0), fan_in, d)?;
            let layers = (0..cfg.cma_layers)
                .map(|l| {
                    let mut lp = pb.pp(&format!("layer{l}"));
                    let attn = MultiHeadAttention::new(&mut lp.pp("attn"), d, cfg.cma_heads)?;
                    let ffn = FeedForward::new(&mut lp.pp("ffn"), d, cfg.ffn_ratio * d)?;
                    Ok(CmaLayer { attn, ffn })
                })
                .collect::<Result<Vec<_>>>()?;
            Some(Cma {
                patch_weight,
                patch_bias,
                layers,
            })
        } else {
            None
        };

        let mut decoder = Vec::new();
        let mut c_in = cfg.bottleneck_channels;
        for i in (0..cfg.encoder_stages - 1).rev() {
            let c = cfg.stage_channels(i);
            // the full-resolution side runs narrower to keep CPU latency down
            let c_out = if i == 0 { (c / 2).max(4) } else { c };
            let mut pb = root.pp(&format!("dec{i}"));
            let fuse = Conv2d::same3(&mut pb, "fuse", c_in + c, c_out)?;
            decoder.push(DecoderStage { fuse });
            c_in = c_out;
        }
        let mid = (cfg.base_channels / 4).max(4);
        let mut pb = root.pp("head");
        let out_mid = Conv2d::same3(&mut pb, "mid", c_in + 6, mid)?;
        let out = Conv2d::same3(&mut pb, "out", mid, 3)?;

        Ok(Self {
            cfg,
            store,
            xi_r,
            xi_t,
            encoder,
            cma,
            decoder,
            out_mid,
            out,
            forward_calls: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &BmgConfig {
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

    /// Number of completed [`Bmg::forward`] calls since construction.
    pub fn forward_calls(&self) -> usize {
        self.forward_calls.load(Ordering::Relaxed)
    }

    fn check_inputs(&self, rgb: &Tensor, aux: &Tensor) -> Result<()> {
        let (b, c, h, w) = rgb.dims4()?;
        if rgb.dims() != aux.dims() {
            return Err(Error::Shape(format!("rgb {:?} vs aux {:?}", rgb.dims(), aux.dims())));
        }
        if b != 1 || c != 3 {
            return Err(Error::Shape(format!("expected (1, 3, H, W), got {:?}", rgb.dims())));
        }
        if (h, w) != self.cfg.input_size {
            return Err(Error::Shape(format!(
                "generator built for {:?}, got {h}x{w}",
                self.cfg.input_size
            )));
        }
        Ok(())
    }

    pub fn encode(&self, rgb: &Tensor, aux: &Tensor) -> Result<Encoded> {
        self.check_inputs(rgb, aux)?;
        let stem = Tensor::cat(&[self.xi_r.forward(rgb)?, self.xi_t.forward(aux)?], 1)?;
        let mut x = stem.clone();
        let mut stages = Vec::with_capacity(self.encoder.len());
        for st in &self.encoder {
            x = st.down.forward(&x)?.relu()?;
            for conv in &st.convs {
                x = conv.forward(&x)?.relu()?;
            }
            stages.push(x.clone());
        }
        Ok(Encoded { stem, stages })
    }

    /// `F_e`, shape `(1, d, H / 2^stages, W / 2^stages)`.
    pub fn cmc_encode(&self, rgb: &Tensor, aux: &Tensor) -> Result<Tensor> {
        Ok(self.encode(rgb, aux)?.bottleneck().clone())
    }

    fn patch_embed(&self, cma: &Cma, x: &Tensor) -> Result<Tensor> {
        let g = self.cfg.cma_patch_grid;
        let (ph, pw) = self.cfg.patch_size();
        let d = self.cfg.bottleneck_channels;
        let patches = x
            .reshape(&[3, g, ph, g, pw][..])?
            .permute(vec![1, 3, 0, 2, 4])?
            .contiguous()?
            .reshape((g * g, 3 * ph * pw))?;
        let w = cma.patch_weight.reshape((d, 3 * ph * pw))?;
        Ok(patches.matmul(&w.t()?)?.broadcast_add(&cma.patch_bias)?)
    }

    /// CMA output on the token grid, `(grid^2, d)`, tokens in row-major grid order.
    pub fn cma_tokens(&self, rgb: &Tensor, aux: &Tensor) -> Result<Tensor> {
        self.check_inputs(rgb, aux)?;
        let cma = self
            .cma
            .as_ref()
            .ok_or_else(|| Error::Config("generator was built without CMA".into()))?;
        let x_r = self.patch_embed(cma, rgb)?;
        let x_t = self.patch_embed(cma, aux)?;
        let mut query = x_t;
        for layer in &cma.layers {
            let h = (layer.attn.forward(&query, &x_r)? + &query)?;
            query = (layer.ffn.forward(&h)? + h)?;
        }
        Ok(query)
    }

    /// `F_h` resized to the bottleneck grid, shape `(1, d, h, w)`; zeros when CMA is disabled.
    pub fn cma_enhance(&self, rgb: &Tensor, aux: &Tensor) -> Result<Tensor> {
        let d = self.cfg.bottleneck_channels;
        let (h, w) = self.cfg.bottleneck_size();
        if self.cma.is_none() {
            self.check_inputs(rgb, aux)?;
            return Ok(Tensor::zeros((1, d, h, w), self.dtype(), rgb.device())?);
        }
        let g = self.cfg.cma_patch_grid;
        let tokens = self.cma_tokens(rgb, aux)?;
        let grid = tokens.t()?.contiguous()?.reshape((1, d, g, g))?;
        resize_bilinear(&grid, h, w)
    }

    /// Broker image `(1, 3, H, W)` with values in `[0, 1]`.
    pub fn forward(&self, rgb: &Tensor, aux: &Tensor) -> Result<Tensor> {
        let enc = self.encode(rgb, aux)?;
        let mut x = enc.bottleneck().clone();
        if self.cma.is_some() {
            x = (x + self.cma_enhance(rgb, aux)?)?;
        }
        let n = enc.stages.len();
        for (k, st) in self.decoder.iter().enumerate() {
            let skip = &enc.stages[n - 2 - k];
            let (_, _, sh, sw) = skip.dims4()?;
            let up = resize_bilinear(&x, sh, sw)?;
            x = st.fuse.forward(&Tensor::cat(&[up, skip.clone()], 1)?)?.relu()?;
        }
        let (h, w) = self.cfg.input_size;
        let up = resize_bilinear(&x, h, w)?;
        let x = self.out_mid.forward(&Tensor::cat(&[up, enc.stem], 1)?)?.relu()?;
        let y = sigmoid(&self.out.forward(&x)?)?;
        self.forward_calls.fetch_add(1, Ordering::Relaxed);
        Ok(y)
    }

    /// Convenience wrapper on images; no gradient tracking is needed by callers.
    pub fn fuse(&self, rgb: &ModalImage, aux: &ModalImage) -> Result<ModalImage> {
        let dev = self.store.device();
        let y = self.forward(&rgb.to_tensor(self.dtype(), dev)?, &aux.to_tensor(self.dtype(), dev)?)?;
        ModalImage::from_tensor(&y.detach(), Modality::Broker)
    }
}
