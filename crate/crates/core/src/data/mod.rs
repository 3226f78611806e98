//! Paired-modality crowd images, point annotations, dataset IO, augmentation
//! and the synthetic misaligned-pair generator.

mod augment;
mod io;
mod synth;

pub use augment::{augment, Augmented, CropWindow};
pub use io::{load_dataset, load_fusion_ref, read_annotations, read_image, write_image, Manifest, Split};
pub use synth::{synth_generate, synth_pairs, SynthDataset, SynthSpec, BLOB_SIGMA};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest accepted side length for a [`ModalImage`].
pub const MIN_SIDE: usize = 32;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Rgb,
    /// Default auxiliary modality.
    #[default]
    Thermal,
    Depth,
    Broker,
}

/// Three-channel float image in `[0, 1]`, stored channel-major (CHW).
#[derive(Clone, Debug, PartialEq)]
pub struct ModalImage {
    height: usize,
    width: usize,
    data: Vec<f32>,
    modality: Modality,
}

impl ModalImage {
    pub fn new(height: usize, width: usize, data: Vec<f32>, modality: Modality) -> Result<Self> {
        if height < MIN_SIDE || width < MIN_SIDE {
            return Err(Error::Invalid(format!(
                "image {height}x{width} is smaller than {MIN_SIDE}x{MIN_SIDE}"
            )));
        }
        if data.len() != 3 * height * width {
            return Err(Error::Shape(format!(
                "expected {} values for 3x{height}x{width}, got {}",
                3 * height * width,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::Invalid(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            data,
            modality,
        })
    }

    /// Build from a per-pixel function `f(channel, y, x)`; values are clamped to `[0, 1]`.
    pub fn from_fn(height: usize, width: usize, modality: Modality, mut f: impl FnMut(usize, usize, usize) -> f32) -> Result<Self> {
        let mut data = Vec::with_capacity(3 * height * width);
        for c in 0..3 {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x).clamp(0.0, 1.0));
                }
            }
        }
        Self::new(height, width, data, modality)
    }

    pub fn filled(height: usize, width: usize, value: f32, modality: Modality) -> Result<Self> {
        Self::new(height, width, vec![value; 3 * height * width], modality)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn pixels(&self) -> &[f32] {
        &self.data
    }

    pub fn with_modality(mut self, modality: Modality) -> Self {
        self.modality = modality;
        self
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// `(1, 3, H, W)` tensor.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.data, (1, 3, self.height, self.width), device)?;
        Ok(t.to_dtype(dtype)?)
    }

    /// Inverse of [`ModalImage::to_tensor`]; accepts `(3, H, W)` or `(1, 3, H, W)`.
    pub fn from_tensor(t: &Tensor, modality: Modality) -> Result<Self> {
        let t = if t.rank() == 4 { t.squeeze(0)? } else { t.clone() };
        let (c, h, w) = t.dims3()?;
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 channels, got {c}")));
        }
        let data: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        Self::new(h, w, data, modality)
    }

    /// Channel-mean grayscale plane as `f64`, row-major `H x W`.
    pub fn gray(&self) -> Vec<f64> {
        let plane = self.height * self.width;
        (0..plane)
            .map(|i| (self.data[i] as f64 + self.data[plane + i] as f64 + self.data[2 * plane + i] as f64) / 3.0)
            .collect()
    }

    /// Mean over all pixels and channels.
    pub fn mean_intensity(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    /// Round every value to the nearest 8-bit level, as PNG storage does.
    pub fn quantized(&self) -> Self {
        let data = self.data.iter().map(|&v| quantize(v)).collect();
        Self { data, ..self.clone() }
    }

    /// Interleaved RGB8 bytes.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let plane = self.height * self.width;
        let mut out = Vec::with_capacity(3 * plane);
        for i in 0..plane {
            for c in 0..3 {
                out.push((self.data[c * plane + i] * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
        out
    }

    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8], modality: Modality) -> Result<Self> {
        if bytes.len() != 3 * height * width {
            return Err(Error::Shape(format!("expected {} bytes, got {}", 3 * height * width, bytes.len())));
        }
        let plane = height * width;
        let mut data = vec![0.0f32; 3 * plane];
        for i in 0..plane {
            for c in 0..3 {
                data[c * plane + i] = bytes[3 * i + c] as f32 / 255.0;
            }
        }
        Self::new(height, width, data, modality)
    }
}

#[inline]
fn quantize(v: f32) -> f32 {
    (v * 255.0).round().clamp(0.0, 255.0) / 255.0
}

/// Head positions `(x, y)` in input-pixel coordinates; pixel `j` has its centre at `x = j`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PointAnnotationSet {
    pub points: Vec<[f64; 2]>,
}

impl PointAnnotationSet {
    pub fn new(points: Vec<[f64; 2]>) -> Self {
        Self { points }
    }

    pub fn count(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Every point inside `[0, width) x [0, height)`.
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        for &[x, y] in &self.points {
            if !(x.is_finite() && y.is_finite() && x >= 0.0 && y >= 0.0 && x < width as f64 && y < height as f64) {
                return Err(Error::Invalid(format!(
                    "annotation ({x}, {y}) outside {width}x{height} image"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModalPair {
    pub id: String,
    pub rgb: ModalImage,
    pub aux: ModalImage,
    pub annotations: PointAnnotationSet,
    /// Known global aux-to-rgb offset `(dx, dy)`; synthetic data only.
    pub misalignment: Option<(f64, f64)>,
}

impl ModalPair {
    pub fn new(id: impl Into<String>, rgb: ModalImage, aux: ModalImage, annotations: PointAnnotationSet) -> Result<Self> {
        let id = id.into();
        if rgb.height() != aux.height() || rgb.width() != aux.width() {
            return Err(Error::SizeMismatch {
                id,
                detail: format!(
                    "rgb is {}x{}, aux is {}x{}",
                    rgb.height(),
                    rgb.width(),
                    aux.height(),
                    aux.width()
                ),
            });
        }
        if !matches!(aux.modality(), Modality::Thermal | Modality::Depth) {
            return Err(Error::Invalid(format!("aux modality of `{id}` must be thermal or depth")));
        }
        annotations.validate(rgb.height(), rgb.width())?;
        Ok(Self {
            id,
            rgb,
            aux,
            annotations,
            misalignment: None,
        })
    }

    pub fn height(&self) -> usize {
        self.rgb.height()
    }

    pub fn width(&self) -> usize {
        self.rgb.width()
    }
}
