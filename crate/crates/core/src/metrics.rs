//! Counting metrics (GAME, RMSE), image-quality metrics (PSNR, SSIM) and
//! generator profiling.

use std::collections::BTreeMap;
use std::time::Instant;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::bmg::Bmg;
use crate::counter::DensityMap;
use crate::data::{ModalImage, PointAnnotationSet};
use crate::error::{Error, Result};

pub const MAX_GAME_LEVEL: u32 = 3;
pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Split `0..n` into `2^level` consecutive ranges by repeated halving; the
/// second half of every split takes the odd element. Levels nest, so a
/// finer level always refines a coarser one.
pub fn region_bounds(n: usize, level: u32) -> Vec<(usize, usize)> {
    let mut ranges = vec![(0, n)];
    for _ in 0..level {
        ranges = ranges
            .into_iter()
            .flat_map(|(lo, hi)| {
                let mid = lo + (hi - lo) / 2;
                [(lo, mid), (mid, hi)]
            })
            .collect();
    }
    ranges
}

/// Ground-truth point counts binned onto the density grid.
pub fn count_grid(ann: &PointAnnotationSet, height: usize, width: usize, stride: usize) -> Vec<f64> {
    let mut grid = vec![0.0; height * width];
    if height == 0 || width == 0 {
        return grid;
    }
    let s = stride.max(1) as f64;
    for &[x, y] in &ann.points {
        let cx = ((x / s).floor().max(0.0) as usize).min(width - 1);
        let cy = ((y / s).floor().max(0.0) as usize).min(height - 1);
        grid[cy * width + cx] += 1.0;
    }
    grid
}

/// GAME on two aligned grids (predicted mass, ground-truth counts).
pub fn game_grids(pred: &[f64], gt: &[f64], height: usize, width: usize, level: u32) -> Result<f64> {
    if level > MAX_GAME_LEVEL {
        return Err(Error::Invalid(format!("GAME level {level} outside 0..=3")));
    }
    if pred.len() != height * width || gt.len() != height * width {
        return Err(Error::Shape("GAME grids disagree in size".into()));
    }
    let rows = region_bounds(height, level);
    let cols = region_bounds(width, level);
    let mut total = 0.0;
    for &(r0, r1) in &rows {
        for &(c0, c1) in &cols {
            let mut diff = 0.0;
            for y in r0..r1 {
                for x in c0..c1 {
                    diff += pred[y * width + x] - gt[y * width + x];
                }
            }
            total += diff.abs();
        }
    }
    Ok(total)
}

/// Grid average mean absolute error of one image at `level` (`4^level` regions).
pub fn game(pred: &DensityMap, ann: &PointAnnotationSet, level: u32) -> Result<f64> {
    let gt = count_grid(ann, pred.height, pred.width, pred.stride);
    game_grids(&pred.values, &gt, pred.height, pred.width, level)
}

/// Dataset-level GAME: the per-image mean.
pub fn game_dataset(preds: &[DensityMap], anns: &[PointAnnotationSet], level: u32) -> Result<f64> {
    if preds.len() != anns.len() || preds.is_empty() {
        return Err(Error::Invalid("GAME needs equally many, and at least one, predictions and annotations".into()));
    }
    let mut sum = 0.0;
    for (p, a) in preds.iter().zip(anns) {
        sum += game(p, a, level)?;
    }
    Ok(sum / preds.len() as f64)
}

pub fn rmse(pred_counts: &[f64], gt_counts: &[usize]) -> Result<f64> {
    if pred_counts.is_empty() || pred_counts.len() != gt_counts.len() {
        return Err(Error::Invalid("rmse needs two non-empty lists of equal length".into()));
    }
    let mse = pred_counts
        .iter()
        .zip(gt_counts)
        .map(|(p, g)| (p - *g as f64).powi(2))
        .sum::<f64>()
        / pred_counts.len() as f64;
    Ok(mse.sqrt())
}

/// PSNR in dB with peak value 1. Identical images give `f64::INFINITY`.
pub fn psnr(a: &ModalImage, b: &ModalImage) -> Result<f64> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::Shape("psnr: images differ in size".into()));
    }
    let mse = a
        .pixels()
        .iter()
        .zip(b.pixels())
        .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
        .sum::<f64>()
        / a.pixels().len() as f64;
    Ok(psnr_from_mse(mse))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

/// Mean of the finite values, plus how many infinite values were skipped.
pub fn sentinel_mean(values: &[f64]) -> (Option<f64>, usize) {
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    let skipped = values.len() - finite.len();
    if finite.is_empty() {
        (None, skipped)
    } else {
        (Some(finite.iter().sum::<f64>() / finite.len() as f64), skipped)
    }
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering of a row-major plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = k.iter().enumerate().map(|(i, kv)| kv * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = k.iter().enumerate().map(|(i, kv)| kv * tmp[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// SSIM of two grayscale planes (dynamic range 1, 11x11 Gaussian window,
/// sigma 1.5), averaged over all fully contained windows.
pub fn ssim_planes(a: &[f64], b: &[f64], height: usize, width: usize) -> Result<f64> {
    if a.len() != height * width || b.len() != height * width {
        return Err(Error::Shape("ssim: plane size mismatch".into()));
    }
    if height < SSIM_WINDOW || width < SSIM_WINDOW {
        return Err(Error::Invalid(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {height}x{width}"
        )));
    }
    let k = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let mu_a = filter_valid(a, height, width, &k);
    let mu_b = filter_valid(b, height, width, &k);
    let e_aa = filter_valid(&aa, height, width, &k);
    let e_bb = filter_valid(&bb, height, width, &k);
    let e_ab = filter_valid(&ab, height, width, &k);
    let n = mu_a.len();
    let mut sum = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(sum / n as f64)
}

/// SSIM on channel-mean grayscale.
pub fn ssim(a: &ModalImage, b: &ModalImage) -> Result<f64> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::Shape("ssim: images differ in size".into()));
    }
    ssim_planes(&a.gray(), &b.gray(), a.height(), a.width())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BmgProfile {
    pub param_count: usize,
    pub latency_ms: f64,
}

/// Exact parameter count and the median wall time of 20 single-pair
/// forwards after 3 warm-up runs.
pub fn profile_bmg(bmg: &Bmg) -> Result<BmgProfile> {
    let (h, w) = bmg.config().input_size;
    let dev = bmg.store().device().clone();
    let rgb = Tensor::rand(0f32, 1f32, (1, 3, h, w), &dev)?.to_dtype(bmg.dtype())?;
    let aux = Tensor::rand(0f32, 1f32, (1, 3, h, w), &dev)?.to_dtype(bmg.dtype())?;
    for _ in 0..3 {
        bmg.forward(&rgb, &aux)?;
    }
    let mut times: Vec<f64> = (0..20)
        .map(|_| {
            let t = Instant::now();
            bmg.forward(&rgb, &aux).map(|_| t.elapsed().as_secs_f64() * 1e3)
        })
        .collect::<Result<_>>()?;
    times.sort_by(f64::total_cmp);
    Ok(BmgProfile {
        param_count: bmg.param_count(),
        latency_ms: 0.5 * (times[9] + times[10]),
    })
}

/// Serde adapter for PSNR-like values: finite numbers stay numbers,
/// `+inf` is written as the string `"inf"`.
pub mod inf_as_string {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            Err(serde::ser::Error::custom(format!("cannot encode {v}")))
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) => Err(de::Error::custom(format!("expected a number or \"inf\", got {t:?}"))),
        }
    }
}

/// Evaluation summary written by `eval`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    /// GAME per level `0..=3`.
    pub game: BTreeMap<u32, f64>,
    pub rmse: f64,
    pub n_images: usize,
    /// Mean of the finite broker-vs-reference PSNR values, in dB.
    pub psnr_mean: Option<f64>,
    /// Number of images whose PSNR was infinite (identical images).
    #[serde(default)]
    pub psnr_infinite: usize,
    pub ssim_mean: Option<f64>,
    pub bmg_params: usize,
    pub bmg_latency_ms: f64,
}

impl EvalReport {
    /// Levels are present for 0..=3 and non-decreasing.
    pub fn check_invariants(&self) -> Result<()> {
        let vals: Vec<f64> = (0..=MAX_GAME_LEVEL)
            .map(|l| {
                self.game
                    .get(&l)
                    .copied()
                    .ok_or_else(|| Error::Invalid(format!("report lacks GAME({l})")))
            })
            .collect::<Result<_>>()?;
        // exact monotonicity holds in real arithmetic; allow rounding noise
        if vals.windows(2).any(|p| p[1] < p[0] - 1e-9 * p[0].abs().max(1.0)) {
            return Err(Error::Invalid(format!("GAME levels not monotone: {vals:?}")));
        }
        Ok(())
    }
}
