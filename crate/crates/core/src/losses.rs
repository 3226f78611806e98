//! Bayesian point-supervision loss and the generator distillation loss.
//!
//! For annotations `z_1..z_M` the posterior of head `i` at density cell `x`
//! is `N(x; z_i, s^2 I) / sum_n N(x; z_n, s^2 I)`, and the counting loss is
//! `sum_i |1 - <p_i, D>|`: each head should receive exactly one unit of
//! predicted mass. Cell `c` of a grid with stride `s` is centred at input
//! pixel `c * s + (s - 1) / 2`.

use candle_core::Tensor;

use crate::counter::DensityMap;
use crate::data::{ModalImage, PointAnnotationSet};
use crate::error::{Error, Result};

/// Default Gaussian width in input pixels.
pub const DEFAULT_SIGMA: f64 = 8.0;

#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorMap {
    pub m: usize,
    pub height: usize,
    pub width: usize,
    pub sigma: f64,
    /// `m x height x width`, row-major per annotation.
    pub probs: Vec<f64>,
}

impl PosteriorMap {
    #[inline]
    pub fn get(&self, i: usize, y: usize, x: usize) -> f64 {
        self.probs[(i * self.height + y) * self.width + x]
    }

    pub fn plane(&self, i: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.probs[i * n..(i + 1) * n]
    }
}

#[inline]
pub fn cell_center(index: usize, stride: usize) -> f64 {
    index as f64 * stride as f64 + (stride as f64 - 1.0) / 2.0
}

pub fn build_posteriors(ann: &PointAnnotationSet, grid: (usize, usize), stride: usize, sigma: f64) -> Result<PosteriorMap> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Invalid(format!("sigma must be positive, got {sigma}")));
    }
    if stride == 0 {
        return Err(Error::Invalid("stride must be positive".into()));
    }
    let (h, w) = grid;
    let m = ann.count();
    let mut probs = vec![0.0; m * h * w];
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut logits = vec![0.0; m];
    for y in 0..h {
        let cy = cell_center(y, stride);
        for x in 0..w {
            let cx = cell_center(x, stride);
            let mut max = f64::NEG_INFINITY;
            for (l, &[px, py]) in logits.iter_mut().zip(&ann.points) {
                *l = -((cx - px).powi(2) + (cy - py).powi(2)) * inv;
                max = max.max(*l);
            }
            let mut total = 0.0;
            for l in logits.iter_mut() {
                *l = (*l - max).exp();
                total += *l;
            }
            for (i, l) in logits.iter().enumerate() {
                probs[(i * h + y) * w + x] = l / total;
            }
        }
    }
    Ok(PosteriorMap {
        m,
        height: h,
        width: w,
        sigma,
        probs,
    })
}

fn check_grid(post: &PosteriorMap, h: usize, w: usize) -> Result<()> {
    if post.height != h || post.width != w {
        return Err(Error::Shape(format!(
            "density map {h}x{w} vs posterior grid {}x{}",
            post.height, post.width
        )));
    }
    Ok(())
}

/// `sum_i |1 - <p_i, D>|`, or the total predicted mass for an empty scene.
pub fn bayesian_loss(density: &DensityMap, post: &PosteriorMap) -> Result<f64> {
    check_grid(post, density.height, density.width)?;
    if post.m == 0 {
        return Ok(density.values.iter().sum());
    }
    Ok((0..post.m)
        .map(|i| {
            let e: f64 = post.plane(i).iter().zip(&density.values).map(|(p, d)| p * d).sum();
            (1.0 - e).abs()
        })
        .sum())
}

/// Differentiable form of [`bayesian_loss`] for a `(1, 1, h, w)` density tensor.
///
/// The absolute value uses the subgradient `sign(r)` with `sign(0) = 0`.
pub fn bayesian_loss_tensor(density: &Tensor, post: &PosteriorMap) -> Result<Tensor> {
    let (_, _, h, w) = density.dims4()?;
    check_grid(post, h, w)?;
    if post.m == 0 {
        return Ok(density.sum_all()?);
    }
    let flat = density.reshape((h * w, 1))?;
    let p = Tensor::from_slice(&post.probs, (post.m, h * w), density.device())?.to_dtype(density.dtype())?;
    let expected = p.matmul(&flat)?.squeeze(1)?;
    let residual = (1.0 - expected)?;
    let sign = residual.detach().sign()?;
    Ok((residual * sign)?.sum_all()?)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistillLoss {
    /// Squared L2 distance summed over all pixels and channels.
    pub sum: f64,
    /// `sum` divided by the number of values.
    pub mean: f64,
}

pub fn distill_loss(student: &ModalImage, teacher: &ModalImage) -> Result<DistillLoss> {
    if student.height() != teacher.height() || student.width() != teacher.width() {
        return Err(Error::Shape(format!(
            "student {}x{} vs teacher {}x{}",
            student.height(),
            student.width(),
            teacher.height(),
            teacher.width()
        )));
    }
    Ok(distill_loss_slices(student.pixels(), teacher.pixels()))
}

pub(crate) fn distill_loss_slices(a: &[f32], b: &[f32]) -> DistillLoss {
    let sum: f64 = a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum();
    DistillLoss {
        sum,
        mean: sum / a.len().max(1) as f64,
    }
}

/// Differentiable summed squared error between two tensors of equal shape.
pub fn distill_loss_tensor(student: &Tensor, teacher: &Tensor) -> Result<Tensor> {
    if student.dims() != teacher.dims() {
        return Err(Error::Shape(format!("student {:?} vs teacher {:?}", student.dims(), teacher.dims())));
    }
    Ok((student - teacher)?.sqr()?.sum_all()?)
}
