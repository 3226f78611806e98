use rand::Rng;

use super::{ModalImage, ModalPair, PointAnnotationSet};
use crate::error::{Error, Result};

/// One sampled crop-and-flip transform. Applying the same window to every
/// modality keeps them registered with each other and with the annotations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropWindow {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
    pub flip: bool,
}

impl CropWindow {
    pub fn sample<R: Rng + ?Sized>(img_h: usize, img_w: usize, crop: (usize, usize), rng: &mut R) -> Result<Self> {
        let (height, width) = crop;
        if height > img_h || width > img_w {
            return Err(Error::Invalid(format!(
                "crop {height}x{width} larger than image {img_h}x{img_w}"
            )));
        }
        let top = rng.random_range(0..=img_h - height);
        let left = rng.random_range(0..=img_w - width);
        let flip = rng.random_bool(0.5);
        Ok(Self {
            top,
            left,
            height,
            width,
            flip,
        })
    }

    pub fn apply(&self, img: &ModalImage) -> Result<ModalImage> {
        if self.top + self.height > img.height() || self.left + self.width > img.width() {
            return Err(Error::Invalid("crop window exceeds image".into()));
        }
        ModalImage::from_fn(self.height, self.width, img.modality(), |c, y, x| {
            let sx = if self.flip { self.width - 1 - x } else { x };
            img.get(c, self.top + y, self.left + sx)
        })
    }

    /// Shift (and mirror) the points into the window; points whose centre
    /// falls outside the window are dropped.
    pub fn apply_points(&self, ann: &PointAnnotationSet) -> PointAnnotationSet {
        let (h, w) = (self.height as f64, self.width as f64);
        let points = ann
            .points
            .iter()
            .filter_map(|&[x, y]| {
                let (x, y) = (x - self.left as f64, y - self.top as f64);
                if !(x >= 0.0 && x < w && y >= 0.0 && y < h) {
                    return None;
                }
                let x = if self.flip { (w - 1.0 - x).max(0.0) } else { x };
                Some([x, y])
            })
            .collect();
        PointAnnotationSet::new(points)
    }
}

#[derive(Clone, Debug)]
pub struct Augmented {
    pub pair: ModalPair,
    pub window: CropWindow,
}

/// Random crop of size `crop` plus random horizontal flip, shared by both
/// modalities. The returned window can be re-applied to further images of
/// the same scene (e.g. a broker image).
pub fn augment<R: Rng + ?Sized>(pair: &ModalPair, crop: (usize, usize), rng: &mut R) -> Result<Augmented> {
    let window = CropWindow::sample(pair.height(), pair.width(), crop, rng)?;
    let mut out = ModalPair::new(
        pair.id.clone(),
        window.apply(&pair.rgb)?,
        window.apply(&pair.aux)?,
        window.apply_points(&pair.annotations),
    )?;
    out.misalignment = pair.misalignment.map(|(dx, dy)| if window.flip { (-dx, dy) } else { (dx, dy) });
    Ok(Augmented { pair: out, window })
}
