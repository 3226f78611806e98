use std::fmt::Write as _;
use std::path::Path;

use broker_core::data::write_image;
use broker_core::{Error, ModalImage, Modality, Result};

/// Fixed-range histogram over `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub label: String,
    pub counts: Vec<usize>,
    pub mean: f64,
}

impl Histogram {
    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    pub fn edges(&self) -> Vec<f64> {
        let n = self.bins() as f64;
        (0..=self.bins()).map(|i| i as f64 / n).collect()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

/// Bin `values` (clamped to `[0, 1]`); `1.0` falls in the last bin.
pub fn histogram(label: &str, values: &[f64], bins: usize) -> Histogram {
    let bins = bins.max(1);
    let mut counts = vec![0; bins];
    for &v in values {
        let b = ((v.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1);
        counts[b] += 1;
    }
    let mean = if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    };
    Histogram {
        label: label.to_string(),
        counts,
        mean,
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `modality,bin,lo,hi,count` rows, plus `modality,mean,n` in `means_path`.
pub fn write_csv(path: &Path, means_path: &Path, hists: &[Histogram]) -> Result<()> {
    let mut s = String::from("modality,bin,lo,hi,count\n");
    for h in hists {
        let e = h.edges();
        for (i, c) in h.counts.iter().enumerate() {
            let _ = writeln!(s, "{},{i},{:.6},{:.6},{c}", h.label, e[i], e[i + 1]);
        }
    }
    write_text(path, &s)?;
    let mut m = String::from("modality,mean,n\n");
    for h in hists {
        let _ = writeln!(m, "{},{:.6},{}", h.label, h.mean, h.total());
    }
    write_text(means_path, &m)
}

const PANEL_H: usize = 64;
const PALETTE: [[f32; 3]; 3] = [[0.85, 0.2, 0.2], [0.2, 0.65, 0.3], [0.25, 0.35, 0.9]];

/// Stacked bar charts, one panel per histogram, on a white background.
pub fn render_histograms(hists: &[Histogram]) -> Result<ModalImage> {
    let bins = hists.iter().map(Histogram::bins).max().unwrap_or(1);
    let bar = (256 / bins).max(2);
    let width = (bins * bar).max(64);
    let height = (PANEL_H * hists.len()).max(32);
    ModalImage::from_fn(height, width, Modality::Rgb, |c, y, x| {
        let panel = y / PANEL_H;
        let Some(h) = hists.get(panel) else { return 1.0 };
        let peak = h.counts.iter().copied().max().unwrap_or(0).max(1) as f64;
        let b = x / bar;
        let row_from_bottom = PANEL_H - 1 - y % PANEL_H;
        let filled = b < h.bins() && (row_from_bottom as f64) < h.counts[b] as f64 / peak * (PANEL_H - 4) as f64;
        if filled {
            PALETTE[panel % PALETTE.len()][c]
        } else if row_from_bottom == 0 {
            0.0
        } else {
            1.0
        }
    })
}

/// Images of equal height placed left to right with a 2 px white gap.
pub fn side_by_side(images: &[&ModalImage]) -> Result<ModalImage> {
    const GAP: usize = 2;
    let h = images.first().map(|i| i.height()).ok_or_else(|| Error::Invalid("nothing to lay out".into()))?;
    if images.iter().any(|i| i.height() != h) {
        return Err(Error::Shape("side-by-side images differ in height".into()));
    }
    let mut offsets = Vec::with_capacity(images.len());
    let mut w = 0;
    for img in images {
        offsets.push(w);
        w += img.width() + GAP;
    }
    let w = w - GAP;
    ModalImage::from_fn(h, w, Modality::Broker, |c, y, x| {
        for (img, &off) in images.iter().zip(&offsets) {
            if x >= off && x < off + img.width() {
                return img.get(c, y, x - off);
            }
        }
        1.0
    })
}

pub fn save(path: &Path, img: &ModalImage) -> Result<()> {
    write_image(path, img)
}
