//! Synthetic paired crowd scenes with a known global aux-to-rgb offset.
//!
//! Persons are isotropic Gaussian blobs (sigma 4 px). The RGB frame shows
//! them with contrast scaled by `illumination` over a textured background;
//! the auxiliary frame shows them as bright blobs on a dark field (thermal)
//! or with inverse-distance shading (depth), translated as a whole by the
//! per-image offset. `fusion_ref` is the ghost-free average of RGB and the
//! un-shifted auxiliary frame.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::io::{write_image, write_json, AnnotationFile};
use super::{Manifest, Modality, ModalImage, ModalPair, PointAnnotationSet, Split};
use crate::error::{Error, Result};
use crate::train::average_fusion;

pub const BLOB_SIGMA: f64 = 4.0;
const MIN_SEPARATION: f64 = 3.0 * BLOB_SIGMA;
const MARGIN: f64 = 2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_images: usize,
    /// `(H, W)`.
    pub image_size: (usize, usize),
    /// Inclusive person-count range.
    pub crowd_range: (usize, usize),
    /// Largest allowed magnitude of the aux translation, in pixels.
    pub misalign_px: f64,
    pub illumination: f64,
    pub seed: u64,
    pub aux_modality: Modality,
    /// Share of ids assigned to the test split.
    pub test_fraction: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_images: 16,
            image_size: (64, 64),
            crowd_range: (3, 8),
            misalign_px: 0.0,
            illumination: 1.0,
            seed: 0,
            aux_modality: Modality::Thermal,
            test_fraction: 0.25,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Invalid(format!("synth spec: {m}")));
        if !(self.misalign_px >= 0.0 && self.misalign_px.is_finite()) {
            return bad("misalign_px must be >= 0");
        }
        if self.crowd_range.0 > self.crowd_range.1 {
            return bad("crowd_range min > max");
        }
        if !(0.0..=1.0).contains(&self.illumination) {
            return bad("illumination must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.test_fraction) {
            return bad("test_fraction must lie in [0, 1]");
        }
        if self.image_size.0 < super::MIN_SIDE || self.image_size.1 < super::MIN_SIDE {
            return bad("image_size below 32x32");
        }
        if !matches!(self.aux_modality, Modality::Thermal | Modality::Depth) {
            return bad("aux_modality must be thermal or depth");
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub pairs: Vec<ModalPair>,
    /// Ghost-free reference fusion, index-aligned with `pairs`.
    pub fusion_refs: Vec<ModalImage>,
    pub manifest: Manifest,
}

impl SynthDataset {
    /// Pairs of one split with their reference fusions, in manifest order.
    pub fn split(&self, split: Split) -> (Vec<ModalPair>, Vec<ModalImage>) {
        self.manifest
            .ids(split)
            .iter()
            .filter_map(|id| self.pairs.iter().position(|p| &p.id == id))
            .map(|i| (self.pairs[i].clone(), self.fusion_refs[i].clone()))
            .unzip()
    }
}

struct Person {
    x: f64,
    y: f64,
    amplitude: f64,
    color: [f64; 3],
    /// Inverse-distance brightness for the depth rendering.
    near: f64,
}

struct Wave {
    amp: f64,
    fx: f64,
    fy: f64,
    phase: f64,
}

#[inline]
fn gauss(dx: f64, dy: f64) -> f64 {
    (-(dx * dx + dy * dy) / (2.0 * BLOB_SIGMA * BLOB_SIGMA)).exp()
}

fn place_people(rng: &mut ChaCha8Rng, k: usize, h: usize, w: usize) -> Vec<Person> {
    let mut out: Vec<Person> = Vec::with_capacity(k);
    for _ in 0..k {
        let mut best = None;
        for _ in 0..200 {
            let x = rng.random_range(MARGIN..=(w as f64 - 1.0 - MARGIN));
            let y = rng.random_range(MARGIN..=(h as f64 - 1.0 - MARGIN));
            let clear = out
                .iter()
                .all(|p| ((p.x - x).powi(2) + (p.y - y).powi(2)).sqrt() >= MIN_SEPARATION);
            best = Some((x, y));
            if clear {
                break;
            }
        }
        let (x, y) = best.expect("at least one candidate");
        let amplitude = rng.random_range(0.6..=1.0);
        let color = [
            rng.random_range(0.0..0.2),
            rng.random_range(0.0..0.2),
            rng.random_range(0.0..0.2),
        ];
        let distance: f64 = rng.random_range(2.0..20.0);
        out.push(Person {
            x,
            y,
            amplitude,
            color,
            near: (2.0 / distance).clamp(0.1, 1.0),
        });
    }
    out
}

fn render_rgb(rng: &mut ChaCha8Rng, people: &[Person], h: usize, w: usize, illumination: f64) -> Result<ModalImage> {
    let base: Vec<f64> = (0..3).map(|_| rng.random_range(0.35..0.65)).collect();
    let waves: Vec<Wave> = (0..3)
        .map(|_| Wave {
            amp: rng.random_range(0.03..0.1),
            fx: rng.random_range(0.05..0.4),
            fy: rng.random_range(0.05..0.4),
            phase: rng.random_range(0.0..2.0 * PI),
        })
        .collect();
    let noise: Vec<f64> = (0..h * w).map(|_| rng.random_range(-0.03..0.03)).collect();
    let dim = 0.2 + 0.8 * illumination;
    ModalImage::from_fn(h, w, Modality::Rgb, |c, y, x| {
        let (xf, yf) = (x as f64, y as f64);
        let tex: f64 = waves.iter().map(|v| v.amp * (v.fx * xf + v.fy * yf + v.phase + c as f64).sin()).sum();
        let mut v = (base[c] + tex + noise[y * w + x]) * dim;
        for p in people {
            let wgt = illumination * p.amplitude * gauss(xf - p.x, yf - p.y);
            v = v * (1.0 - wgt) + p.color[c] * wgt;
        }
        v as f32
    })
}

/// Aux frame with every person displaced by `(dx, dy)`.
fn render_aux(people: &[Person], h: usize, w: usize, modality: Modality, dx: f64, dy: f64) -> Result<ModalImage> {
    ModalImage::from_fn(h, w, modality, |_, y, x| {
        let (xf, yf) = (x as f64 - dx, y as f64 - dy);
        let v = match modality {
            Modality::Depth => {
                let mut v = 0.15 + 0.25 * (yf / h as f64).clamp(0.0, 1.0);
                for p in people {
                    let g = gauss(xf - p.x, yf - p.y);
                    v = v * (1.0 - g) + p.near * g;
                }
                v
            }
            _ => 0.08 + people.iter().map(|p| p.amplitude * gauss(xf - p.x, yf - p.y)).sum::<f64>(),
        };
        v as f32
    })
}

/// Generate the dataset in memory. Images are already 8-bit quantized, so
/// they equal what a later [`super::load_dataset`] of the written files yields.
pub fn synth_pairs(spec: &SynthSpec) -> Result<SynthDataset> {
    spec.validate()?;
    let (h, w) = spec.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let digits = spec.n_images.max(1).to_string().len().max(4);
    let mut pairs = Vec::with_capacity(spec.n_images);
    let mut fusion_refs = Vec::with_capacity(spec.n_images);
    for i in 0..spec.n_images {
        let k = rng.random_range(spec.crowd_range.0..=spec.crowd_range.1);
        let people = place_people(&mut rng, k, h, w);
        let rgb = render_rgb(&mut rng, &people, h, w, spec.illumination)?.quantized();

        // Uniform over the disk of radius misalign_px.
        let radius = spec.misalign_px * rng.random::<f64>().sqrt();
        let angle = rng.random_range(0.0..2.0 * PI);
        let (dx, dy) = (radius * angle.cos(), radius * angle.sin());

        let aux = render_aux(&people, h, w, spec.aux_modality, dx, dy)?.quantized();
        let aux_aligned = render_aux(&people, h, w, spec.aux_modality, 0.0, 0.0)?.quantized();
        let fusion_ref = average_fusion(&rgb, &aux_aligned)?.quantized();

        let ann = PointAnnotationSet::new(people.iter().map(|p| [p.x, p.y]).collect());
        let mut pair = ModalPair::new(format!("{:0digits$}", i), rgb, aux, ann)?;
        pair.misalignment = Some((dx, dy));
        pairs.push(pair);
        fusion_refs.push(fusion_ref);
    }
    let n_test = ((spec.n_images as f64) * spec.test_fraction).round() as usize;
    let n_train = spec.n_images - n_test.min(spec.n_images);
    let ids: Vec<String> = pairs.iter().map(|p| p.id.clone()).collect();
    let manifest = Manifest {
        train: ids[..n_train].to_vec(),
        test: ids[n_train..].to_vec(),
        aux_modality: spec.aux_modality,
    };
    Ok(SynthDataset {
        pairs,
        fusion_refs,
        manifest,
    })
}

/// Generate the dataset and write it under `out` in the standard layout.
pub fn synth_generate(spec: &SynthSpec, out: &Path) -> Result<SynthDataset> {
    let ds = synth_pairs(spec)?;
    for sub in ["rgb", "aux", "ann", "fusion_ref"] {
        let dir = out.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    for (pair, fref) in ds.pairs.iter().zip(&ds.fusion_refs) {
        write_image(&out.join("rgb").join(format!("{}.png", pair.id)), &pair.rgb)?;
        write_image(&out.join("aux").join(format!("{}.png", pair.id)), &pair.aux)?;
        write_image(&out.join("fusion_ref").join(format!("{}.png", pair.id)), fref)?;
        let ann = AnnotationFile {
            points: pair.annotations.points.clone(),
            misalignment: pair.misalignment.map(|(dx, dy)| [dx, dy]),
        };
        write_json(&out.join("ann").join(format!("{}.json", pair.id)), &ann)?;
    }
    write_json(&out.join("manifest.json"), &ds.manifest)?;
    Ok(ds)
}
