mod common;

use broker_core::data::{augment, load_dataset, synth_generate, synth_pairs, Split, BLOB_SIGMA};
use broker_core::SynthSpec;

#[test]
fn written_dataset_loads_back_identically() {
    let spec = SynthSpec {
        n_images: 8,
        misalign_px: 3.0,
        seed: 5,
        ..SynthSpec::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let ds = synth_generate(&spec, dir.path()).unwrap();
    for split in [Split::Train, Split::Test] {
        let (pairs, _) = ds.split(split);
        let loaded = load_dataset(dir.path(), split).unwrap();
        assert_eq!(pairs.len(), loaded.len());
        for (a, b) in pairs.iter().zip(&loaded) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.rgb.pixels(), b.rgb.pixels());
            assert_eq!(a.aux.pixels(), b.aux.pixels());
            assert_eq!(a.annotations, b.annotations);
        }
    }
}

/// Peak of a Gaussian of known width from samples at symmetric offsets
/// `x0 - k` and `x0 + k`, using the first `k` where neither sample is clipped.
fn gaussian_peak(x0: usize, sample: impl Fn(isize) -> f64, background: f64) -> f64 {
    let s2 = 2.0 * BLOB_SIGMA * BLOB_SIGMA;
    for k in 1..=4isize {
        let (lo, hi) = (sample(-k), sample(k));
        if lo < 0.99 && hi < 0.99 {
            let (fl, fh) = ((lo - background).ln(), (hi - background).ln());
            return x0 as f64 + s2 * (fh - fl) / (4.0 * k as f64);
        }
    }
    f64::NAN
}

#[test]
fn aligned_aux_peaks_sit_on_annotations() {
    let ds = synth_pairs(&SynthSpec {
        n_images: 6,
        crowd_range: (2, 4),
        misalign_px: 0.0,
        seed: 11,
        ..SynthSpec::default()
    })
    .unwrap();
    for pair in &ds.pairs {
        let aux = &pair.aux;
        let (w, h) = (aux.width() as isize, aux.height() as isize);
        for p in &pair.annotations.points {
            let (x0, y0) = (p[0].round() as usize, p[1].round() as usize);
            let at = |y: isize, x: isize| aux.get(0, y.clamp(0, h - 1) as usize, x.clamp(0, w - 1) as usize) as f64;
            let px = gaussian_peak(x0, |k| at(y0 as isize, x0 as isize + k), 0.08);
            let py = gaussian_peak(y0, |k| at(y0 as isize + k, x0 as isize), 0.08);
            let err = ((px - p[0]).powi(2) + (py - p[1]).powi(2)).sqrt();
            assert!(err < 0.5, "{}: peak ({px:.2}, {py:.2}) vs annotation ({:.2}, {:.2})", pair.id, p[0], p[1]);
        }
    }
}

#[test]
fn augmentation_keeps_modalities_registered() {
    let ds = synth_pairs(&SynthSpec {
        n_images: 4,
        image_size: (80, 96),
        seed: 2,
        ..SynthSpec::default()
    })
    .unwrap();
    let mut r = common::rng(3);
    for pair in &ds.pairs {
        let out = augment(pair, (48, 48), &mut r).unwrap();
        let w = out.window;
        assert_eq!(out.pair.rgb, w.apply(&pair.rgb).unwrap().with_modality(out.pair.rgb.modality()));
        assert_eq!(out.pair.aux, w.apply(&pair.aux).unwrap().with_modality(out.pair.aux.modality()));
        let mut again = common::rng(3);
        let mut replay = common::rng(3);
        let a = augment(pair, (48, 48), &mut again).unwrap().window;
        let b = augment(pair, (48, 48), &mut replay).unwrap().window;
        assert_eq!(a, b);
    }
}
