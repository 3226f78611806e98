mod common;

use broker_core::bmg::Bmg;
use broker_core::counter::{CountingNet, DensityMap, ExtractorConfig};
use broker_core::data::CropWindow;
use broker_core::losses::build_posteriors;
use broker_core::metrics::{game, psnr, ssim};
use broker_core::{ModalImage, Modality, PointAnnotationSet};
use candle_core::{DType, Device};
use proptest::prelude::*;

fn image(h: usize, w: usize, vals: &[f32], modality: Modality) -> ModalImage {
    ModalImage::from_fn(h, w, modality, |c, y, x| vals[(c * 7 + y * 13 + x * 29) % vals.len()]).unwrap()
}

fn points(max_h: f64, max_w: f64) -> impl Strategy<Value = PointAnnotationSet> {
    prop::collection::vec((0.0..1.0f64, 0.0..1.0f64), 1..10)
        .prop_map(move |v| PointAnnotationSet::new(v.into_iter().map(|(x, y)| [x * max_w, y * max_h]).collect()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn posteriors_partition_unity(ann in points(48.0, 40.0), sigma in 0.5..20.0f64) {
        let post = build_posteriors(&ann, (6, 5), 8, sigma).unwrap();
        for y in 0..6 {
            for x in 0..5 {
                let s: f64 = (0..post.m).map(|i| post.get(i, y, x)).sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn game_never_decreases_with_level(
        vals in prop::collection::vec(0.0..1.0f64, 64),
        ann in points(64.0, 64.0),
    ) {
        let dm = DensityMap::new(8, 8, 8, vals).unwrap();
        let g: Vec<f64> = (0..=3).map(|l| game(&dm, &ann, l).unwrap()).collect();
        for l in 0..3 {
            prop_assert!(g[l + 1] >= g[l] - 1e-12);
        }
    }

    #[test]
    fn image_metrics_are_symmetric(
        a in prop::collection::vec(0.0..1.0f32, 11),
        b in prop::collection::vec(0.0..1.0f32, 13),
    ) {
        let x = image(32, 36, &a, Modality::Rgb);
        let y = image(32, 36, &b, Modality::Rgb);
        prop_assert_eq!(psnr(&x, &y).unwrap().to_bits(), psnr(&y, &x).unwrap().to_bits());
        prop_assert_eq!(ssim(&x, &y).unwrap().to_bits(), ssim(&y, &x).unwrap().to_bits());
        prop_assert_eq!(ssim(&x, &x).unwrap(), 1.0);
    }

    #[test]
    fn crop_window_is_shared_and_inside(seed in any::<u64>(), h in 32usize..80, w in 32usize..80) {
        let crop = (32, 32);
        let a = CropWindow::sample(h, w, crop, &mut common::rng(seed)).unwrap();
        let b = CropWindow::sample(h, w, crop, &mut common::rng(seed)).unwrap();
        prop_assert_eq!(a, b);
        prop_assert!(a.top + a.height <= h && a.left + a.width <= w);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn generator_output_keeps_shape_and_range(
        a in prop::collection::vec(0.0..1.0f32, 5),
        b in prop::collection::vec(0.0..1.0f32, 7),
        seed in 0u64..1000,
    ) {
        let bmg = Bmg::new(common::grad::small_config(), DType::F32, seed).unwrap();
        let rgb = image(32, 32, &a, Modality::Rgb);
        let aux = image(32, 32, &b, Modality::Thermal);
        let out = bmg.fuse(&rgb, &aux).unwrap();
        prop_assert_eq!((out.height(), out.width()), (32, 32));
        prop_assert!(out.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn densities_are_non_negative(
        a in prop::collection::vec(0.0..1.0f32, 5),
        b in prop::collection::vec(0.0..1.0f32, 7),
        seed in 0u64..1000,
    ) {
        let cfg = ExtractorConfig::tiny();
        let net = CountingNet::new(cfg.clone(), DType::F32, seed).unwrap();
        let (h, w) = cfg.input_size;
        let dev = Device::Cpu;
        let rgb = image(h, w, &a, Modality::Rgb).to_tensor(DType::F32, &dev).unwrap();
        let aux = image(h, w, &b, Modality::Thermal).to_tensor(DType::F32, &dev).unwrap();
        let d = net.density(&rgb, Some(&aux), &rgb).unwrap();
        prop_assert!(d.values.iter().all(|&v| v >= 0.0));
    }
}
