//! Measurements shared by the integration suites and the acceptance gate.

use std::fs;
use std::path::Path;

use broker_core::attention::MultiHeadAttention;
use broker_core::bmg::{Bmg, BmgConfig};
use broker_core::checkpoint::Checkpoint;
use broker_core::counter::{CountingNet, DensityMap, ExtractorConfig};
use broker_core::data::{synth_generate, synth_pairs};
use broker_core::losses::build_posteriors;
use broker_core::metrics::{game, game_dataset, rmse, ssim};
use broker_core::nn::ParamStore;
use broker_core::train::{run_distill, run_finetune, Ablations, FullModel, DTYPE};
use broker_core::{ModalImage, ModalPair, Modality, SynthSpec, Teacher, TrainConfig};
use candle_core::{DType, Device, Tensor};
use rand::Rng;

use super::*;

fn tensor(img: &ModalImage) -> Tensor {
    img.to_tensor(DType::F64, &Device::Cpu).unwrap()
}

/// Worst deviation of posterior column sums from one, and worst gap to the
/// definition, over `cases` random annotation sets.
pub fn posterior_partition(cases: u64) -> (f64, f64) {
    let mut r = rng(1);
    let (mut sum_dev, mut ref_gap) = (0.0f64, 0.0f64);
    for _ in 0..cases {
        let (h, w) = (r.random_range(1..9), r.random_range(1..9));
        let stride = r.random_range(1..9);
        let m = r.random_range(1..8);
        let sigma = r.random_range(2.0..12.0);
        let ann = random_points(&mut r, m, (h * stride) as f64, (w * stride) as f64);
        let post = build_posteriors(&ann, (h, w), stride, sigma).unwrap();
        let reference = posteriors_reference(&ann, h, w, stride, sigma);
        for (a, b) in post.probs.iter().zip(&reference) {
            ref_gap = ref_gap.max((a - b).abs());
        }
        for y in 0..h {
            for x in 0..w {
                let total: f64 = (0..m).map(|i| post.get(i, y, x)).sum();
                sum_dev = sum_dev.max((total - 1.0).abs());
            }
        }
    }
    (sum_dev, ref_gap)
}

fn random_cma_config<R: Rng>(r: &mut R) -> BmgConfig {
    let heads = [1, 2, 4][r.random_range(0..3)];
    BmgConfig {
        bottleneck_channels: heads * [2, 4][r.random_range(0..2)],
        cma_patch_grid: [2, 4][r.random_range(0..2)],
        cma_heads: heads,
        cma_layers: r.random_range(1..3),
        encoder_stages: r.random_range(1..4),
        base_channels: 4,
        ffn_ratio: r.random_range(1..4),
        input_size: (8 * r.random_range(4..7), 8 * r.random_range(4..7)),
        use_cma: true,
    }
}

/// Largest absolute gap between `cma_enhance` and the loop reference over
/// random configurations with randomised attention weights.
pub fn cma_oracle(cases: u64) -> f64 {
    let mut r = rng(4);
    let mut worst = 0.0f64;
    for case in 0..cases {
        let cfg = random_cma_config(&mut r);
        let bmg = Bmg::new(cfg.clone(), DType::F64, case).unwrap();
        let names: Vec<String> = bmg.store().vars().map(|(n, _)| n.clone()).filter(|n| n.starts_with("cma.")).collect();
        for name in names {
            let len = bmg.store().values_f64(&name).unwrap().len();
            let v: Vec<f64> = (0..len).map(|_| r.random_range(-0.5..0.5)).collect();
            bmg.store().set_values(&name, &v).unwrap();
        }
        let (h, w) = cfg.input_size;
        let rgb = random_image(&mut r, h, w, Modality::Rgb);
        let aux = random_image(&mut r, h, w, Modality::Thermal);
        let got: Vec<f64> = bmg.cma_enhance(&tensor(&rgb), &tensor(&aux)).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let want = cma_enhance_reference(&bmg, &planes(&rgb), &planes(&aux), h, w);
        assert_eq!(got.len(), want.len());
        worst = got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
    }
    worst
}

/// With zeroed query projections every query sees the plain mean of the
/// values; returns the largest gap to that closed form.
pub fn zero_query_identity() -> f64 {
    let mut r = rng(6);
    let mut worst = 0.0f64;
    for (d, heads, n, m) in [(8, 2, 5, 7), (12, 3, 1, 9), (16, 4, 6, 6)] {
        let mut store = ParamStore::new(DType::F64, d as u64);
        let attn = MultiHeadAttention::new(&mut store.root().pp("attn"), d, heads).unwrap();
        store.set_values("attn.q.weight", &vec![0.0; d * d]).unwrap();
        store.set_values("attn.q.bias", &vec![0.0; d]).unwrap();
        let q: Vec<f64> = (0..n * d).map(|_| r.random_range(-1.0..1.0)).collect();
        let kv: Vec<f64> = (0..m * d).map(|_| r.random_range(-1.0..1.0)).collect();
        let out: Vec<Vec<f64>> = attn
            .forward(&Tensor::from_vec(q, (n, d), &Device::Cpu).unwrap(), &Tensor::from_vec(kv.clone(), (m, d), &Device::Cpu).unwrap())
            .unwrap()
            .to_vec2()
            .unwrap();
        let vw = store.values_f64("attn.v.weight").unwrap();
        let vb = store.values_f64("attn.v.bias").unwrap();
        let ow = store.values_f64("attn.out.weight").unwrap();
        let ob = store.values_f64("attn.out.bias").unwrap();
        let mut mean_v = vec![0.0; d];
        for j in 0..m {
            for o in 0..d {
                mean_v[o] += (vb[o] + (0..d).map(|i| vw[o * d + i] * kv[j * d + i]).sum::<f64>()) / m as f64;
            }
        }
        let want: Vec<f64> = (0..d).map(|o| ob[o] + (0..d).map(|i| ow[o * d + i] * mean_v[i]).sum::<f64>()).collect();
        for row in &out {
            worst = row.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
        }
    }
    worst
}

pub struct CountMetricCheck {
    pub game_gap: f64,
    pub mae_gap: f64,
    pub rmse_gap: f64,
    pub monotone: bool,
}

/// GAME at levels 0..=3, dataset MAE and RMSE against brute force.
pub fn count_metric_oracle(cases: usize) -> CountMetricCheck {
    let mut r = rng(7);
    let mut out = CountMetricCheck {
        game_gap: 0.0,
        mae_gap: 0.0,
        rmse_gap: 0.0,
        monotone: true,
    };
    let mut densities = Vec::new();
    let mut anns = Vec::new();
    for _ in 0..cases {
        let (h, w) = (r.random_range(1..13), r.random_range(1..13));
        let stride = r.random_range(1..9);
        let vals: Vec<f64> = (0..h * w).map(|_| r.random_range(0.0..0.4)).collect();
        let n = r.random_range(0..12);
        let ann = random_points(&mut r, n, (h * stride) as f64, (w * stride) as f64);
        let dm = DensityMap::new(h, w, stride, vals.clone()).unwrap();
        let mut prev = f64::NEG_INFINITY;
        for level in 0..=3 {
            let got = game(&dm, &ann, level).unwrap();
            out.game_gap = out.game_gap.max((got - game_reference(&vals, h, w, stride, &ann, level)).abs());
            out.monotone &= got >= prev - 1e-12;
            prev = got;
        }
        densities.push(dm);
        anns.push(ann);
    }
    let pred: Vec<f64> = densities.iter().map(|d| d.values.iter().sum()).collect();
    let gt: Vec<usize> = anns.iter().map(|a| a.count()).collect();
    let k = pred.len() as f64;
    let mae = pred.iter().zip(&gt).map(|(p, g)| (p - *g as f64).abs()).sum::<f64>() / k;
    let mse = pred.iter().zip(&gt).map(|(p, g)| (p - *g as f64).powi(2)).sum::<f64>() / k;
    out.mae_gap = (game_dataset(&densities, &anns, 0).unwrap() - mae).abs();
    out.rmse_gap = (rmse(&pred, &gt).unwrap() - mse.sqrt()).abs();
    out
}

/// Whether SSIM of every image with itself is exactly one, and the worst gap
/// to the full-window reference on random pairs.
pub fn ssim_oracle(cases: usize) -> (bool, f64) {
    let mut r = rng(9);
    let (mut exact, mut worst) = (true, 0.0f64);
    for _ in 0..cases {
        let (h, w) = (r.random_range(32..48), r.random_range(32..48));
        let a = random_image(&mut r, h, w, Modality::Rgb);
        let b = random_image(&mut r, h, w, Modality::Rgb);
        exact &= ssim(&a, &a).unwrap() == 1.0;
        worst = worst.max((ssim(&a, &b).unwrap() - ssim_reference(&a.gray(), &b.gray(), h, w)).abs());
    }
    (exact, worst)
}

/// Same input through every extractor slot gives bit-identical features,
/// and the three-slot head equals the head on three copies of one feature.
pub fn slot_sharing_exact() -> bool {
    let mut r = rng(10);
    let net = CountingNet::new(ExtractorConfig::tiny(), DType::F32, 3).unwrap();
    let (h, w) = ExtractorConfig::tiny().input_size;
    let x = random_image(&mut r, h, w, Modality::Rgb).to_tensor(DType::F32, &Device::Cpu).unwrap();
    let bits = |t: &Tensor| -> Vec<u32> { t.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().map(|v| v.to_bits()).collect() };
    let f = net.extract(&x).unwrap();
    let same = bits(&f) == bits(&net.extract(&x).unwrap());
    let summed = ((f.clone() + &f).unwrap() + &f).unwrap();
    same && bits(&net.head(&summed).unwrap()) == bits(&net.count_forward(&x, Some(&x), &x).unwrap())
}

pub fn synth_pairs_n(n: usize, seed: u64) -> Vec<ModalPair> {
    synth_pairs(&SynthSpec {
        n_images: n,
        seed,
        ..SynthSpec::default()
    })
    .unwrap()
    .pairs
}

/// Every file under `root` with its bytes, sorted by relative path.
pub fn dir_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// Two seeded syntheses into fresh directories produce the same bytes.
pub fn synth_reproducible() -> bool {
    let spec = SynthSpec {
        n_images: 6,
        misalign_px: 4.0,
        seed: 42,
        ..SynthSpec::default()
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    synth_generate(&spec, a.path()).unwrap();
    synth_generate(&spec, b.path()).unwrap();
    let fa = dir_bytes(a.path());
    fa.len() > 6 * 4 && fa == dir_bytes(b.path())
}

/// Two seeded distill-then-finetune runs write the same checkpoints and logs.
pub fn training_reproducible() -> bool {
    let data = synth_pairs_n(4, 1);
    let run = |dir: &Path| {
        let mut cfg = TrainConfig {
            max_steps: Some(6),
            ..TrainConfig::desk()
        };
        cfg.paths.ckpt = Some(dir.join("bmg.safetensors"));
        let d = run_distill(&cfg, &Teacher::BuiltinAverage, &data, None).unwrap();
        let mut ft = TrainConfig {
            max_steps: Some(4),
            ..TrainConfig::desk_finetune()
        };
        ft.paths.ckpt = Some(dir.join("model.safetensors"));
        run_finetune(&ft, Some(d.bmg), &data, &data[..2]).unwrap();
        dir_bytes(dir)
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let fa = run(a.path());
    fa.iter().any(|(n, _)| n.ends_with(".jsonl")) && fa == run(b.path())
}

/// Save, load and re-run a fine-tuned model; densities and broker images must
/// match bit for bit.
pub fn checkpoint_round_trip_exact() -> bool {
    let data = synth_pairs_n(3, 8);
    let cfg = TrainConfig {
        max_steps: Some(2),
        ablations: Ablations::default(),
        ..TrainConfig::desk_finetune()
    };
    let bmg = Bmg::new(cfg.bmg.clone(), DTYPE, 8).unwrap();
    let run = run_finetune(&cfg, Some(bmg), &data, &[]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.safetensors");
    run.model.checkpoint(&cfg, 0, &[], None, None).unwrap().save(&path).unwrap();
    let restored = FullModel::from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
    data.iter().all(|pair| {
        let a = run.model.density(pair).unwrap();
        let b = restored.density(pair).unwrap();
        a.values.iter().zip(&b.values).all(|(x, y)| x.to_bits() == y.to_bits())
            && run.model.broker(pair).unwrap() == restored.broker(pair).unwrap()
    })
}
