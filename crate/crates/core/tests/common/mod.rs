//! Independent brute-force references shared by the integration suites.
#![allow(dead_code)]

use broker_core::bmg::Bmg;
use broker_core::PointAnnotationSet;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_points<R: Rng>(rng: &mut R, n: usize, h: f64, w: f64) -> PointAnnotationSet {
    PointAnnotationSet::new(
        (0..n)
            .map(|_| [rng.random_range(0.0..w), rng.random_range(0.0..h)])
            .collect(),
    )
}

// ---------- attention / CMA ----------

struct Lin {
    w: Vec<f64>,
    b: Vec<f64>,
    n_in: usize,
    n_out: usize,
}

impl Lin {
    fn load(bmg: &Bmg, name: &str, n_in: usize, n_out: usize) -> Self {
        Self {
            w: bmg.store().values_f64(&format!("{name}.weight")).unwrap(),
            b: bmg.store().values_f64(&format!("{name}.bias")).unwrap(),
            n_in,
            n_out,
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n_out)
            .map(|o| self.b[o] + (0..self.n_in).map(|i| self.w[o * self.n_in + i] * x[i]).sum::<f64>())
            .collect()
    }
}

fn patch_tokens(bmg: &Bmg, img: &[f64], h: usize, w: usize) -> Vec<Vec<f64>> {
    let cfg = bmg.config();
    let g = cfg.cma_patch_grid;
    let d = cfg.bottleneck_channels;
    let (ph, pw) = (h / g, w / g);
    let wt = bmg.store().values_f64("cma.patch.weight").unwrap();
    let bias = bmg.store().values_f64("cma.patch.bias").unwrap();
    let mut tokens = Vec::new();
    for gy in 0..g {
        for gx in 0..g {
            let mut t = bias.clone();
            for (j, tj) in t.iter_mut().enumerate().take(d) {
                for c in 0..3 {
                    for py in 0..ph {
                        for px in 0..pw {
                            let wi = ((j * 3 + c) * ph + py) * pw + px;
                            let pix = img[(c * h + gy * ph + py) * w + gx * pw + px];
                            *tj += wt[wi] * pix;
                        }
                    }
                }
            }
            tokens.push(t);
        }
    }
    tokens
}

/// Multi-head cross attention written with explicit loops.
pub fn attention_loops(query: &[Vec<f64>], kv: &[Vec<f64>], heads: usize, q: &dyn Fn(&[f64]) -> Vec<f64>, k: &dyn Fn(&[f64]) -> Vec<f64>, v: &dyn Fn(&[f64]) -> Vec<f64>, out: &dyn Fn(&[f64]) -> Vec<f64>) -> Vec<Vec<f64>> {
    let d = query[0].len();
    let dh = d / heads;
    let qs: Vec<Vec<f64>> = query.iter().map(|x| q(x)).collect();
    let ks: Vec<Vec<f64>> = kv.iter().map(|x| k(x)).collect();
    let vs: Vec<Vec<f64>> = kv.iter().map(|x| v(x)).collect();
    qs.iter()
        .map(|qi| {
            let mut ctx = vec![0.0; d];
            for hd in 0..heads {
                let r = hd * dh..(hd + 1) * dh;
                let scores: Vec<f64> = ks
                    .iter()
                    .map(|kj| r.clone().map(|e| qi[e] * kj[e]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let ex: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                let z: f64 = ex.iter().sum();
                for (j, vj) in vs.iter().enumerate() {
                    for e in r.clone() {
                        ctx[e] += ex[j] / z * vj[e];
                    }
                }
            }
            out(&ctx)
        })
        .collect()
}

/// Reference `cma_enhance`: `(d, out_h, out_w)` flattened, from CHW `f64` images.
pub fn cma_enhance_reference(bmg: &Bmg, rgb: &[f64], aux: &[f64], h: usize, w: usize) -> Vec<f64> {
    let cfg = bmg.config();
    let d = cfg.bottleneck_channels;
    let g = cfg.cma_patch_grid;
    let x_r = patch_tokens(bmg, rgb, h, w);
    let mut x = patch_tokens(bmg, aux, h, w);
    for l in 0..cfg.cma_layers {
        let p = format!("cma.layer{l}");
        let [q, k, v, o] = ["q", "k", "v", "out"].map(|n| Lin::load(bmg, &format!("{p}.attn.{n}"), d, d));
        let hidden = cfg.ffn_ratio * d;
        let fc1 = Lin::load(bmg, &format!("{p}.ffn.fc1"), d, hidden);
        let fc2 = Lin::load(bmg, &format!("{p}.ffn.fc2"), hidden, d);
        let att = attention_loops(&x, &x_r, cfg.cma_heads, &|t| q.apply(t), &|t| k.apply(t), &|t| v.apply(t), &|t| o.apply(t));
        x = x
            .iter()
            .zip(&att)
            .map(|(xi, ai)| {
                let hres: Vec<f64> = xi.iter().zip(ai).map(|(a, b)| a + b).collect();
                let mid: Vec<f64> = fc1.apply(&hres).into_iter().map(|u| u.max(0.0)).collect();
                fc2.apply(&mid).iter().zip(&hres).map(|(f, r)| f + r).collect()
            })
            .collect();
    }
    let (oh, ow) = cfg.bottleneck_size();
    let mut outv = vec![0.0; d * oh * ow];
    for c in 0..d {
        for y in 0..oh {
            for xx in 0..ow {
                outv[(c * oh + y) * ow + xx] = bilinear_sample(|gy, gx| x[gy * g + gx][c], g, g, y, xx, oh, ow);
            }
        }
    }
    outv
}

/// Half-pixel-centre bilinear sample of a `src_h x src_w` field at output pixel `(y, x)`.
pub fn bilinear_sample(f: impl Fn(usize, usize) -> f64, src_h: usize, src_w: usize, y: usize, x: usize, out_h: usize, out_w: usize) -> f64 {
    let coord = |o: usize, n_in: usize, n_out: usize| {
        let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
        let lo = (s.floor() as usize).min(n_in - 1);
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, s - lo as f64)
    };
    let (y0, y1, fy) = coord(y, src_h, out_h);
    let (x0, x1, fx) = coord(x, src_w, out_w);
    (1.0 - fy) * ((1.0 - fx) * f(y0, x0) + fx * f(y0, x1)) + fy * ((1.0 - fx) * f(y1, x0) + fx * f(y1, x1))
}

// ---------- posteriors ----------

/// Posterior probabilities from the definition, without log-sum-exp.
pub fn posteriors_reference(ann: &PointAnnotationSet, h: usize, w: usize, stride: usize, sigma: f64) -> Vec<f64> {
    let m = ann.count();
    let mut out = vec![0.0; m * h * w];
    for y in 0..h {
        for x in 0..w {
            let cy = (y * stride) as f64 + (stride as f64 - 1.0) / 2.0;
            let cx = (x * stride) as f64 + (stride as f64 - 1.0) / 2.0;
            let lik: Vec<f64> = ann
                .points
                .iter()
                .map(|p| (-((cx - p[0]).powi(2) + (cy - p[1]).powi(2)) / (2.0 * sigma * sigma)).exp())
                .collect();
            let z: f64 = lik.iter().sum();
            for i in 0..m {
                out[(i * h + y) * w + x] = lik[i] / z;
            }
        }
    }
    out
}

// ---------- counting metrics ----------

/// Region index of cell `c` among `2^level` halving regions of `0..n`.
pub fn region_of(c: usize, n: usize, level: u32) -> usize {
    let (mut lo, mut hi, mut idx) = (0usize, n, 0usize);
    for _ in 0..level {
        let mid = lo + (hi - lo) / 2;
        idx *= 2;
        if c >= mid {
            idx += 1;
            lo = mid;
        } else {
            hi = mid;
        }
    }
    idx
}

/// GAME for one image from scratch: bin points, sum both maps per region.
pub fn game_reference(pred: &[f64], h: usize, w: usize, stride: usize, ann: &PointAnnotationSet, level: u32) -> f64 {
    let k = 1usize << level;
    let mut p = vec![0.0; k * k];
    let mut g = vec![0.0; k * k];
    for y in 0..h {
        for x in 0..w {
            p[region_of(y, h, level) * k + region_of(x, w, level)] += pred[y * w + x];
        }
    }
    for pt in &ann.points {
        let cx = ((pt[0] / stride as f64).floor().max(0.0) as usize).min(w - 1);
        let cy = ((pt[1] / stride as f64).floor().max(0.0) as usize).min(h - 1);
        g[region_of(cy, h, level) * k + region_of(cx, w, level)] += 1.0;
    }
    p.iter().zip(&g).map(|(a, b)| (a - b).abs()).sum()
}

// ---------- image quality ----------

/// SSIM with a full 2D 11x11 Gaussian window (sigma 1.5), valid positions only.
pub fn ssim_reference(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    const N: usize = 11;
    let sigma: f64 = 1.5;
    let mut win = [[0.0f64; N]; N];
    let mut tot = 0.0;
    for (i, row) in win.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
            tot += *v;
        }
    }
    let c1 = (0.01f64).powi(2);
    let c2 = (0.03f64).powi(2);
    let mut acc = 0.0;
    let mut n = 0usize;
    for y in 0..=h - N {
        for x in 0..=w - N {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..N {
                for j in 0..N {
                    let wt = win[i][j] / tot;
                    let (va, vb) = (a[(y + i) * w + x + j], b[(y + i) * w + x + j]);
                    ma += wt * va;
                    mb += wt * vb;
                    saa += wt * va * va;
                    sbb += wt * vb * vb;
                    sab += wt * va * vb;
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            n += 1;
        }
    }
    acc / n as f64
}

// ---------- finite differences ----------

/// Relative disagreement used by the gradient suites.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

pub mod checks;

pub mod grad {
    use broker_core::bmg::{Bmg, BmgConfig};
    use broker_core::counter::DensityMap;
    use broker_core::losses::{bayesian_loss, bayesian_loss_tensor, build_posteriors};
    use candle_core::{DType, Device, Tensor, Var};
    use rand::Rng;

    /// One representative weight per generator submodule.
    pub const BMG_PARAMS: [(&str, &str); 8] = [
        ("xi_r", "xi_r.weight"),
        ("xi_t", "xi_t.weight"),
        ("f_e", "enc1.down.weight"),
        ("W_q", "cma.layer0.attn.q.weight"),
        ("W_k", "cma.layer0.attn.k.weight"),
        ("W_v", "cma.layer0.attn.v.weight"),
        ("FFN", "cma.layer0.ffn.fc1.weight"),
        ("f_d", "dec0.fuse.weight"),
    ];

    pub fn small_config() -> BmgConfig {
        BmgConfig {
            bottleneck_channels: 16,
            cma_patch_grid: 4,
            cma_heads: 4,
            cma_layers: 1,
            encoder_stages: 2,
            base_channels: 4,
            ffn_ratio: 2,
            input_size: (32, 32),
            use_cma: true,
        }
    }

    pub struct Probe {
        pub bmg: Bmg,
        rgb: Tensor,
        aux: Tensor,
        weights: Tensor,
    }

    impl Probe {
        pub fn new(seed: u64) -> Self {
            let bmg = Bmg::new(small_config(), DType::F64, seed).unwrap();
            let mut r = super::rng(seed + 100);
            let mut t = |n: usize, lo: f64, hi: f64, shape: (usize, usize, usize, usize)| {
                let v: Vec<f64> = (0..n).map(|_| r.random_range(lo..hi)).collect();
                Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
            };
            let n = 3 * 32 * 32;
            let rgb = t(n, 0.0, 1.0, (1, 3, 32, 32));
            let aux = t(n, 0.0, 1.0, (1, 3, 32, 32));
            let weights = t(n, -1.0, 1.0, (1, 3, 32, 32));
            Self { bmg, rgb, aux, weights }
        }

        fn loss(&self) -> Tensor {
            (self.bmg.forward(&self.rgb, &self.aux).unwrap() * &self.weights)
                .unwrap()
                .sum_all()
                .unwrap()
        }

        fn loss_value(&self) -> f64 {
            self.loss().to_scalar::<f64>().unwrap()
        }

        /// Worst relative error over the `k` largest-gradient entries of `name`.
        pub fn max_rel_err(&self, name: &str, k: usize) -> f64 {
            let var: Var = self.bmg.store().get(name).unwrap().clone();
            let grads = self.loss().backward().unwrap();
            let g: Vec<f64> = grads.get(&var).unwrap().flatten_all().unwrap().to_vec1().unwrap();
            let mut idx: Vec<usize> = (0..g.len()).collect();
            idx.sort_by(|&a, &b| g[b].abs().total_cmp(&g[a].abs()));
            let base = self.bmg.store().values_f64(name).unwrap();
            let h = 1e-6;
            let mut worst = 0.0f64;
            for &i in idx.iter().take(k) {
                let mut v = base.clone();
                v[i] = base[i] + h;
                self.bmg.store().set_values(name, &v).unwrap();
                let up = self.loss_value();
                v[i] = base[i] - h;
                self.bmg.store().set_values(name, &v).unwrap();
                let down = self.loss_value();
                self.bmg.store().set_values(name, &base).unwrap();
                worst = worst.max(super::rel_err(g[i], (up - down) / (2.0 * h)));
            }
            worst
        }
    }

    /// Finite differences of the scalar loss against autodiff of the tensor
    /// form, over every density cell. Draws are rejected while any residual
    /// `1 - <p_i, D>` lies within `1e-3` of the kink.
    pub fn bayesian_max_rel_err(seed: u64) -> f64 {
        let mut r = super::rng(seed);
        let (h, w, stride) = (6, 7, 8);
        let (post, vals) = loop {
            let m = r.random_range(1..6);
            let ann = super::random_points(&mut r, m, (h * stride) as f64, (w * stride) as f64);
            let post = build_posteriors(&ann, (h, w), stride, 8.0).unwrap();
            let vals: Vec<f64> = (0..h * w).map(|_| r.random_range(0.0..0.5)).collect();
            let clear = (0..m).all(|i| {
                let e: f64 = post.plane(i).iter().zip(&vals).map(|(p, d)| p * d).sum();
                (1.0 - e).abs() > 1e-3
            });
            if clear {
                break (post, vals);
            }
        };
        let var = Var::from_tensor(&Tensor::from_vec(vals.clone(), (1, 1, h, w), &Device::Cpu).unwrap()).unwrap();
        let grads = bayesian_loss_tensor(var.as_tensor(), &post).unwrap().backward().unwrap();
        let g: Vec<f64> = grads.get(&var).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let eps = 1e-5;
        let mut worst = 0.0f64;
        for i in 0..h * w {
            let mut up = vals.clone();
            up[i] += eps;
            let mut dn = vals.clone();
            dn[i] -= eps;
            let lu = bayesian_loss(&DensityMap::new(h, w, stride, up).unwrap(), &post).unwrap();
            let ld = bayesian_loss(&DensityMap::new(h, w, stride, dn).unwrap(), &post).unwrap();
            worst = worst.max(super::rel_err(g[i], (lu - ld) / (2.0 * eps)));
        }
        worst
    }
}

pub fn random_image<R: Rng>(rng: &mut R, h: usize, w: usize, modality: broker_core::Modality) -> broker_core::ModalImage {
    broker_core::ModalImage::from_fn(h, w, modality, |_, _, _| rng.random_range(0.0..1.0f32)).unwrap()
}

/// CHW pixels widened to `f64`.
pub fn planes(img: &broker_core::ModalImage) -> Vec<f64> {
    img.pixels().iter().map(|&v| v as f64).collect()
}
