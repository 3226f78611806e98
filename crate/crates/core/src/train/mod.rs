//! Two-stage learning: distill a fusion teacher into the generator, then
//! fine-tune generator and counting network jointly under the Bayesian loss.

mod config;
mod eval;
pub mod study;
mod teacher;

pub use config::{read_structured, Ablations, Paths, Stage, TrainConfig};
pub use eval::{center_crop, center_fit, evaluate, report_from_parts, FullModel};
pub use teacher::{average_fusion, Teacher};

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor, Var};
use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bmg::Bmg;
use crate::checkpoint::{self, Checkpoint};
use crate::counter::CountingNet;
use crate::data::{augment, ModalImage, ModalPair};
use crate::error::{Error, Result};
use crate::losses::{bayesian_loss_tensor, build_posteriors, distill_loss_tensor};
use crate::nn::Adam;

/// Training dtype.
pub const DTYPE: DType = DType::F32;

/// One line of the JSON-lines training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: Stage,
    pub epoch: usize,
    /// Optimizer steps completed so far.
    pub steps: usize,
    /// Distill: mean per-pixel squared error. Fine-tune: mean counting loss.
    pub train_loss: f64,
    /// The selection metric of the best epoch so far (lower is better).
    pub best_so_far: f64,
    pub test_game0: Option<f64>,
    pub test_rmse: Option<f64>,
}

pub struct DistillRun {
    /// Generator restored to its best epoch.
    pub bmg: Bmg,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
}

pub struct FinetuneRun {
    /// Model restored to its best epoch.
    pub model: FullModel,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
}

fn tensors(pair: &ModalPair) -> Result<(Tensor, Tensor)> {
    let dev = candle_core::Device::Cpu;
    Ok((pair.rgb.to_tensor(DTYPE, &dev)?, pair.aux.to_tensor(DTYPE, &dev)?))
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

struct LogSink(Option<BufWriter<File>>);

impl LogSink {
    fn open(ckpt: Option<&Path>) -> Result<Self> {
        match ckpt {
            None => Ok(Self(None)),
            Some(p) => {
                let path = sibling(p, ".log.jsonl");
                if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                }
                let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
                Ok(Self(Some(BufWriter::new(f))))
            }
        }
    }

    fn write(&mut self, rec: &EpochLog) -> Result<()> {
        if let Some(w) = &mut self.0 {
            let line = serde_json::to_string(rec).map_err(|e| Error::json("training log", e))?;
            writeln!(w, "{line}").and_then(|_| w.flush()).map_err(|e| Error::io("training log", e))?;
        }
        Ok(())
    }
}

/// Best-so-far bookkeeping with an in-memory copy of the best weights.
struct BestTracker {
    value: f64,
    epoch: usize,
    snapshot: Vec<BTreeMap<String, Tensor>>,
}

impl BestTracker {
    fn new() -> Self {
        Self {
            value: f64::INFINITY,
            epoch: 0,
            snapshot: Vec::new(),
        }
    }

    fn offer(&mut self, value: f64, epoch: usize, stores: &[&crate::nn::ParamStore]) -> Result<bool> {
        if value < self.value || self.snapshot.is_empty() {
            self.value = value.min(self.value);
            self.epoch = epoch;
            self.snapshot = stores.iter().map(|s| s.snapshot()).collect::<Result<_>>()?;
            return Ok(true);
        }
        Ok(false)
    }

    fn restore(&self, stores: &[&crate::nn::ParamStore]) -> Result<()> {
        for (s, snap) in stores.iter().zip(&self.snapshot) {
            s.load(snap)?;
        }
        Ok(())
    }
}

fn step_budget_left(cfg: &TrainConfig, steps: usize) -> bool {
    cfg.max_steps.is_none_or(|m| steps < m)
}

/// Stage 1: minimise the summed squared error between generator output and
/// teacher fusion over the training pairs. `init` continues from an existing
/// generator; otherwise one is built from `cfg.effective_bmg()`.
pub fn run_distill(cfg: &TrainConfig, teacher: &Teacher, dataset: &[ModalPair], init: Option<Bmg>) -> Result<DistillRun> {
    if cfg.stage != Stage::Distill {
        return Err(Error::Config("run_distill needs stage = distill".into()));
    }
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Invalid("distillation set is empty".into()));
    }
    let bmg = match init {
        Some(b) => b,
        None => Bmg::new(cfg.effective_bmg(), DTYPE, cfg.seed.wrapping_add(1))?,
    };
    let targets: Vec<ModalImage> = dataset.iter().map(|p| teacher.fuse(p)).collect::<Result<_>>()?;
    let mut opt = Adam::new(bmg.store().all_vars(), cfg.lr, cfg.weight_decay)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let crop = (cfg.crop, cfg.crop);
    let ckpt_path = cfg.paths.ckpt.as_deref();
    let mut sink = LogSink::open(ckpt_path)?;
    let mut best = BestTracker::new();
    let mut log = Vec::new();
    let mut steps = 0;
    let values_per_image = (3 * cfg.crop * cfg.crop) as f64;

    for epoch in 0..cfg.max_epochs {
        if !step_budget_left(cfg, steps) {
            break;
        }
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut rng);
        let mut sum_mse = 0.0;
        let mut n_seen = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            if !step_budget_left(cfg, steps) {
                break;
            }
            let mut total: Option<Tensor> = None;
            for &i in batch {
                let aug = augment(&dataset[i], crop, &mut rng)?;
                let target = aug.window.apply(&targets[i])?.to_tensor(DTYPE, &candle_core::Device::Cpu)?;
                let (rgb, aux) = tensors(&aug.pair)?;
                let loss = distill_loss_tensor(&bmg.forward(&rgb, &aux)?, &target)?;
                sum_mse += scalar(&loss)? / values_per_image;
                n_seen += 1;
                total = Some(match total {
                    None => loss,
                    Some(t) => (t + loss)?,
                });
            }
            let total = total.expect("non-empty batch");
            opt.step(&total.backward()?)?;
            steps += 1;
        }
        let train_loss = sum_mse / n_seen.max(1) as f64;
        let improved = best.offer(train_loss, epoch, &[bmg.store()])?;
        let rec = EpochLog {
            stage: Stage::Distill,
            epoch,
            steps,
            train_loss,
            best_so_far: best.value,
            test_game0: None,
            test_rmse: None,
        };
        info!("distill epoch {epoch}: mse {train_loss:.6} (best {:.6})", best.value);
        sink.write(&rec)?;
        log.push(rec);
        if let Some(path) = ckpt_path {
            let mut h = checkpoint::header(Stage::Distill, epoch);
            h.ablations = cfg.ablations;
            h.metrics.insert("train_mse".into(), train_loss);
            let ck = Checkpoint::capture(h, Some(&bmg), None)?;
            ck.save(&sibling(path, ".last.safetensors"))?;
            if improved {
                ck.save(path)?;
            }
        }
    }
    best.restore(&[bmg.store()])?;
    Ok(DistillRun {
        bmg,
        log,
        best_epoch: best.epoch,
    })
}

/// Resolve the generator used for fine-tuning from the ablation switches.
fn prepare_bmg(cfg: &TrainConfig, bmg: Option<Bmg>) -> Result<Option<Bmg>> {
    let ab = cfg.ablations;
    if ab.no_broker {
        return Ok(bmg);
    }
    if ab.no_distill {
        if bmg.is_some() {
            return Err(Error::Ablation("no_distill starts from a random generator; do not pass one".into()));
        }
        return Ok(Some(Bmg::new(cfg.effective_bmg(), DTYPE, cfg.seed.wrapping_add(1))?));
    }
    let bmg = bmg.ok_or_else(|| Error::Config("fine-tuning needs a distilled generator unless no_distill is set".into()))?;
    if ab.no_cma && bmg.config().use_cma {
        // drop the attention branch, keep everything else
        let mut c = bmg.config().clone();
        c.use_cma = false;
        let stripped = Bmg::new(c, DTYPE, 0)?;
        let snap: BTreeMap<String, Tensor> = bmg
            .store()
            .snapshot()?
            .into_iter()
            .filter(|(k, _)| !k.starts_with("cma."))
            .collect();
        stripped.store().load(&snap)?;
        return Ok(Some(stripped));
    }
    Ok(Some(bmg))
}

/// Stage 2: joint optimisation of generator, extractor and head under the
/// Bayesian counting loss, with the ablation switches of `cfg.ablations`.
pub fn run_finetune(cfg: &TrainConfig, bmg: Option<Bmg>, train: &[ModalPair], test: &[ModalPair]) -> Result<FinetuneRun> {
    if cfg.stage != Stage::Finetune {
        return Err(Error::Config("run_finetune needs stage = finetune".into()));
    }
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Invalid("fine-tuning set is empty".into()));
    }
    let ab = cfg.ablations;
    let bmg = prepare_bmg(cfg, bmg)?;
    let counter = CountingNet::new(cfg.extractor.clone(), DTYPE, cfg.seed.wrapping_add(2))?;
    let model = FullModel {
        bmg,
        counter,
        use_broker: !ab.no_broker,
    };
    let test: Vec<ModalPair> = test.iter().map(|p| center_fit(p, cfg.crop)).collect::<Result<_>>()?;

    let mut vars: Vec<Var> = model.counter.store().all_vars();
    let train_bmg = model.use_broker && !ab.freeze_bmg;
    if train_bmg {
        vars.extend(model.bmg.as_ref().expect("generator present").store().all_vars());
    }
    let mut opt = Adam::new(vars, cfg.lr, cfg.weight_decay)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let crop = (cfg.crop, cfg.crop);
    let (dh, dw) = cfg.extractor.density_size();
    let stride = cfg.extractor.density_stride;
    let ckpt_path = cfg.paths.ckpt.as_deref();
    let mut sink = LogSink::open(ckpt_path)?;
    let mut best = BestTracker::new();
    let mut log = Vec::new();
    let mut steps = 0;

    for epoch in 0..cfg.max_epochs {
        if !step_budget_left(cfg, steps) {
            break;
        }
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut sum_loss = 0.0;
        let mut n_seen = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            if !step_budget_left(cfg, steps) {
                break;
            }
            let mut total: Option<Tensor> = None;
            for &i in batch {
                let aug = augment(&train[i], crop, &mut rng)?;
                let (rgb, aux) = tensors(&aug.pair)?;
                let broker = match (&model.bmg, model.use_broker) {
                    (Some(g), true) => {
                        let b = g.forward(&rgb, &aux)?;
                        Some(if train_bmg { b } else { b.detach() })
                    }
                    _ => None,
                };
                let density = model.counter.count_forward(&rgb, broker.as_ref(), &aux)?;
                let post = build_posteriors(&aug.pair.annotations, (dh, dw), stride, cfg.sigma)?;
                let mut loss = bayesian_loss_tensor(&density, &post)?;
                sum_loss += scalar(&loss)?;
                if cfg.fusion_reg_weight > 0.0 {
                    if let Some(b) = &broker {
                        let target = average_fusion(&aug.pair.rgb, &aug.pair.aux)?.to_tensor(DTYPE, b.device())?;
                        loss = (loss + (distill_loss_tensor(b, &target)? * cfg.fusion_reg_weight)?)?;
                    }
                }
                n_seen += 1;
                total = Some(match total {
                    None => loss,
                    Some(t) => (t + loss)?,
                });
            }
            let total = total.expect("non-empty batch");
            opt.step(&total.backward()?)?;
            steps += 1;
        }
        let train_loss = sum_loss / n_seen.max(1) as f64;
        let (test_game0, test_rmse) = if test.is_empty() {
            (None, None)
        } else {
            let r = evaluate(&model, &test, None, false)?;
            (Some(r.game[&0]), Some(r.rmse))
        };
        let metric = test_game0.unwrap_or(train_loss);
        let stores = model.stores();
        let improved = best.offer(metric, epoch, &stores)?;
        let rec = EpochLog {
            stage: Stage::Finetune,
            epoch,
            steps,
            train_loss,
            best_so_far: best.value,
            test_game0,
            test_rmse,
        };
        info!("finetune epoch {epoch}: loss {train_loss:.4} game0 {test_game0:?}");
        sink.write(&rec)?;
        log.push(rec);
        if let Some(path) = ckpt_path {
            let ck = model.checkpoint(cfg, epoch, &[("train_loss", train_loss)], test_game0, test_rmse)?;
            ck.save(&sibling(path, ".last.safetensors"))?;
            if improved {
                ck.save(path)?;
            }
        }
    }
    best.restore(&model.stores())?;
    Ok(FinetuneRun {
        model,
        log,
        best_epoch: best.epoch,
    })
}
