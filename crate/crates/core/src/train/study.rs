//! Seeded synthetic studies: de-ghosting quality of the broker image against
//! the teacher, and test GAME(0) per ablation variant.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{average_fusion, evaluate, run_distill, run_finetune, Ablations, Stage, Teacher, TrainConfig};
use crate::bmg::Bmg;
use crate::data::{synth_pairs, ModalImage, ModalPair, Split, SynthSpec};
use crate::error::{Error, Result};
use crate::metrics::{psnr, sentinel_mean, ssim};

pub const VARIANTS: [&str; 5] = ["full", "no_cma", "freeze_bmg", "no_distill", "no_broker"];

/// Mean image quality against the ghost-free reference on one test split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GhostRow {
    pub seed: u64,
    #[serde(with = "crate::metrics::inf_as_string")]
    pub teacher_psnr: f64,
    #[serde(with = "crate::metrics::inf_as_string")]
    pub broker_psnr: f64,
    pub teacher_ssim: f64,
    pub broker_ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedStudy {
    pub seed: u64,
    pub ghost: GhostRow,
    /// Test GAME(0) keyed by variant label.
    pub game0: BTreeMap<String, f64>,
}

#[derive(Clone, Debug)]
pub struct StudySpec {
    /// Dataset recipe; its seed is replaced per run.
    pub synth: SynthSpec,
    pub seeds: Vec<u64>,
    pub distill: TrainConfig,
    pub finetune: TrainConfig,
    pub variants: Vec<String>,
}

impl StudySpec {
    /// Desk-sized benchmark: 64x64 scenes with an 8 px sensor offset.
    pub fn desk(seeds: Vec<u64>, distill_steps: usize, finetune_steps: usize) -> Self {
        let synth = SynthSpec {
            n_images: 24,
            misalign_px: 8.0,
            test_fraction: 1.0 / 3.0,
            ..SynthSpec::default()
        };
        let mut distill = TrainConfig::desk();
        distill.max_steps = Some(distill_steps);
        distill.max_epochs = usize::MAX;
        let mut finetune = TrainConfig::desk_finetune();
        finetune.max_steps = Some(finetune_steps);
        finetune.max_epochs = usize::MAX;
        Self {
            synth,
            seeds,
            distill,
            finetune,
            variants: VARIANTS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

fn copy_bmg(bmg: &Bmg) -> Result<Bmg> {
    let out = Bmg::new(bmg.config().clone(), bmg.dtype(), 0)?;
    out.store().load(&bmg.store().snapshot()?)?;
    Ok(out)
}

fn mean_or_inf(values: &[f64]) -> f64 {
    match sentinel_mean(values) {
        (Some(m), _) => m,
        (None, _) => f64::INFINITY,
    }
}

/// Teacher (pixel average) and broker image for one pair, 8-bit quantized
/// as they are written to disk.
pub fn ghost_images(bmg: &Bmg, pair: &ModalPair) -> Result<(ModalImage, ModalImage)> {
    Ok((
        average_fusion(&pair.rgb, &pair.aux)?.quantized(),
        bmg.fuse(&pair.rgb, &pair.aux)?.quantized(),
    ))
}

/// Teacher and broker images, each scored against `refs`. PSNR means skip
/// infinite values and are infinite only when every value is.
pub fn ghost_row(seed: u64, bmg: &Bmg, pairs: &[ModalPair], refs: &[ModalImage]) -> Result<GhostRow> {
    if pairs.len() != refs.len() || pairs.is_empty() {
        return Err(Error::Invalid("ghosting comparison needs one reference per pair".into()));
    }
    let (mut tp, mut bp, mut ts, mut bs) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (pair, reference) in pairs.iter().zip(refs) {
        let (teacher, broker) = ghost_images(bmg, pair)?;
        tp.push(psnr(&teacher, reference)?);
        bp.push(psnr(&broker, reference)?);
        ts.push(ssim(&teacher, reference)?);
        bs.push(ssim(&broker, reference)?);
    }
    let n = pairs.len() as f64;
    Ok(GhostRow {
        seed,
        teacher_psnr: mean_or_inf(&tp),
        broker_psnr: mean_or_inf(&bp),
        teacher_ssim: ts.iter().sum::<f64>() / n,
        broker_ssim: bs.iter().sum::<f64>() / n,
    })
}

/// Distill once, then fine-tune every variant from the same starting point.
pub fn run_seed(spec: &StudySpec, seed: u64) -> Result<SeedStudy> {
    let data = synth_pairs(&SynthSpec {
        seed,
        ..spec.synth.clone()
    })?;
    let (train, _) = data.split(Split::Train);
    let (test, refs) = data.split(Split::Test);

    let distill_cfg = TrainConfig {
        stage: Stage::Distill,
        seed,
        ..spec.distill.clone()
    };
    let distilled = run_distill(&distill_cfg, &Teacher::BuiltinAverage, &train, None)?.bmg;

    let mut game0 = BTreeMap::new();
    let mut ghost = None;
    for label in &spec.variants {
        let ablations = Ablations::from_label(label)?;
        let mut cfg = TrainConfig {
            stage: Stage::Finetune,
            seed,
            ablations,
            ..spec.finetune.clone()
        };
        cfg.paths.ckpt = None;
        let init = if ablations.no_distill || ablations.no_broker {
            None
        } else {
            Some(copy_bmg(&distilled)?)
        };
        let run = run_finetune(&cfg, init, &train, &test)?;
        let report = evaluate(&run.model, &test, None, false)?;
        game0.insert(label.clone(), report.game[&0]);
        if label == "full" {
            let bmg = run.model.bmg.as_ref().expect("full variant has a generator");
            ghost = Some(ghost_row(seed, bmg, &test, &refs)?);
        }
    }
    let ghost = match ghost {
        Some(g) => g,
        None => ghost_row(seed, &distilled, &test, &refs)?,
    };
    Ok(SeedStudy { seed, ghost, game0 })
}

pub fn run_study(spec: &StudySpec) -> Result<Vec<SeedStudy>> {
    spec.seeds.iter().map(|&s| run_seed(spec, s)).collect()
}

/// Seeds whose broker beats the teacher in PSNR against the reference.
pub fn ghost_wins(rows: &[SeedStudy]) -> usize {
    rows.iter().filter(|r| r.ghost.broker_psnr > r.ghost.teacher_psnr).count()
}

/// Seeds where the full model's GAME(0) is no worse than `variant`'s.
pub fn ablation_wins(rows: &[SeedStudy], variant: &str) -> usize {
    rows.iter()
        .filter(|r| match (r.game0.get("full"), r.game0.get(variant)) {
            (Some(f), Some(v)) => f <= v,
            _ => false,
        })
        .count()
}
