use std::collections::BTreeMap;

use candle_core::{Device, Tensor};

use super::{Stage, TrainConfig, DTYPE};
use crate::bmg::Bmg;
use crate::checkpoint::{self, Checkpoint};
use crate::counter::{predict_count, CountingNet, DensityMap};
use crate::data::{CropWindow, ModalImage, ModalPair, Modality, PointAnnotationSet};
use crate::error::{Error, Result};
use crate::metrics::{game_dataset, profile_bmg, psnr, rmse, sentinel_mean, ssim, BmgProfile, EvalReport, MAX_GAME_LEVEL, REPORT_SCHEMA_VERSION};
use crate::nn::ParamStore;

/// Generator plus counting network, as produced by fine-tuning.
pub struct FullModel {
    pub bmg: Option<Bmg>,
    pub counter: CountingNet,
    /// False for the `no_broker` ablation: the counter sees RGB and
    /// auxiliary features only.
    pub use_broker: bool,
}

impl FullModel {
    pub fn stores(&self) -> Vec<&ParamStore> {
        let mut s = vec![self.counter.store()];
        if let Some(b) = &self.bmg {
            s.push(b.store());
        }
        s
    }

    pub fn input_size(&self) -> (usize, usize) {
        self.counter.config().input_size
    }

    fn active_bmg(&self) -> Option<&Bmg> {
        self.bmg.as_ref().filter(|_| self.use_broker)
    }

    /// Broker image for a pair already at the model input size.
    pub fn broker(&self, pair: &ModalPair) -> Result<Option<ModalImage>> {
        self.active_bmg().map(|b| b.fuse(&pair.rgb, &pair.aux)).transpose()
    }

    /// Density map for a pair already at the model input size.
    pub fn density(&self, pair: &ModalPair) -> Result<DensityMap> {
        let dev = Device::Cpu;
        let rgb = pair.rgb.to_tensor(DTYPE, &dev)?;
        let aux = pair.aux.to_tensor(DTYPE, &dev)?;
        let broker: Option<Tensor> = self.active_bmg().map(|b| b.forward(&rgb, &aux)).transpose()?;
        self.counter.density(&rgb, broker.as_ref(), &aux)
    }

    pub fn checkpoint(
        &self,
        cfg: &TrainConfig,
        epoch: usize,
        extra: &[(&str, f64)],
        game0: Option<f64>,
        rmse: Option<f64>,
    ) -> Result<Checkpoint> {
        let mut h = checkpoint::header(Stage::Finetune, epoch);
        h.ablations = cfg.ablations;
        for (k, v) in extra {
            h.metrics.insert((*k).to_string(), *v);
        }
        if let Some(g) = game0 {
            h.metrics.insert("test_game0".into(), g);
        }
        if let Some(r) = rmse {
            h.metrics.insert("test_rmse".into(), r);
        }
        Checkpoint::capture(h, self.active_bmg(), Some(&self.counter))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let counter = ck.counter(DTYPE)?;
        let bmg = if ck.has_bmg() { Some(ck.bmg(DTYPE)?) } else { None };
        let use_broker = bmg.is_some() && !ck.header.ablations.no_broker;
        Ok(Self {
            bmg,
            counter,
            use_broker,
        })
    }
}

fn center_window(h: usize, w: usize, side: usize) -> Result<CropWindow> {
    if h < side || w < side {
        return Err(Error::Shape(format!("image {h}x{w} smaller than model input {side}")));
    }
    Ok(CropWindow {
        top: (h - side) / 2,
        left: (w - side) / 2,
        height: side,
        width: side,
        flip: false,
    })
}

/// Center crop one image to `side x side`.
pub fn center_crop(img: &ModalImage, side: usize) -> Result<ModalImage> {
    center_window(img.height(), img.width(), side)?.apply(img)
}

/// Center crop a pair to `side x side`; pairs already at that size are
/// returned unchanged.
pub fn center_fit(pair: &ModalPair, side: usize) -> Result<ModalPair> {
    if pair.height() == side && pair.width() == side {
        return Ok(pair.clone());
    }
    let win = center_window(pair.height(), pair.width(), side)?;
    let mut out = ModalPair::new(
        pair.id.clone(),
        win.apply(&pair.rgb)?,
        win.apply(&pair.aux)?,
        win.apply_points(&pair.annotations),
    )?;
    out.misalignment = pair.misalignment;
    Ok(out)
}

/// Assemble a report from per-image predictions and image-quality values.
pub fn report_from_parts(
    densities: &[DensityMap],
    anns: &[PointAnnotationSet],
    psnrs: &[f64],
    ssims: &[f64],
    profile: Option<BmgProfile>,
) -> Result<EvalReport> {
    if densities.len() != anns.len() || densities.is_empty() {
        return Err(Error::Invalid(format!(
            "need one density per annotation set, got {} and {}",
            densities.len(),
            anns.len()
        )));
    }
    let game: BTreeMap<u32, f64> = (0..=MAX_GAME_LEVEL)
        .map(|l| game_dataset(densities, anns, l).map(|g| (l, g)))
        .collect::<Result<_>>()?;
    let pred: Vec<f64> = densities.iter().map(predict_count).collect();
    let gt: Vec<usize> = anns.iter().map(|a| a.count()).collect();
    let (psnr_mean, psnr_infinite) = sentinel_mean(psnrs);
    let ssim_mean = (!ssims.is_empty()).then(|| ssims.iter().sum::<f64>() / ssims.len() as f64);
    let report = EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        game,
        rmse: rmse(&pred, &gt)?,
        n_images: densities.len(),
        psnr_mean,
        psnr_infinite,
        ssim_mean,
        bmg_params: profile.map_or(0, |p| p.param_count),
        bmg_latency_ms: profile.map_or(0.0, |p| p.latency_ms),
    };
    report.check_invariants()?;
    Ok(report)
}

/// Evaluate on `pairs`, center-cropped to the model input. When `refs` is
/// given (one reference fusion per pair), broker PSNR and SSIM against it are
/// reported. `profile` times the generator.
pub fn evaluate(model: &FullModel, pairs: &[ModalPair], refs: Option<&[ModalImage]>, profile: bool) -> Result<EvalReport> {
    if let Some(r) = refs {
        if r.len() != pairs.len() {
            return Err(Error::Invalid(format!("{} reference images for {} pairs", r.len(), pairs.len())));
        }
    }
    let side = model.input_size().0;
    let mut densities = Vec::with_capacity(pairs.len());
    let mut anns = Vec::with_capacity(pairs.len());
    let mut psnrs = Vec::new();
    let mut ssims = Vec::new();
    for (i, raw) in pairs.iter().enumerate() {
        let pair = center_fit(raw, side)?;
        densities.push(model.density(&pair)?);
        if let (Some(refs), Some(broker)) = (refs, model.broker(&pair)?) {
            let win = center_window(raw.height(), raw.width(), side)?;
            let reference = win.apply(&refs[i])?.with_modality(Modality::Broker);
            psnrs.push(psnr(&broker, &reference)?);
            ssims.push(ssim(&broker, &reference)?);
        }
        anns.push(pair.annotations);
    }
    let prof = match (profile, model.active_bmg()) {
        (true, Some(b)) => Some(profile_bmg(b)?),
        _ => None,
    };
    report_from_parts(&densities, &anns, &psnrs, &ssims, prof)
}
