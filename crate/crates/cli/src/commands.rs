use std::path::{Path, PathBuf};

use broker_core::checkpoint::Checkpoint;
use broker_core::counter::predict_count;
use broker_core::data::{load_dataset, load_fusion_ref, read_image, synth_generate, Manifest, Split};
use broker_core::metrics::{count_grid, inf_as_string, psnr, sentinel_mean, ssim};
use broker_core::train::study::ghost_images;
use broker_core::train::{
    center_crop, center_fit, evaluate, read_structured, report_from_parts, run_distill, run_finetune, FullModel, Stage, DTYPE,
};
use broker_core::{DensityMap, Error, ModalImage, ModalPair, Modality, PointAnnotationSet, Result, SynthSpec, Teacher, TrainConfig};
use log::info;
use serde::{Deserialize, Serialize};

use crate::plot::{histogram, render_histograms, save, side_by_side, write_csv};
use crate::{Command, Common, TrainFlags};

/// Version tag of the `compare-ghost` table.
pub const GHOST_SCHEMA_VERSION: u32 = 1;

pub fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth {
            out,
            n,
            misalign,
            illum,
            size,
            aux,
            common,
        } => synth(&out, n, misalign, illum, size, aux.as_deref(), &common),
        Command::Distill {
            data,
            teacher,
            out,
            init,
            train,
            common,
        } => distill(data, &teacher, out, init, &train, &common),
        Command::Finetune {
            data,
            bmg,
            out,
            no_distill,
            freeze_bmg,
            no_cma,
            no_broker,
            train,
            common,
        } => {
            let mut cfg = train_config(&common, &train, Stage::Finetune, data, out)?;
            cfg.ablations.no_distill |= no_distill;
            cfg.ablations.freeze_bmg |= freeze_bmg;
            cfg.ablations.no_cma |= no_cma;
            cfg.ablations.no_broker |= no_broker;
            finetune(cfg, bmg)
        }
        Command::Eval {
            data,
            ckpt,
            out,
            oracle_density,
            no_profile,
            common,
        } => eval(data, ckpt, out, oracle_density, !no_profile, &common),
        Command::Fuse {
            rgb,
            aux,
            ckpt,
            out,
            common,
        } => fuse(&rgb, &aux, ckpt, &out, &common),
        Command::Count { rgb, aux, ckpt, common } => count(&rgb, &aux, ckpt, &common),
        Command::Hist {
            data,
            ckpt,
            out,
            bins,
            png,
            common,
        } => hist(data, ckpt, out, bins, png, &common),
        Command::CompareGhost { data, ckpt, out, common } => compare_ghost(data, ckpt, out, &common),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path.display().to_string(), e))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn required(value: Option<PathBuf>, flag: &str) -> Result<PathBuf> {
    value.ok_or_else(|| Error::Config(format!("--{flag} is required (or set it under [paths] in the config)")))
}

/// Path settings from the config file, for commands that take no training
/// config of their own. Flags still win.
fn config_paths(common: &Common) -> Result<broker_core::train::Paths> {
    match common.config_path() {
        Some(p) => Ok(TrainConfig::from_file(&p)?.paths),
        None => Ok(Default::default()),
    }
}

fn train_config(common: &Common, flags: &TrainFlags, stage: Stage, data: Option<PathBuf>, out: Option<PathBuf>) -> Result<TrainConfig> {
    let mut cfg = match common.config_path() {
        Some(p) => TrainConfig::from_file_for(&p, Some(stage))?,
        None => TrainConfig::profile_for(&flags.profile, stage)?,
    };
    if cfg.stage != stage {
        return Err(Error::Config(format!("config is for stage {:?}, command runs {stage:?}", cfg.stage)));
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(lr) = flags.lr {
        cfg.lr = lr;
    }
    if let Some(e) = flags.epochs {
        cfg.max_epochs = e;
    }
    if flags.steps.is_some() {
        cfg.max_steps = flags.steps;
    }
    if data.is_some() {
        cfg.paths.data = data;
    }
    if out.is_some() {
        cfg.paths.ckpt = out;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn synth(
    out: &Path,
    n: Option<usize>,
    misalign: Option<f64>,
    illum: Option<f64>,
    size: Option<usize>,
    aux: Option<&str>,
    common: &Common,
) -> Result<()> {
    let mut spec: SynthSpec = match common.config_path() {
        Some(p) => serde_json::from_value(read_structured(&p)?).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
        None => SynthSpec::default(),
    };
    if let Some(n) = n {
        spec.n_images = n;
    }
    if let Some(m) = misalign {
        spec.misalign_px = m;
    }
    if let Some(i) = illum {
        spec.illumination = i;
    }
    if let Some(s) = size {
        spec.image_size = (s, s);
    }
    if let Some(a) = aux {
        spec.aux_modality = match a {
            "thermal" => Modality::Thermal,
            "depth" => Modality::Depth,
            other => return Err(Error::Config(format!("--aux must be thermal or depth, got `{other}`"))),
        };
    }
    if let Some(s) = common.seed {
        spec.seed = s;
    }
    let ds = synth_generate(&spec, out)?;
    println!(
        "wrote {} pairs ({} train, {} test) to {}",
        ds.pairs.len(),
        ds.manifest.train.len(),
        ds.manifest.test.len(),
        out.display()
    );
    Ok(())
}

fn distill(data: Option<PathBuf>, teacher: &str, out: Option<PathBuf>, init: Option<PathBuf>, flags: &TrainFlags, common: &Common) -> Result<()> {
    let cfg = train_config(common, flags, Stage::Distill, data, out)?;
    let root = required(cfg.paths.data.clone(), "data")?;
    required(cfg.paths.ckpt.clone(), "out")?;
    let teacher = Teacher::parse(teacher)?;
    let pairs = load_dataset(&root, Split::Train)?;
    let init = init.map(|p| Checkpoint::load(&p)?.bmg(DTYPE)).transpose()?;
    let run = run_distill(&cfg, &teacher, &pairs, init)?;
    let best = &run.log[run.best_epoch.min(run.log.len().saturating_sub(1))];
    println!("best epoch {} mse {:.6}", run.best_epoch, best.train_loss);
    Ok(())
}

fn finetune(cfg: TrainConfig, bmg: Option<PathBuf>) -> Result<()> {
    cfg.validate()?;
    let root = required(cfg.paths.data.clone(), "data")?;
    required(cfg.paths.ckpt.clone(), "out")?;
    let bmg = match bmg {
        Some(p) if !cfg.ablations.no_broker => Some(Checkpoint::load(&p)?.bmg(DTYPE)?),
        _ => None,
    };
    let train = load_dataset(&root, Split::Train)?;
    let test = load_dataset(&root, Split::Test)?;
    let run = run_finetune(&cfg, bmg, &train, &test)?;
    let best = &run.log[run.best_epoch.min(run.log.len().saturating_sub(1))];
    match best.test_game0 {
        Some(g) => println!("best epoch {} game0 {g:.4}", run.best_epoch),
        None => println!("best epoch {} loss {:.4}", run.best_epoch, best.train_loss),
    }
    Ok(())
}

fn test_split(root: &Path) -> Result<Vec<ModalPair>> {
    let pairs = load_dataset(root, Split::Test)?;
    if pairs.is_empty() {
        return Err(Error::Invalid(format!("{} has no test split", root.display())));
    }
    Ok(pairs)
}

/// Reference fusions for every pair, or `None` if any is missing.
fn all_refs(root: &Path, pairs: &[ModalPair]) -> Result<Option<Vec<ModalImage>>> {
    let refs: Vec<Option<ModalImage>> = pairs.iter().map(|p| load_fusion_ref(root, &p.id)).collect::<Result<_>>()?;
    Ok(refs.into_iter().collect())
}

/// Density that puts each annotated point's unit mass in its own cell.
pub fn oracle_density(ann: &PointAnnotationSet, height: usize, width: usize, stride: usize) -> Result<DensityMap> {
    let (gh, gw) = (height.div_ceil(stride), width.div_ceil(stride));
    DensityMap::new(gh, gw, stride, count_grid(ann, gh, gw, stride))
}

fn eval(data: Option<PathBuf>, ckpt: Option<PathBuf>, out: Option<PathBuf>, oracle: bool, profile: bool, common: &Common) -> Result<()> {
    let paths = config_paths(common)?;
    let root = required(data.or(paths.data), "data")?;
    let out = required(out.or(paths.out), "out")?;
    let pairs = test_split(&root)?;
    let report = if oracle {
        let stride = 8;
        let dens = pairs
            .iter()
            .map(|p| oracle_density(&p.annotations, p.height(), p.width(), stride))
            .collect::<Result<Vec<_>>>()?;
        let anns: Vec<_> = pairs.iter().map(|p| p.annotations.clone()).collect();
        report_from_parts(&dens, &anns, &[], &[], None)?
    } else {
        let ckpt = required(ckpt.or(paths.ckpt), "ckpt")?;
        let model = FullModel::from_checkpoint(&Checkpoint::load(&ckpt)?)?;
        let refs = all_refs(&root, &pairs)?;
        evaluate(&model, &pairs, refs.as_deref(), profile)?
    };
    write_json(&out, &report)?;
    println!("game0 {:.4} rmse {:.4} -> {}", report.game[&0], report.rmse, out.display());
    Ok(())
}

fn input_pair(rgb: &Path, aux: &Path) -> Result<ModalPair> {
    let rgb = read_image(rgb, Modality::Rgb)?;
    let aux = read_image(aux, Modality::Thermal)?;
    ModalPair::new("input", rgb, aux, PointAnnotationSet::default())
}

fn fuse(rgb: &Path, aux: &Path, ckpt: Option<PathBuf>, out: &Path, common: &Common) -> Result<()> {
    let ckpt = required(ckpt.or(config_paths(common)?.ckpt), "ckpt")?;
    let bmg = Checkpoint::load(&ckpt)?.bmg(DTYPE)?;
    let pair = center_fit(&input_pair(rgb, aux)?, bmg.config().input_size.0)?;
    save(out, &bmg.fuse(&pair.rgb, &pair.aux)?)
}

fn count(rgb: &Path, aux: &Path, ckpt: Option<PathBuf>, common: &Common) -> Result<()> {
    let ckpt = required(ckpt.or(config_paths(common)?.ckpt), "ckpt")?;
    let model = FullModel::from_checkpoint(&Checkpoint::load(&ckpt)?)?;
    let pair = center_fit(&input_pair(rgb, aux)?, model.input_size().0)?;
    println!("{}", predict_count(&model.density(&pair)?));
    Ok(())
}

fn aux_label(root: &Path) -> Result<&'static str> {
    Ok(match Manifest::read(root)?.aux_modality {
        Modality::Depth => "depth",
        _ => "thermal",
    })
}

fn hist(data: Option<PathBuf>, ckpt: Option<PathBuf>, out: Option<PathBuf>, bins: usize, png: bool, common: &Common) -> Result<()> {
    let paths = config_paths(common)?;
    let root = required(data.or(paths.data), "data")?;
    let out = required(out.or(paths.out), "out")?;
    let ckpt = required(ckpt.or(paths.ckpt), "ckpt")?;
    let bmg = Checkpoint::load(&ckpt)?.bmg(DTYPE)?;
    let side = bmg.config().input_size.0;
    let pairs = load_dataset(&root, Split::Train)?;
    let (mut vis, mut brk, mut aux) = (Vec::new(), Vec::new(), Vec::new());
    for raw in &pairs {
        let p = center_fit(raw, side)?;
        vis.push(p.rgb.mean_intensity());
        brk.push(bmg.fuse(&p.rgb, &p.aux)?.mean_intensity());
        aux.push(p.aux.mean_intensity());
    }
    let hists = [
        histogram("visible", &vis, bins),
        histogram("broker", &brk, bins),
        histogram(aux_label(&root)?, &aux, bins),
    ];
    create_dir(&out)?;
    write_csv(&out.join("hist.csv"), &out.join("hist_means.csv"), &hists)?;
    if png {
        save(&out.join("hist.png"), &render_histograms(&hists)?)?;
    }
    for h in &hists {
        println!("{} mean {:.4}", h.label, h.mean);
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GhostImageRow {
    pub id: String,
    #[serde(with = "inf_as_string")]
    pub teacher_psnr: f64,
    #[serde(with = "inf_as_string")]
    pub broker_psnr: f64,
    pub teacher_ssim: f64,
    pub broker_ssim: f64,
}

/// `compare-ghost` output. Means skip infinite PSNR values and are `"inf"`
/// only when every value is infinite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GhostTable {
    pub schema_version: u32,
    pub n_images: usize,
    #[serde(with = "inf_as_string")]
    pub teacher_psnr: f64,
    #[serde(with = "inf_as_string")]
    pub broker_psnr: f64,
    pub teacher_ssim: f64,
    pub broker_ssim: f64,
    pub images: Vec<GhostImageRow>,
}

fn finite_mean(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    sentinel_mean(&v).0.unwrap_or(f64::INFINITY)
}

fn compare_ghost(data: Option<PathBuf>, ckpt: Option<PathBuf>, out: Option<PathBuf>, common: &Common) -> Result<()> {
    let paths = config_paths(common)?;
    let root = required(data.or(paths.data), "data")?;
    let out = required(out.or(paths.out), "out")?;
    let ckpt = required(ckpt.or(paths.ckpt), "ckpt")?;
    let bmg = Checkpoint::load(&ckpt)?.bmg(DTYPE)?;
    let side = bmg.config().input_size.0;
    let pairs = test_split(&root)?;
    for sub in ["teacher", "broker", "reference", "triptych"] {
        create_dir(&out.join(sub))?;
    }
    let mut rows = Vec::with_capacity(pairs.len());
    for raw in &pairs {
        let reference = load_fusion_ref(&root, &raw.id)?.ok_or_else(|| Error::MissingReference(raw.id.clone()))?;
        let pair = center_fit(raw, side)?;
        let reference = center_crop(&reference, side)?;
        let (teacher, broker) = ghost_images(&bmg, &pair)?;
        let name = format!("{}.png", pair.id);
        save(&out.join("teacher").join(&name), &teacher)?;
        save(&out.join("broker").join(&name), &broker)?;
        save(&out.join("reference").join(&name), &reference)?;
        save(&out.join("triptych").join(&name), &side_by_side(&[&teacher, &broker, &reference])?)?;
        rows.push(GhostImageRow {
            id: pair.id.clone(),
            teacher_psnr: psnr(&teacher, &reference)?,
            broker_psnr: psnr(&broker, &reference)?,
            teacher_ssim: ssim(&teacher, &reference)?,
            broker_ssim: ssim(&broker, &reference)?,
        });
        info!("{}: teacher {:.2} dB, broker {:.2} dB", pair.id, rows.last().unwrap().teacher_psnr, rows.last().unwrap().broker_psnr);
    }
    let n = rows.len() as f64;
    let table = GhostTable {
        schema_version: GHOST_SCHEMA_VERSION,
        n_images: rows.len(),
        teacher_psnr: finite_mean(rows.iter().map(|r| r.teacher_psnr)),
        broker_psnr: finite_mean(rows.iter().map(|r| r.broker_psnr)),
        teacher_ssim: rows.iter().map(|r| r.teacher_ssim).sum::<f64>() / n,
        broker_ssim: rows.iter().map(|r| r.broker_ssim).sum::<f64>() / n,
        images: rows,
    };
    write_json(&out.join("ghost.json"), &table)?;
    println!(
        "teacher {:.2} dB / {:.3}, broker {:.2} dB / {:.3}",
        table.teacher_psnr, table.teacher_ssim, table.broker_psnr, table.broker_ssim
    );
    Ok(())
}
