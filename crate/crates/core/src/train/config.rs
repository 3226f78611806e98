use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bmg::BmgConfig;
use crate::counter::ExtractorConfig;
use crate::error::{Error, Result};
use crate::losses::DEFAULT_SIGMA;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    #[default]
    Distill,
    Finetune,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablations {
    /// Fine-tune from a randomly initialised generator.
    pub no_distill: bool,
    /// Keep generator weights fixed during fine-tuning.
    pub freeze_bmg: bool,
    /// Generator without the cross-modal attention branch.
    pub no_cma: bool,
    /// Skip the generator; the counter sums only RGB and auxiliary features.
    pub no_broker: bool,
}

impl Ablations {
    pub fn validate(&self) -> Result<()> {
        if self.no_broker && self.freeze_bmg {
            return Err(Error::Ablation("no_broker cannot be combined with freeze_bmg".into()));
        }
        if self.no_broker && self.no_cma {
            return Err(Error::Ablation("no_broker cannot be combined with no_cma".into()));
        }
        Ok(())
    }

    /// Single-switch variant by name: `full`, `no_distill`, `freeze_bmg`,
    /// `no_cma` or `no_broker`.
    pub fn from_label(label: &str) -> Result<Self> {
        let mut a = Self::default();
        match label {
            "full" => {}
            "no_distill" => a.no_distill = true,
            "freeze_bmg" => a.freeze_bmg = true,
            "no_cma" => a.no_cma = true,
            "no_broker" => a.no_broker = true,
            other => return Err(Error::Ablation(format!("unknown variant `{other}`"))),
        }
        Ok(a)
    }

    pub fn label(&self) -> &'static str {
        match (self.no_broker, self.no_cma, self.freeze_bmg, self.no_distill) {
            (true, ..) => "no_broker",
            (_, true, ..) => "no_cma",
            (_, _, true, _) => "freeze_bmg",
            (_, _, _, true) => "no_distill",
            _ => "full",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub ckpt: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Hard cap on optimizer steps across epochs; `None` runs every epoch.
    pub max_steps: Option<usize>,
    /// Square crop side; must equal the generator and extractor input size.
    pub crop: usize,
    /// Posterior Gaussian width in input pixels.
    pub sigma: f64,
    pub seed: u64,
    /// Weight of an optional broker-vs-average-fusion MSE term during
    /// fine-tuning. Zero leaves the counting loss alone.
    pub fusion_reg_weight: f64,
    pub ablations: Ablations,
    pub bmg: BmgConfig,
    pub extractor: ExtractorConfig,
    pub paths: Paths,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl TrainConfig {
    /// Full-size settings: 224 crops, Adam at 1e-5 with 1e-4 weight decay,
    /// batch 1, 400 epochs.
    pub fn paper() -> Self {
        Self {
            stage: Stage::Distill,
            lr: 1e-5,
            weight_decay: 1e-4,
            batch_size: 1,
            max_epochs: 400,
            max_steps: None,
            crop: 224,
            sigma: DEFAULT_SIGMA,
            seed: 0,
            fusion_reg_weight: 0.0,
            ablations: Ablations::default(),
            bmg: BmgConfig::default(),
            extractor: ExtractorConfig::default(),
            paths: Paths::default(),
        }
    }

    /// CPU-sized profile for synthetic 64x64 data with tiny networks.
    pub fn desk() -> Self {
        Self {
            lr: 1e-3,
            max_epochs: 50,
            crop: 64,
            bmg: BmgConfig::tiny(),
            extractor: ExtractorConfig::tiny(),
            ..Self::paper()
        }
    }

    /// [`TrainConfig::desk`] for the fine-tuning stage, at a lower rate.
    pub fn desk_finetune() -> Self {
        Self {
            stage: Stage::Finetune,
            lr: 1e-4,
            ..Self::desk()
        }
    }

    pub fn profile(name: &str) -> Result<Self> {
        Self::profile_for(name, Stage::Distill)
    }

    /// Named profile with the stage set; the desk rate depends on the stage.
    pub fn profile_for(name: &str, stage: Stage) -> Result<Self> {
        let cfg = match (name, stage) {
            ("paper", _) => Self::paper(),
            ("desk", Stage::Distill) => Self::desk(),
            ("desk", Stage::Finetune) => Self::desk_finetune(),
            (other, _) => return Err(Error::Config(format!("unknown profile `{other}` (expected paper or desk)"))),
        };
        Ok(Self { stage, ..cfg })
    }

    /// Read a TOML or JSON file, chosen by extension (`.json` is JSON,
    /// anything else TOML). Missing fields take [`TrainConfig::paper`] values
    /// unless the file sets `profile = "desk"` at top level.
    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_file_for(path, None)
    }

    /// As [`TrainConfig::from_file`]; `stage` picks the profile variant when
    /// the file does not set `stage` itself, and overrides nothing else.
    pub fn from_file_for(path: &Path, stage: Option<Stage>) -> Result<Self> {
        let mut value = read_structured(path)?;
        let file_stage = match value.get("stage") {
            Some(v) => Some(serde_json::from_value::<Stage>(v.clone()).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?),
            None => None,
        };
        let stage = file_stage.or(stage).unwrap_or_default();
        let base = match value.as_object_mut().and_then(|o| o.remove("profile")) {
            Some(serde_json::Value::String(p)) => Self::profile_for(&p, stage)?,
            Some(_) => return Err(Error::Config("`profile` must be a string".into())),
            None => Self::profile_for("paper", stage)?,
        };
        let mut merged = serde_json::to_value(&base).map_err(|e| Error::json("config", e))?;
        merge(&mut merged, value);
        let cfg: Self = serde_json::from_value(merged).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be > 0".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::Config("sigma must be > 0".into()));
        }
        let crop = (self.crop, self.crop);
        if self.bmg.input_size != crop || self.extractor.input_size != crop {
            return Err(Error::Config(format!(
                "crop {} must match generator input {:?} and extractor input {:?}",
                self.crop, self.bmg.input_size, self.extractor.input_size
            )));
        }
        self.bmg.validate()?;
        self.extractor.validate()?;
        self.ablations.validate()
    }

    /// Generator config with the `no_cma` ablation applied.
    pub fn effective_bmg(&self) -> crate::bmg::BmgConfig {
        let mut c = self.bmg.clone();
        if self.ablations.no_cma {
            c.use_cma = false;
        }
        c
    }
}

/// Parse a TOML or JSON file (by extension: `.json` is JSON, anything else
/// TOML) into a JSON value.
pub fn read_structured(path: &Path) -> Result<serde_json::Value> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    if is_json {
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
    } else {
        let t: toml::Value = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        serde_json::to_value(t).map_err(|e| Error::json(path.display().to_string(), e))
    }
}

fn merge(base: &mut serde_json::Value, over: serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}
