//! Weight archives: a safetensors file whose `__metadata__` carries one JSON
//! header (`header` key) describing configs, stage, epoch and metrics.
//! Generator tensors are prefixed `bmg.`, counting-network tensors `counter.`.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::bmg::{Bmg, BmgConfig};
use crate::counter::{CountingNet, ExtractorConfig};
use crate::error::{Error, Result};
use crate::train::{Ablations, Stage};

pub const FORMAT_VERSION: u32 = 1;
const HEADER_KEY: &str = "header";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub stage: Stage,
    pub epoch: usize,
    pub bmg_config: Option<BmgConfig>,
    pub extractor_config: Option<ExtractorConfig>,
    /// Generator parameters, when the archive holds a generator.
    pub bmg_param_count: Option<usize>,
    pub param_count: usize,
    #[serde(default)]
    pub ablations: Ablations,
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
}

pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: BTreeMap<String, Tensor>,
}

fn prefixed(prefix: &str, tensors: BTreeMap<String, Tensor>) -> impl Iterator<Item = (String, Tensor)> + '_ {
    tensors.into_iter().map(move |(k, v)| (format!("{prefix}.{k}"), v))
}

fn sub_map(tensors: &BTreeMap<String, Tensor>, prefix: &str) -> BTreeMap<String, Tensor> {
    let p = format!("{prefix}.");
    tensors
        .iter()
        .filter_map(|(k, v)| k.strip_prefix(&p).map(|s| (s.to_string(), v.clone())))
        .collect()
}

impl Checkpoint {
    /// Snapshot the given models. `header.param_count` and
    /// `header.bmg_param_count` are filled in here.
    pub fn capture(mut header: CheckpointHeader, bmg: Option<&Bmg>, counter: Option<&CountingNet>) -> Result<Self> {
        let mut tensors = BTreeMap::new();
        header.param_count = 0;
        header.bmg_param_count = None;
        if let Some(b) = bmg {
            tensors.extend(prefixed("bmg", b.store().snapshot()?));
            header.bmg_config = Some(b.config().clone());
            header.bmg_param_count = Some(b.param_count());
            header.param_count += b.param_count();
        }
        if let Some(c) = counter {
            tensors.extend(prefixed("counter", c.store().snapshot()?));
            header.extractor_config = Some(c.config().clone());
            header.param_count += c.param_count();
        }
        Ok(Self { header, tensors })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_string(&self.header).map_err(|e| Error::json("checkpoint header", e))?;
        let meta = HashMap::from([(HEADER_KEY.to_string(), header)]);
        safetensors::serialize(self.tensors.iter(), Some(meta)).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (_, meta) = safetensors::SafeTensors::read_metadata(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let text = meta
            .metadata()
            .as_ref()
            .and_then(|m| m.get(HEADER_KEY))
            .ok_or_else(|| Error::Checkpoint("archive has no header".into()))?;
        let header: CheckpointHeader = serde_json::from_str(text).map_err(|e| Error::json("checkpoint header", e))?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {}", header.format_version)));
        }
        let tensors = candle_core::safetensors::load_buffer(bytes, &Device::Cpu)?.into_iter().collect();
        Ok(Self { header, tensors })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn has_bmg(&self) -> bool {
        self.header.bmg_param_count.is_some()
    }

    pub fn has_counter(&self) -> bool {
        self.tensors.keys().any(|k| k.starts_with("counter."))
    }

    /// Rebuild the generator stored in this archive.
    pub fn bmg(&self, dtype: DType) -> Result<Bmg> {
        let cfg = self
            .header
            .bmg_config
            .clone()
            .filter(|_| self.has_bmg())
            .ok_or_else(|| Error::Checkpoint("archive holds no generator".into()))?;
        let bmg = Bmg::new(cfg, dtype, 0)?;
        bmg.store().load(&sub_map(&self.tensors, "bmg"))?;
        Ok(bmg)
    }

    /// Rebuild the counting network stored in this archive.
    pub fn counter(&self, dtype: DType) -> Result<CountingNet> {
        let cfg = self
            .header
            .extractor_config
            .clone()
            .filter(|_| self.has_counter())
            .ok_or_else(|| Error::Checkpoint("archive holds no counting network".into()))?;
        let net = CountingNet::new(cfg, dtype, 0)?;
        net.store().load(&sub_map(&self.tensors, "counter"))?;
        Ok(net)
    }
}

/// Header with every optional field empty.
pub fn header(stage: Stage, epoch: usize) -> CheckpointHeader {
    CheckpointHeader {
        format_version: FORMAT_VERSION,
        stage,
        epoch,
        bmg_config: None,
        extractor_config: None,
        bmg_param_count: None,
        param_count: 0,
        ablations: Ablations::default(),
        metrics: BTreeMap::new(),
    }
}
