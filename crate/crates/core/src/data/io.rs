use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Modality, ModalImage, ModalPair, PointAnnotationSet};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// `manifest.json`: ids per split, plus the auxiliary modality of the set.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub train: Vec<String>,
    pub test: Vec<String>,
    #[serde(default = "default_aux", skip_serializing_if = "is_thermal")]
    pub aux_modality: Modality,
}

fn default_aux() -> Modality {
    Modality::Thermal
}

fn is_thermal(m: &Modality) -> bool {
    *m == Modality::Thermal
}

impl Manifest {
    pub fn read(root: &Path) -> Result<Self> {
        let path = root.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
    }

    pub fn ids(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct AnnotationFile {
    pub points: Vec<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub misalignment: Option<[f64; 2]>,
}

pub fn read_image(path: &Path, modality: Modality) -> Result<ModalImage> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    ModalImage::from_rgb8(h as usize, w as usize, img.as_raw(), modality)
}

pub fn write_image(path: &Path, img: &ModalImage) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    image::save_buffer(
        path,
        &img.to_rgb8(),
        img.width() as u32,
        img.height() as u32,
        image::ExtendedColorType::Rgb8,
    )
    .map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn parse_annotations(path: &Path) -> Result<AnnotationFile> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
}

/// Parse one `ann/<id>.json` file.
pub fn read_annotations(path: &Path) -> Result<PointAnnotationSet> {
    Ok(PointAnnotationSet::new(parse_annotations(path)?.points))
}

fn require(id: &str, path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::MissingFile {
            id: id.to_string(),
            path: path.to_path_buf(),
        })
    }
}

/// Load every pair listed for `split` in `root/manifest.json`.
pub fn load_dataset(root: &Path, split: Split) -> Result<Vec<ModalPair>> {
    let manifest = Manifest::read(root)?;
    manifest
        .ids(split)
        .iter()
        .map(|id| load_pair(root, id, manifest.aux_modality))
        .collect()
}

fn load_pair(root: &Path, id: &str, aux_modality: Modality) -> Result<ModalPair> {
    let rgb_path = root.join("rgb").join(format!("{id}.png"));
    let aux_path = root.join("aux").join(format!("{id}.png"));
    let ann_path = root.join("ann").join(format!("{id}.json"));
    for p in [&rgb_path, &aux_path, &ann_path] {
        require(id, p)?;
    }
    let rgb = read_image(&rgb_path, Modality::Rgb)?;
    let aux = read_image(&aux_path, aux_modality)?;
    let ann = parse_annotations(&ann_path)?;
    let mut pair = ModalPair::new(id, rgb, aux, PointAnnotationSet::new(ann.points))?;
    pair.misalignment = ann.misalignment.map(|[dx, dy]| (dx, dy));
    Ok(pair)
}

/// `root/fusion_ref/<id>.png` if present.
pub fn load_fusion_ref(root: &Path, id: &str) -> Result<Option<ModalImage>> {
    let path = root.join("fusion_ref").join(format!("{id}.png"));
    if !path.is_file() {
        return Ok(None);
    }
    read_image(&path, Modality::Broker).map(Some)
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path.display().to_string(), e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}
