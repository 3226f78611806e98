use std::path::{Path, PathBuf};

use crate::data::{read_image, Modality, ModalImage, ModalPair};
use crate::error::{Error, Result};

/// Source of the fusion targets the generator is distilled from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Teacher {
    /// Pixelwise `0.5 * rgb + 0.5 * aux`, clipped to `[0, 1]`.
    BuiltinAverage,
    /// `<dir>/<id>.png` produced offline by an external fusion model.
    Precomputed(PathBuf),
}

impl Teacher {
    /// `builtin` or `dir:<path>`.
    pub fn parse(spec: &str) -> Result<Self> {
        if spec == "builtin" {
            Ok(Teacher::BuiltinAverage)
        } else if let Some(p) = spec.strip_prefix("dir:") {
            Ok(Teacher::Precomputed(PathBuf::from(p)))
        } else {
            Err(Error::Config(format!("teacher must be `builtin` or `dir:PATH`, got `{spec}`")))
        }
    }

    pub fn fuse(&self, pair: &ModalPair) -> Result<ModalImage> {
        match self {
            Teacher::BuiltinAverage => average_fusion(&pair.rgb, &pair.aux),
            Teacher::Precomputed(dir) => load_precomputed(dir, pair),
        }
    }
}

pub fn average_fusion(rgb: &ModalImage, aux: &ModalImage) -> Result<ModalImage> {
    if rgb.height() != aux.height() || rgb.width() != aux.width() {
        return Err(Error::Shape("teacher inputs differ in size".into()));
    }
    ModalImage::from_fn(rgb.height(), rgb.width(), Modality::Broker, |c, y, x| {
        0.5 * rgb.get(c, y, x) + 0.5 * aux.get(c, y, x)
    })
}

fn load_precomputed(dir: &Path, pair: &ModalPair) -> Result<ModalImage> {
    let path = dir.join(format!("{}.png", pair.id));
    if !path.is_file() {
        return Err(Error::MissingTeacher(pair.id.clone()));
    }
    let img = read_image(&path, Modality::Broker)?;
    if img.height() != pair.height() || img.width() != pair.width() {
        return Err(Error::SizeMismatch {
            id: pair.id.clone(),
            detail: format!(
                "teacher image is {}x{}, pair is {}x{}",
                img.height(),
                img.width(),
                pair.height(),
                pair.width()
            ),
        });
    }
    Ok(img)
}
