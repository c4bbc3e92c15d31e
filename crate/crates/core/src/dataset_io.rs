//! On-disk dataset layout.
//!
//! A dataset directory holds `manifest.json` and one raw file per scene:
//! `scene_NNNNN.f32` (little-endian `f32`, channel-major `3 x H x W`) and, for
//! labeled datasets only, `scene_NNNNN.u8` (one byte per pixel).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenegen::{DomainDataset, Scene};
use crate::segmodel::LabelMap;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn image_file(index: usize) -> String {
    format!("scene_{index:05}.f32")
}

pub fn label_file(index: usize) -> String {
    format!("scene_{index:05}.u8")
}

/// Label files present in `dir`.
pub fn label_files_in(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut found = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "u8") {
            found.push(path);
        }
    }
    found.sort();
    Ok(found)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub domain_id: String,
    pub num_classes: usize,
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub labeled: bool,
}

pub fn write_dataset(dir: &Path, ds: &DomainDataset) -> Result<DatasetManifest> {
    let (height, width) = ds
        .resolution()
        .ok_or_else(|| Error::Contract(format!("dataset `{}` is empty", ds.domain_id)))?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = DatasetManifest {
        domain_id: ds.domain_id.clone(),
        num_classes: ds.num_classes,
        count: ds.len(),
        height,
        width,
        labeled: ds.labeled,
    };
    for stale in label_files_in(dir)? {
        std::fs::remove_file(&stale).map_err(|e| Error::io(&stale, e))?;
    }
    for (i, scene) in ds.scenes.iter().enumerate() {
        if scene.image.shape() != [3, height, width] {
            return Err(Error::Contract(format!(
                "dataset `{}` mixes image shapes {:?} and {:?}",
                ds.domain_id,
                scene.image.shape(),
                [3, height, width]
            )));
        }
        let bytes: Vec<u8> = scene.image.data().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
        let path = dir.join(image_file(i));
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        if ds.labeled {
            let l = scene
                .labels
                .as_ref()
                .ok_or_else(|| Error::Contract(format!("labeled dataset `{}` has an unlabeled scene", ds.domain_id)))?;
            let path = dir.join(label_file(i));
            std::fs::write(&path, &l.ids).map_err(|e| Error::io(&path, e))?;
        }
    }
    let path = dir.join(MANIFEST_FILE);
    std::fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_dataset_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Loads a dataset. With `with_labels == false` label files are never
/// opened and the result is unlabeled.
pub fn read_dataset(dir: &Path, with_labels: bool) -> Result<DomainDataset> {
    let m = read_dataset_manifest(dir)?;
    if with_labels && !m.labeled {
        return Err(Error::Contract(format!("dataset `{}` has no labels", m.domain_id)));
    }
    let plane = m.height * m.width;
    let scenes = (0..m.count)
        .map(|i| {
            let path = dir.join(image_file(i));
            let raw = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            if raw.len() != 3 * plane * 4 {
                return Err(Error::Contract(format!(
                    "{}: expected {} bytes, found {}",
                    path.display(),
                    3 * plane * 4,
                    raw.len()
                )));
            }
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("four bytes")) as f64)
                .collect();
            let image = Tensor::new(vec![3, m.height, m.width], data)?;
            let labels = if with_labels {
                let path = dir.join(label_file(i));
                let ids = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
                if ids.len() != plane {
                    return Err(Error::Contract(format!("{}: expected {plane} bytes, found {}", path.display(), ids.len())));
                }
                Some(LabelMap::new(m.height, m.width, ids)?)
            } else {
                None
            };
            Ok(Scene { image, labels })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DomainDataset {
        domain_id: m.domain_id,
        num_classes: m.num_classes,
        scenes,
        labeled: with_labels,
    })
}
