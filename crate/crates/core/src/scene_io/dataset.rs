//! A directory of target views: float images plus a `manifest.toml` that
//! records each view's camera, split and optional ground-truth albedo map.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::compositing::OpacityMode;
use crate::error::{Error, Result};
use crate::geometry::Camera;
use crate::scene_io::format::{line_of, CameraEntry};
use crate::scene_io::image::{read_image, write_image, ImageBuffer};

pub const DATASET_FORMAT: &str = "omg-views";
pub const DATASET_VERSION: u32 = 1;
pub const MANIFEST_NAME: &str = "manifest.toml";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    HeldOut,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetView {
    pub camera: Camera,
    pub image: ImageBuffer,
    pub albedo: Option<ImageBuffer>,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// Mode the targets were rendered with, if known.
    pub mode: Option<OpacityMode>,
    pub views: Vec<DatasetView>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &DatasetView> {
        self.views.iter().filter(move |v| v.split == split)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    header: Header,
    views: Vec<ViewEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    mode: Option<OpacityMode>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ViewEntry {
    image: String,
    albedo: Option<String>,
    split: Split,
    camera: CameraEntry,
}

/// Writes `view_NNN.pfm`, `albedo_NNN.pfm` and the manifest; returns every path written.
pub fn save_dataset(dir: impl AsRef<Path>, dataset: &Dataset) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let mut entries = Vec::with_capacity(dataset.views.len());
    for (i, v) in dataset.views.iter().enumerate() {
        let image = format!("view_{i:03}.pfm");
        write_image(dir.join(&image), &v.image)?;
        written.push(dir.join(&image));
        let albedo = match &v.albedo {
            Some(a) => {
                let name = format!("albedo_{i:03}.pfm");
                write_image(dir.join(&name), a)?;
                written.push(dir.join(&name));
                Some(name)
            }
            None => None,
        };
        entries.push(ViewEntry {
            image,
            albedo,
            split: v.split,
            camera: CameraEntry::from(&v.camera),
        });
    }
    let manifest = Manifest {
        header: Header {
            format: DATASET_FORMAT.into(),
            version: DATASET_VERSION,
            mode: dataset.mode,
        },
        views: entries,
    };
    let text = toml::to_string(&manifest)
        .map_err(|e| Error::InvalidState(format!("manifest serialization failed: {e}")))?;
    let path = dir.join(MANIFEST_NAME);
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(written)
}

/// Reads a dataset directory. A missing image is reported with its path.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST_NAME);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let origin = path.display().to_string();
    let manifest: Manifest = toml::from_str(&text).map_err(|e| Error::Parse {
        path: origin.clone(),
        line: e.span().map_or(1, |s| line_of(&text, s.start)),
        message: e.message().trim().to_string(),
    })?;
    if manifest.header.format != DATASET_FORMAT || manifest.header.version != DATASET_VERSION {
        return Err(Error::Parse {
            path: origin,
            line: 1,
            message: format!(
                "expected {DATASET_FORMAT} version {DATASET_VERSION}, found {} version {}",
                manifest.header.format, manifest.header.version
            ),
        });
    }
    let mut views = Vec::with_capacity(manifest.views.len());
    for entry in &manifest.views {
        let camera = Camera::from(&entry.camera);
        camera.validate()?;
        let image = read_image(dir.join(&entry.image))?;
        let albedo = entry
            .albedo
            .as_ref()
            .map(|a| read_image(dir.join(a)))
            .transpose()?;
        for img in std::iter::once(&image).chain(albedo.as_ref()) {
            if img.width != camera.width || img.height != camera.height {
                return Err(Error::invalid(format!(
                    "{}: image is {}x{} but its camera is {}x{}",
                    entry.image, img.width, img.height, camera.width, camera.height
                )));
            }
        }
        views.push(DatasetView {
            camera,
            image,
            albedo,
            split: entry.split,
        });
    }
    Ok(Dataset {
        mode: manifest.header.mode,
        views,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec3;

    fn sample() -> Dataset {
        let cam = |x: f64| {
            Camera::look_at(Vec3::new(x, 0.5, 4.0), Vec3::zeros(), Vec3::y(), 20.0, 5, 4).unwrap()
        };
        let img = |v: f64| ImageBuffer::filled(5, 4, &[v, 0.25, 1.0 / 3.0]);
        Dataset {
            mode: Some(OpacityMode::Omg),
            views: vec![
                DatasetView {
                    camera: cam(0.0),
                    image: img(0.5),
                    albedo: Some(img(0.125)),
                    split: Split::Train,
                },
                DatasetView {
                    camera: cam(1.0),
                    image: img(0.75),
                    albedo: None,
                    split: Split::HeldOut,
                },
            ],
        }
    }

    #[test]
    fn roundtrip_at_single_precision() {
        let dir = tempfile::tempdir().unwrap();
        let data = sample();
        let written = save_dataset(dir.path(), &data).unwrap();
        assert_eq!(written.len(), 4);
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.mode, data.mode);
        assert_eq!(back.views.len(), 2);
        for (a, b) in back.views.iter().zip(&data.views) {
            assert_eq!(a.camera, b.camera);
            assert_eq!(a.split, b.split);
            assert_eq!(a.image, b.image.quantized_f32());
            assert_eq!(a.albedo, b.albedo.as_ref().map(|x| x.quantized_f32()));
        }
        assert_eq!(back.split(Split::HeldOut).count(), 1);
    }

    #[test]
    fn missing_image_is_named() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &sample()).unwrap();
        std::fs::remove_file(dir.path().join("view_001.pfm")).unwrap();
        let msg = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(msg.contains("view_001.pfm"), "{msg}");
    }
}
