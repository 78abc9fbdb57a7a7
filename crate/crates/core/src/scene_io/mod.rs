//! Scenes, their text serialization, images, metrics and the synthetic
//! ground-truth generator.

mod dataset;
mod format;
pub mod image;
pub mod metrics;
mod synth;

pub use dataset::{
    load_dataset, save_dataset, Dataset, DatasetView, Split, DATASET_FORMAT, DATASET_VERSION,
    MANIFEST_NAME,
};
pub use format::{
    load_scene, parse_scene, save_scene, scene_to_string, SCENE_FORMAT, SCENE_VERSION,
};
pub use image::{read_image, write_image, ImageBuffer};
pub use metrics::{psnr, ssim, standardized_mse, PSNR_SENTINEL_DB};
pub use synth::{generate_synthetic_scene, SceneSpec};

use crate::compositing::OpacityActivation;
use crate::crossnet::CrossSectionNetwork;
use crate::error::{Error, Result};
use crate::geometry::{Camera, GaussianPrimitive};
use crate::shading::LightRig;

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub gaussians: Vec<GaussianPrimitive>,
    pub lights: LightRig,
    pub background: [f64; 3],
    pub opacity_activation: OpacityActivation,
    pub network: Option<CrossSectionNetwork>,
    /// Viewpoints stored alongside the scene; rendering can also use external cameras.
    pub cameras: Vec<Camera>,
}

impl Scene {
    pub fn empty(lights: LightRig) -> Self {
        Scene {
            gaussians: Vec::new(),
            lights,
            background: [0.0; 3],
            opacity_activation: OpacityActivation::Sigmoid,
            network: None,
            cameras: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (i, g) in self.gaussians.iter().enumerate() {
            g.validate()
                .map_err(|e| Error::invalid(format!("gaussian {i}: {e}")))?;
        }
        self.lights.validate()?;
        for c in &self.cameras {
            c.validate()?;
        }
        if self.background.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("background must be finite"));
        }
        if let Some(net) = &self.network {
            if net.input_dim() != crate::geometry::Material::FEATURE_DIM {
                return Err(Error::invalid(format!(
                    "network takes {} inputs, materials provide {}",
                    net.input_dim(),
                    crate::geometry::Material::FEATURE_DIM
                )));
            }
        }
        Ok(())
    }

    pub fn network(&self) -> Result<&CrossSectionNetwork> {
        self.network
            .as_ref()
            .ok_or_else(|| Error::invalid("network required for omg mode"))
    }

    pub fn opacity(&self, index: usize) -> f64 {
        self.opacity_activation
            .apply(self.gaussians[index].raw_opacity)
    }
}
