//! Versioned TOML scene files.
//!
//! Required sections, in file order: `header`, `options`, `lights`, `cameras`
//! (may be empty), `gaussians` and `network`. Unknown keys are rejected.
//! Floats are written in shortest round-trip form, so a save/load cycle is
//! exact.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::compositing::OpacityActivation;
use crate::crossnet::{CrossSectionNetwork, DenseLayer};
use crate::error::{Error, Result};
use crate::geometry::{Camera, GaussianPrimitive, Mat3, Material, Vec3};
use crate::scene_io::Scene;
use crate::shading::{DirectionalLight, LightRig};

pub const SCENE_FORMAT: &str = "omg-scene";
pub const SCENE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneFile {
    header: Header,
    options: Options,
    lights: Lights,
    cameras: Vec<CameraEntry>,
    gaussians: Vec<GaussianEntry>,
    network: NetworkBlock,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    gaussian_count: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Options {
    background: [f64; 3],
    opacity_activation: OpacityActivation,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Lights {
    ambient: [f64; 3],
    directional: Vec<LightEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LightEntry {
    direction: [f64; 3],
    intensity: [f64; 3],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct CameraEntry {
    position: [f64; 3],
    /// Row-major world-to-camera rotation.
    rotation: [f64; 9],
    focal: [f64; 2],
    principal: [f64; 2],
    width: usize,
    height: usize,
    near: f64,
    far: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GaussianEntry {
    mean: [f64; 3],
    rotation: [f64; 4],
    scale: [f64; 3],
    raw_opacity: f64,
    albedo: [f64; 3],
    roughness: f64,
    metallic: f64,
    normal: [f64; 3],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetworkBlock {
    enabled: bool,
    layer_sizes: Vec<usize>,
    /// One flat row-major array per layer.
    weights: Option<Vec<Vec<f64>>>,
    biases: Option<Vec<Vec<f64>>>,
}

impl From<&Camera> for CameraEntry {
    fn from(c: &Camera) -> Self {
        let r = &c.rotation;
        CameraEntry {
            position: c.position.into(),
            rotation: std::array::from_fn(|i| r[(i / 3, i % 3)]),
            focal: c.focal,
            principal: c.principal,
            width: c.width,
            height: c.height,
            near: c.near,
            far: c.far,
        }
    }
}

impl From<&CameraEntry> for Camera {
    fn from(c: &CameraEntry) -> Self {
        Camera {
            position: Vec3::from(c.position),
            rotation: Mat3::from_row_slice(&c.rotation),
            focal: c.focal,
            principal: c.principal,
            width: c.width,
            height: c.height,
            near: c.near,
            far: c.far,
        }
    }
}

fn to_file(scene: &Scene) -> SceneFile {
    let network = match &scene.network {
        Some(net) => NetworkBlock {
            enabled: true,
            layer_sizes: net.layer_sizes(),
            weights: Some(net.layers().iter().map(|l| l.weights.clone()).collect()),
            biases: Some(net.layers().iter().map(|l| l.biases.clone()).collect()),
        },
        None => NetworkBlock {
            enabled: false,
            layer_sizes: Vec::new(),
            weights: None,
            biases: None,
        },
    };
    SceneFile {
        header: Header {
            format: SCENE_FORMAT.into(),
            version: SCENE_VERSION,
            gaussian_count: scene.gaussians.len(),
        },
        options: Options {
            background: scene.background,
            opacity_activation: scene.opacity_activation,
        },
        lights: Lights {
            ambient: scene.lights.ambient,
            directional: scene
                .lights
                .lights
                .iter()
                .map(|l| LightEntry {
                    direction: l.direction.into(),
                    intensity: l.intensity,
                })
                .collect(),
        },
        cameras: scene.cameras.iter().map(CameraEntry::from).collect(),
        gaussians: scene
            .gaussians
            .iter()
            .map(|g| GaussianEntry {
                mean: g.mean.into(),
                rotation: g.rotation,
                scale: g.scale.into(),
                raw_opacity: g.raw_opacity,
                albedo: g.material.albedo,
                roughness: g.material.roughness,
                metallic: g.material.metallic,
                normal: g.normal.into(),
            })
            .collect(),
        network,
    }
}

pub fn scene_to_string(scene: &Scene) -> Result<String> {
    let body = toml::to_string(&to_file(scene))
        .map_err(|e| Error::InvalidState(format!("scene serialization failed: {e}")))?;
    Ok(body)
}

pub fn save_scene(path: impl AsRef<Path>, scene: &Scene) -> Result<()> {
    let path = path.as_ref();
    let text = scene_to_string(scene)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_scene(path: impl AsRef<Path>) -> Result<Scene> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_scene(&text, &path.display().to_string())
}

pub(crate) fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Line of the first `key = ...` assignment, or 1.
fn line_of_key(text: &str, key: &str) -> usize {
    text.lines()
        .position(|l| l.trim_start().starts_with(key) && l.contains('='))
        .map_or(1, |i| i + 1)
}

pub fn parse_scene(text: &str, origin: &str) -> Result<Scene> {
    let err = |line: usize, message: String| Error::Parse {
        path: origin.to_string(),
        line,
        message,
    };
    let file: SceneFile = toml::from_str(text).map_err(|e| {
        let line = e.span().map_or(1, |s| line_of(text, s.start));
        err(line, e.message().trim().to_string())
    })?;

    let h = &file.header;
    if h.format != SCENE_FORMAT {
        return Err(err(
            line_of_key(text, "format"),
            format!("unknown format `{}`", h.format),
        ));
    }
    if h.version != SCENE_VERSION {
        return Err(err(
            line_of_key(text, "version"),
            format!(
                "unsupported version {}, expected {SCENE_VERSION}",
                h.version
            ),
        ));
    }
    if h.gaussian_count != file.gaussians.len() {
        return Err(err(
            line_of_key(text, "gaussian_count"),
            format!(
                "header declares {} gaussians but the gaussians section has {}",
                h.gaussian_count,
                file.gaussians.len()
            ),
        ));
    }

    let network_line = text
        .lines()
        .position(|l| l.trim() == "[network]")
        .map_or(1, |i| i + 1);
    let network = if file.network.enabled {
        let n = &file.network;
        let weights = n.weights.as_ref().ok_or_else(|| {
            err(
                network_line,
                "network section is missing field `weights`".into(),
            )
        })?;
        let biases = n.biases.as_ref().ok_or_else(|| {
            err(
                network_line,
                "network section is missing field `biases`".into(),
            )
        })?;
        if n.layer_sizes.len() < 2
            || weights.len() + 1 != n.layer_sizes.len()
            || biases.len() != weights.len()
        {
            return Err(err(
                network_line,
                "network layer arrays do not match `layer_sizes`".into(),
            ));
        }
        let layers = n
            .layer_sizes
            .windows(2)
            .zip(weights.iter().zip(biases))
            .map(|(w, (wt, b))| DenseLayer {
                inputs: w[0],
                outputs: w[1],
                weights: wt.clone(),
                biases: b.clone(),
            })
            .collect();
        Some(
            CrossSectionNetwork::from_layers(layers)
                .map_err(|e| err(network_line, e.to_string()))?,
        )
    } else {
        None
    };

    let lights = LightRig {
        ambient: file.lights.ambient,
        lights: file
            .lights
            .directional
            .iter()
            .map(|l| DirectionalLight {
                direction: Vec3::from(l.direction),
                intensity: l.intensity,
            })
            .collect(),
    };
    let cameras = file.cameras.iter().map(Camera::from).collect();
    let gaussians = file
        .gaussians
        .iter()
        .map(|g| GaussianPrimitive {
            mean: Vec3::from(g.mean),
            rotation: g.rotation,
            scale: Vec3::from(g.scale),
            raw_opacity: g.raw_opacity,
            material: Material::new(g.albedo, g.roughness, g.metallic),
            normal: Vec3::from(g.normal),
        })
        .collect();

    let scene = Scene {
        gaussians,
        lights,
        background: file.options.background,
        opacity_activation: file.options.opacity_activation,
        network,
        cameras,
    };
    scene.validate().map_err(|e| err(1, e.to_string()))?;
    Ok(scene)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene_io::{generate_synthetic_scene, SceneSpec};

    fn sample() -> Scene {
        let spec = SceneSpec {
            count: 6,
            ..SceneSpec::default()
        };
        generate_synthetic_scene(&spec).unwrap().0
    }

    #[test]
    fn roundtrip_is_exact() {
        let scene = sample();
        let text = scene_to_string(&scene).unwrap();
        let back = parse_scene(&text, "mem").unwrap();
        assert_eq!(back, scene);
        let bits = |s: &Scene| -> Vec<u64> {
            s.gaussians
                .iter()
                .flat_map(|g| {
                    g.mean
                        .iter()
                        .chain(&g.rotation)
                        .chain(g.scale.iter())
                        .chain(std::iter::once(&g.raw_opacity))
                        .map(|v| v.to_bits())
                        .collect::<Vec<_>>()
                })
                .chain(
                    s.network
                        .as_ref()
                        .unwrap()
                        .flat_params()
                        .iter()
                        .map(|v| v.to_bits()),
                )
                .collect()
        };
        assert_eq!(bits(&back), bits(&scene));
    }

    #[test]
    fn scene_without_network_roundtrips() {
        let mut scene = sample();
        scene.network = None;
        scene.cameras.clear();
        let back = parse_scene(&scene_to_string(&scene).unwrap(), "mem").unwrap();
        assert_eq!(back, scene);
    }

    #[test]
    fn truncation_names_missing_section() {
        let text = scene_to_string(&sample()).unwrap();
        let cut = text.find("[[gaussians]]").unwrap();
        let e = parse_scene(&text[..cut], "cut.toml").unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("gaussians"), "{msg}");
        assert!(matches!(e, Error::Parse { .. }));

        let cut = text.find("[network]").unwrap();
        let msg = parse_scene(&text[..cut], "cut.toml")
            .unwrap_err()
            .to_string();
        assert!(msg.contains("network"), "{msg}");
    }

    #[test]
    fn unknown_field_rejected_with_name() {
        let text = scene_to_string(&sample()).unwrap();
        let patched = text.replacen("raw_opacity =", "sparkle = 1.0\nraw_opacity =", 1);
        let e = parse_scene(&patched, "x.toml").unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("sparkle"), "{msg}");
        let Error::Parse { line, .. } = e else {
            panic!()
        };
        assert!(line > 1);
    }

    #[test]
    fn version_mismatch_rejected() {
        let text = scene_to_string(&sample()).unwrap();
        let patched = text.replacen("version = 1", "version = 7", 1);
        let e = parse_scene(&patched, "v.toml").unwrap_err();
        assert!(e.to_string().contains("unsupported version 7"), "{e}");
    }

    #[test]
    fn malformed_value_reports_line() {
        let text = scene_to_string(&sample()).unwrap();
        let patched = text.replacen("roughness = ", "roughness = \"rough\" #", 1);
        let Error::Parse { line, .. } = parse_scene(&patched, "m.toml").unwrap_err() else {
            panic!("expected parse error")
        };
        let expected = patched
            .lines()
            .position(|l| l.contains("\"rough\""))
            .unwrap()
            + 1;
        assert_eq!(line, expected);
    }
}
