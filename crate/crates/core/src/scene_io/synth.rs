//! Seeded synthetic scenes: oriented disks on a sphere seen from a ring of cameras.

use nalgebra::{Unit, UnitQuaternion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::compositing::OpacityActivation;
use crate::crossnet::CrossSectionNetwork;
use crate::error::{Error, Result};
use crate::geometry::{Camera, GaussianPrimitive, Material, Vec3};
use crate::scene_io::Scene;
use crate::shading::LightRig;

/// Generator settings. As a TOML table every field is optional and falls back to the default.
#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub count: usize,
    /// Radius of the sphere the Gaussians sit on.
    pub extent: f64,
    /// Tangential scale as a fraction of the mean spacing between neighbours.
    pub footprint: f64,
    /// Scale along the normal relative to the tangential scale.
    pub flatness: f64,
    pub opacity_range: [f64; 2],
    pub albedo_range: [f64; 2],
    pub roughness_range: [f64; 2],
    pub metallic_range: [f64; 2],
    pub camera_count: usize,
    pub camera_radius: f64,
    /// Ring elevation above the equator, in radians.
    pub camera_elevation: f64,
    /// Horizontal field of view, in radians.
    pub field_of_view: f64,
    pub width: usize,
    pub height: usize,
    /// Extra views placed between the training views at a different elevation.
    pub held_out: usize,
    pub background: [f64; 3],
    pub with_network: bool,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            count: 64,
            extent: 1.0,
            footprint: 0.6,
            flatness: 0.25,
            opacity_range: [0.6, 0.95],
            albedo_range: [0.1, 0.9],
            roughness_range: [0.3, 0.9],
            metallic_range: [0.0, 0.3],
            camera_count: 16,
            camera_radius: 4.0,
            camera_elevation: 0.35,
            field_of_view: 0.8,
            width: 64,
            height: 64,
            held_out: 0,
            background: [0.0; 3],
            with_network: true,
            seed: 0,
        }
    }
}

fn check_range(name: &str, r: [f64; 2], lo: f64, hi: f64) -> Result<()> {
    if !(lo <= r[0] && r[0] <= r[1] && r[1] <= hi) {
        return Err(Error::invalid(format!(
            "{name} range {r:?} must lie within [{lo}, {hi}]"
        )));
    }
    Ok(())
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 || self.camera_count == 0 || self.width == 0 || self.height == 0 {
            return Err(Error::invalid(
                "gaussian count, camera count and image size must be positive",
            ));
        }
        for (name, v) in [
            ("extent", self.extent),
            ("footprint", self.footprint),
            ("flatness", self.flatness),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.camera_radius > self.extent * 1.5) {
            return Err(Error::invalid("camera radius must clear the object"));
        }
        if !(self.camera_elevation.abs() < 1.4) {
            return Err(Error::invalid(
                "camera elevation must stay away from the poles",
            ));
        }
        if !(self.field_of_view > 0.0 && self.field_of_view < 3.0) {
            return Err(Error::invalid("field of view must lie in (0, 3) radians"));
        }
        check_range("opacity", self.opacity_range, 1e-3, 1.0 - 1e-3)?;
        check_range("albedo", self.albedo_range, 0.0, 1.0)?;
        check_range("roughness", self.roughness_range, 0.0, 1.0)?;
        check_range("metallic", self.metallic_range, 0.0, 1.0)?;
        if self.background.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("background must be finite"));
        }
        Ok(())
    }

    fn focal(&self) -> f64 {
        self.width as f64 / 2.0 / (self.field_of_view / 2.0).tan()
    }

    fn ring(&self, count: usize, phase: f64, elevation: f64) -> Result<Vec<Camera>> {
        (0..count)
            .map(|k| {
                let az = std::f64::consts::TAU * (k as f64 + phase) / count as f64;
                let (r, e) = (self.camera_radius, elevation);
                let pos = Vec3::new(r * e.cos() * az.sin(), r * e.sin(), r * e.cos() * az.cos());
                Camera::look_at(
                    pos,
                    Vec3::zeros(),
                    Vec3::y(),
                    self.focal(),
                    self.width,
                    self.height,
                )
            })
            .collect()
    }

    pub fn training_cameras(&self) -> Result<Vec<Camera>> {
        self.ring(self.camera_count, 0.0, self.camera_elevation)
    }

    pub fn held_out_cameras(&self) -> Result<Vec<Camera>> {
        self.ring(self.held_out, 0.5, -0.5 * self.camera_elevation)
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Fibonacci lattice on the unit sphere.
fn sphere_point(i: usize, n: usize) -> Vec3 {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
    let rad = (1.0 - y * y).sqrt();
    let theta = golden * i as f64;
    Vec3::new(rad * theta.cos(), y, rad * theta.sin())
}

/// Scalar-first quaternion taking +z to `normal`, then twisted by `twist` about it.
fn orient(normal: &Vec3, twist: f64) -> [f64; 4] {
    let base = UnitQuaternion::rotation_between(&Vec3::z(), normal)
        .unwrap_or_else(|| UnitQuaternion::from_axis_angle(&Vec3::x_axis(), std::f64::consts::PI));
    let q = UnitQuaternion::from_axis_angle(&Unit::new_normalize(*normal), twist) * base;
    [q.w, q.i, q.j, q.k]
}

/// Builds the scene and its training cameras (also stored in `scene.cameras`).
pub fn generate_synthetic_scene(spec: &SceneSpec) -> Result<(Scene, Vec<Camera>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.count;
    let spacing = spec.extent * (4.0 * std::f64::consts::PI / n as f64).sqrt();
    let tangential = if n == 1 {
        spec.extent * 0.5
    } else {
        spacing * spec.footprint
    };
    let mut draw = |r: [f64; 2]| {
        if r[0] == r[1] {
            r[0]
        } else {
            rng.random_range(r[0]..=r[1])
        }
    };

    let mut gaussians = Vec::with_capacity(n);
    for i in 0..n {
        let (mean, normal) = if n == 1 {
            (Vec3::zeros(), Vec3::z())
        } else {
            let p = sphere_point(i, n);
            (p * spec.extent, p)
        };
        let twist = draw([0.0, std::f64::consts::TAU]);
        let opacity = draw(spec.opacity_range);
        let albedo = [
            draw(spec.albedo_range),
            draw(spec.albedo_range),
            draw(spec.albedo_range),
        ];
        let material = Material::new(
            albedo,
            draw(spec.roughness_range),
            draw(spec.metallic_range),
        );
        gaussians.push(GaussianPrimitive {
            mean,
            rotation: orient(&normal, twist),
            scale: Vec3::new(tangential, tangential, tangential * spec.flatness),
            raw_opacity: logit(opacity),
            material,
            normal,
        });
    }

    let network = if spec.with_network {
        Some(CrossSectionNetwork::init(
            spec.seed.wrapping_add(0x9e37_79b9),
            Material::FEATURE_DIM,
        )?)
    } else {
        None
    };
    let cameras = spec.training_cameras()?;
    let scene = Scene {
        gaussians,
        lights: LightRig::default_rig(),
        background: spec.background,
        opacity_activation: OpacityActivation::Sigmoid,
        network,
        cameras: cameras.clone(),
    };
    scene.validate()?;
    Ok((scene, cameras))
}
