//! Per-Gaussian outgoing radiance under a fixed rig of directional lights.
//!
//! The BRDF is Lambertian plus a normalized Blinn-Phong lobe. Metallic blends
//! the diffuse term out and tints the specular color from white toward the
//! albedo. Roughness sets the lobe exponent `p = 2/max(r², 1e-4) − 2`.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::geometry::{GaussianPrimitive, Material, Vec3};

const MIN_ROUGHNESS_SQ: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct DirectionalLight {
    /// Unit vector pointing from the surface toward the light.
    pub direction: Vec3,
    pub intensity: [f64; 3],
}

impl DirectionalLight {
    pub fn new(direction: Vec3, intensity: [f64; 3]) -> Result<Self> {
        let direction = direction
            .try_normalize(1e-12)
            .ok_or_else(|| Error::invalid("light direction must be nonzero"))?;
        let light = DirectionalLight {
            direction,
            intensity,
        };
        light.validate()?;
        Ok(light)
    }

    pub fn validate(&self) -> Result<()> {
        if (self.direction.norm() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("light direction is not unit length"));
        }
        if self.intensity.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::invalid(
                "light intensity must be finite and nonnegative",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LightRig {
    pub lights: Vec<DirectionalLight>,
    pub ambient: [f64; 3],
}

impl LightRig {
    pub fn validate(&self) -> Result<()> {
        for l in &self.lights {
            l.validate()?;
        }
        if self.ambient.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::invalid(
                "ambient light must be finite and nonnegative",
            ));
        }
        if self.lights.is_empty() && self.ambient.iter().all(|v| *v == 0.0) {
            return Err(Error::invalid(
                "light rig has no lights and no ambient term",
            ));
        }
        Ok(())
    }

    /// Three fixed white-ish lights plus a little ambient.
    pub fn default_rig() -> Self {
        let mk = |d: [f64; 3], i: [f64; 3]| DirectionalLight {
            direction: Vec3::from(d).normalize(),
            intensity: i,
        };
        LightRig {
            lights: vec![
                mk([0.5, -1.0, -0.6], [2.2, 2.1, 2.0]),
                mk([-0.8, -0.3, -0.4], [0.9, 1.0, 1.2]),
                mk([0.2, 0.6, 0.8], [0.6, 0.6, 0.6]),
            ],
            ambient: [0.15, 0.15, 0.15],
        }
    }
}

pub fn specular_exponent(roughness: f64) -> f64 {
    2.0 / (roughness * roughness).max(MIN_ROUGHNESS_SQ) - 2.0
}

fn specular_exponent_derivative(roughness: f64) -> f64 {
    if roughness * roughness > MIN_ROUGHNESS_SQ {
        -4.0 / (roughness * roughness * roughness)
    } else {
        0.0
    }
}

fn specular_color(m: &Material) -> [f64; 3] {
    m.albedo.map(|a| (1.0 - m.metallic) + m.metallic * a)
}

/// BRDF split into its two lobes.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BrdfParts {
    pub diffuse: [f64; 3],
    pub specular: [f64; 3],
}

impl BrdfParts {
    pub fn total(&self) -> [f64; 3] {
        std::array::from_fn(|c| self.diffuse[c] + self.specular[c])
    }
}

pub fn brdf_parts(m: &Material, l: &Vec3, v: &Vec3, n: &Vec3) -> BrdfParts {
    let (cos_l, cos_v) = (n.dot(l), n.dot(v));
    if cos_l <= 0.0 || cos_v <= 0.0 {
        return BrdfParts::default();
    }
    let h = (l + v).normalize();
    let p = specular_exponent(m.roughness);
    let lobe = (p + 8.0) / (8.0 * PI) * n.dot(&h).powf(p);
    let ks = specular_color(m);
    BrdfParts {
        diffuse: m.albedo.map(|a| a * (1.0 - m.metallic) / PI),
        specular: ks.map(|k| k * lobe),
    }
}

pub fn brdf_eval(m: &Material, l: &Vec3, v: &Vec3, n: &Vec3) -> [f64; 3] {
    brdf_parts(m, l, v, n).total()
}

/// Contributions of each lobe and the ambient term to a shaded color.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ShadeParts {
    pub diffuse: [f64; 3],
    pub specular: [f64; 3],
    pub ambient: [f64; 3],
}

impl ShadeParts {
    pub fn total(&self) -> [f64; 3] {
        std::array::from_fn(|c| self.diffuse[c] + self.specular[c] + self.ambient[c])
    }
}

pub fn shade_parts(g: &GaussianPrimitive, rig: &LightRig, view_dir: &Vec3) -> ShadeParts {
    let m = &g.material;
    let mut parts = ShadeParts {
        ambient: std::array::from_fn(|c| rig.ambient[c] * m.albedo[c]),
        ..Default::default()
    };
    for light in &rig.lights {
        let cos_l = g.normal.dot(&light.direction);
        if cos_l <= 0.0 {
            continue;
        }
        let f = brdf_parts(m, &light.direction, view_dir, &g.normal);
        for c in 0..3 {
            parts.diffuse[c] += light.intensity[c] * f.diffuse[c] * cos_l;
            parts.specular[c] += light.intensity[c] * f.specular[c] * cos_l;
        }
    }
    parts
}

/// `Σ_k I_k · f(l_k, v, m) · max(0, l_k·n) + ambient · albedo`.
pub fn shade(g: &GaussianPrimitive, rig: &LightRig, view_dir: &Vec3) -> [f64; 3] {
    shade_parts(g, rig, view_dir).total()
}

/// Gradients of [`shade`]. `material` is in feature order (albedo rgb, roughness, metallic).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ShadeGrad {
    pub material: [f64; 5],
    pub normal: Vec3,
    pub view: Vec3,
}

pub fn shade_backward(
    g: &GaussianPrimitive,
    rig: &LightRig,
    view_dir: &Vec3,
    dcolor: &[f64; 3],
) -> ShadeGrad {
    let m = &g.material;
    let n = &g.normal;
    let v = view_dir;
    let mut grad = ShadeGrad::default();
    for c in 0..3 {
        grad.material[c] += dcolor[c] * rig.ambient[c];
    }
    let p = specular_exponent(m.roughness);
    let dp_dr = specular_exponent_derivative(m.roughness);
    let norm = (p + 8.0) / (8.0 * PI);
    let ks = specular_color(m);

    for light in &rig.lights {
        let l = &light.direction;
        let (cos_l, cos_v) = (n.dot(l), n.dot(v));
        if cos_l <= 0.0 || cos_v <= 0.0 {
            continue;
        }
        let sum = l + v;
        let len = sum.norm();
        let h = sum / len;
        let nh = n.dot(&h);
        let pow = nh.powf(p);
        let lobe = norm * pow;

        let mut d_cos_l = 0.0;
        let mut d_p = 0.0;
        let mut d_nh = 0.0;
        for c in 0..3 {
            // upstream on the BRDF value of channel c
            let gc = dcolor[c] * light.intensity[c] * cos_l;
            let f = m.albedo[c] * (1.0 - m.metallic) / PI + ks[c] * lobe;
            d_cos_l += dcolor[c] * light.intensity[c] * f;
            grad.material[c] += gc * ((1.0 - m.metallic) / PI + m.metallic * lobe);
            grad.material[4] += gc * (-m.albedo[c] / PI + (m.albedo[c] - 1.0) * lobe);
            d_p += gc * ks[c] * (pow / (8.0 * PI) + lobe * nh.ln());
            d_nh += gc * ks[c] * norm * p * pow / nh;
        }
        grad.material[3] += d_p * dp_dr;
        grad.normal += l * d_cos_l + h * d_nh;
        // h = (l + v)/|l + v|
        grad.view += (n - h * h.dot(n)) * (d_nh / len);
    }
    grad
}
