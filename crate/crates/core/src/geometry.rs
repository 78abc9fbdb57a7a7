//! Gaussian primitives, covariance construction and pinhole projection to
//! screen-space splats.
//!
//! Conventions: quaternions are scalar-first `(w, x, y, z)` and normalized
//! before use. Camera space is right-handed with `+x` right, `+y` down and
//! `+z` forward; pixel `(i, j)` has its center at `(i + 0.5, j + 0.5)`.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};

use crate::error::{Error, Result};

pub type Vec2 = Vector2<f64>;
pub type Vec3 = Vector3<f64>;
pub type Mat2 = Matrix2<f64>;
pub type Mat3 = Matrix3<f64>;

/// Added to every projected 2D covariance (pixels²) before inversion.
pub const LOW_PASS_FLOOR: f64 = 0.3;

/// Screen footprint used for culling, in standard deviations.
pub const CULL_SIGMAS: f64 = 3.0;

const UNIT_TOL: f64 = 1e-9;

/// Surface material carried by each Gaussian. All components live in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Material {
    pub albedo: [f64; 3],
    pub roughness: f64,
    pub metallic: f64,
}

impl Material {
    pub const FEATURE_DIM: usize = 5;

    pub fn new(albedo: [f64; 3], roughness: f64, metallic: f64) -> Self {
        Material {
            albedo,
            roughness,
            metallic,
        }
    }

    pub fn uniform(value: f64) -> Self {
        Material::new([value; 3], value, value)
    }

    /// Flat feature vector fed to the cross-section network: albedo, roughness, metallic.
    pub fn features(&self) -> [f64; 5] {
        let [r, g, b] = self.albedo;
        [r, g, b, self.roughness, self.metallic]
    }

    pub fn from_features(f: &[f64; 5]) -> Self {
        Material::new([f[0], f[1], f[2]], f[3], f[4])
    }

    pub fn clamped(&self) -> Self {
        let c = |v: f64| v.clamp(0.0, 1.0);
        Material::new(self.albedo.map(c), c(self.roughness), c(self.metallic))
    }

    pub fn is_valid(&self) -> bool {
        self.features()
            .iter()
            .all(|v| v.is_finite() && (0.0..=1.0).contains(v))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPrimitive {
    pub mean: Vec3,
    /// Scalar-first quaternion `(w, x, y, z)`.
    pub rotation: [f64; 4],
    pub scale: Vec3,
    pub raw_opacity: f64,
    pub material: Material,
    pub normal: Vec3,
}

impl GaussianPrimitive {
    pub fn validate(&self) -> Result<()> {
        let qn = quaternion_norm(&self.rotation);
        if !qn.is_finite() || (qn - 1.0).abs() > UNIT_TOL {
            return Err(Error::invalid(format!(
                "rotation quaternion norm {qn} is not 1"
            )));
        }
        if self.scale.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::invalid(format!(
                "scale {:?} must be positive",
                self.scale
            )));
        }
        if (self.normal.norm() - 1.0).abs() > UNIT_TOL {
            return Err(Error::invalid(format!(
                "normal {:?} is not unit length",
                self.normal
            )));
        }
        if !self.material.is_valid() {
            return Err(Error::invalid(format!(
                "material {:?} out of [0, 1]",
                self.material
            )));
        }
        if !self.mean.iter().all(|v| v.is_finite()) || !self.raw_opacity.is_finite() {
            return Err(Error::invalid("non-finite gaussian parameter"));
        }
        Ok(())
    }

    pub fn covariance(&self) -> Result<Mat3> {
        build_covariance(&self.rotation, &self.scale)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub position: Vec3,
    /// World-to-camera rotation.
    pub rotation: Mat3,
    pub focal: [f64; 2],
    pub principal: [f64; 2],
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

impl Camera {
    /// Camera at `position` looking at `target`. `up` is a world direction that ends up
    /// pointing toward the top of the image.
    pub fn look_at(
        position: Vec3,
        target: Vec3,
        up: Vec3,
        focal: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let forward = (target - position)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::invalid("camera target coincides with position"))?;
        let right = forward
            .cross(&(-up))
            .try_normalize(1e-12)
            .ok_or_else(|| Error::invalid("camera up vector is parallel to view direction"))?;
        let down = forward.cross(&right);
        let rotation = Mat3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let camera = Camera {
            position,
            rotation,
            focal: [focal, focal],
            principal: [width as f64 / 2.0, height as f64 / 2.0],
            width,
            height,
            near: 0.01,
            far: 1000.0,
        };
        camera.validate()?;
        Ok(camera)
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        let ortho = (r.transpose() * r - Mat3::identity()).amax();
        if !(ortho <= UNIT_TOL) || (r.determinant() - 1.0).abs() > UNIT_TOL {
            return Err(Error::invalid(
                "camera orientation is not a proper rotation",
            ));
        }
        if !(self.focal[0] > 0.0 && self.focal[1] > 0.0) {
            return Err(Error::invalid("camera focal lengths must be positive"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("camera image size must be positive"));
        }
        if !(0.0 < self.near && self.near < self.far) {
            return Err(Error::invalid("camera requires 0 < near < far"));
        }
        Ok(())
    }

    pub fn world_to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation * (p - self.position)
    }

    /// Unit direction from `p` toward the camera center.
    pub fn view_direction(&self, p: &Vec3) -> Vec3 {
        (self.position - p).normalize()
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

/// Screen-space footprint of a projected Gaussian.
#[derive(Clone, Debug, PartialEq)]
pub struct ScreenGaussian {
    pub mean: Vec2,
    /// Regularized 2D covariance (low-pass floor included).
    pub cov: Mat2,
    /// Inverse of `cov`.
    pub conic: Mat2,
    pub depth: f64,
    /// Mean in camera coordinates.
    pub cam_mean: Vec3,
}

impl ScreenGaussian {
    /// Largest eigenvalue of the 2D covariance.
    pub fn max_variance(&self) -> f64 {
        let (a, b, c) = (self.cov[(0, 0)], self.cov[(0, 1)], self.cov[(1, 1)]);
        let mid = 0.5 * (a + c);
        mid + (0.25 * (a - c) * (a - c) + b * b).sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CullReason {
    BehindNear,
    BeyondFar,
    OffScreen,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Projection {
    Visible(ScreenGaussian),
    Culled(CullReason),
}

/// A projected Gaussian ready for compositing.
#[derive(Clone, Debug, PartialEq)]
pub struct SplatFragment {
    pub index: usize,
    pub screen: ScreenGaussian,
    pub color: [f64; 3],
    pub cross_section: f64,
    /// Activated opacity `o`.
    pub opacity: f64,
}

pub fn quaternion_norm(q: &[f64; 4]) -> f64 {
    q.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn normalize_quaternion(q: &[f64; 4]) -> Result<[f64; 4]> {
    let n = quaternion_norm(q);
    if !(n.is_finite() && n > 0.0) {
        return Err(Error::invalid("zero-norm quaternion"));
    }
    Ok(q.map(|v| v / n))
}

fn rotation_from_unit(q: &[f64; 4]) -> Mat3 {
    let [w, x, y, z] = *q;
    Mat3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

pub fn rotation_from_quaternion(q: &[f64; 4]) -> Result<Mat3> {
    Ok(rotation_from_unit(&normalize_quaternion(q)?))
}

/// Pulls a gradient on the rotation matrix back to the (unnormalized) quaternion.
pub fn rotation_from_quaternion_backward(q: &[f64; 4], d_rot: &Mat3) -> Result<[f64; 4]> {
    let norm = quaternion_norm(q);
    let u = normalize_quaternion(q)?;
    let [w, x, y, z] = u;
    let partials = [
        Mat3::new(
            0.0,
            -2.0 * z,
            2.0 * y,
            2.0 * z,
            0.0,
            -2.0 * x,
            -2.0 * y,
            2.0 * x,
            0.0,
        ),
        Mat3::new(
            0.0,
            2.0 * y,
            2.0 * z,
            2.0 * y,
            -4.0 * x,
            -2.0 * w,
            2.0 * z,
            2.0 * w,
            -4.0 * x,
        ),
        Mat3::new(
            -4.0 * y,
            2.0 * x,
            2.0 * w,
            2.0 * x,
            0.0,
            2.0 * z,
            -2.0 * w,
            2.0 * z,
            -4.0 * y,
        ),
        Mat3::new(
            -4.0 * z,
            -2.0 * w,
            2.0 * x,
            2.0 * w,
            -4.0 * z,
            2.0 * y,
            2.0 * x,
            2.0 * y,
            0.0,
        ),
    ];
    let d_unit = partials.map(|p| p.component_mul(d_rot).sum());
    let radial: f64 = d_unit.iter().zip(&u).map(|(a, b)| a * b).sum();
    let mut out = [0.0; 4];
    for k in 0..4 {
        out[k] = (d_unit[k] - u[k] * radial) / norm;
    }
    Ok(out)
}

/// `R · diag(s²) · Rᵀ`.
pub fn build_covariance(q: &[f64; 4], scale: &Vec3) -> Result<Mat3> {
    if scale.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(Error::invalid(format!(
            "scale {scale:?} must be strictly positive"
        )));
    }
    let r = rotation_from_quaternion(q)?;
    let s2 = Mat3::from_diagonal(&scale.component_mul(scale));
    let cov = r * s2 * r.transpose();
    Ok(0.5 * (cov + cov.transpose()))
}

fn perspective_jacobian(camera: &Camera, t: &Vec3) -> Matrix2x3<f64> {
    let [fx, fy] = camera.focal;
    let iz = 1.0 / t.z;
    Matrix2x3::new(
        fx * iz,
        0.0,
        -fx * t.x * iz * iz,
        0.0,
        fy * iz,
        -fy * t.y * iz * iz,
    )
}

fn project_point(camera: &Camera, t: &Vec3) -> Vec2 {
    Vec2::new(
        camera.focal[0] * t.x / t.z + camera.principal[0],
        camera.focal[1] * t.y / t.z + camera.principal[1],
    )
}

/// Projects a Gaussian with the first-order (EWA) approximation
/// `Σ' = J·W·Σ·Wᵀ·Jᵀ + floor·I`.
pub fn project_gaussian(camera: &Camera, g: &GaussianPrimitive) -> Result<Projection> {
    let t = camera.world_to_camera(&g.mean);
    if t.z <= camera.near {
        return Ok(Projection::Culled(CullReason::BehindNear));
    }
    if t.z >= camera.far {
        return Ok(Projection::Culled(CullReason::BeyondFar));
    }
    let cov3 = g.covariance()?;
    let j = perspective_jacobian(camera, &t);
    let m = camera.rotation * cov3 * camera.rotation.transpose();
    let raw = j * m * j.transpose();
    let mut cov = 0.5 * (raw + raw.transpose());
    cov[(0, 0)] += LOW_PASS_FLOOR;
    cov[(1, 1)] += LOW_PASS_FLOOR;

    let det = cov.determinant();
    if !(det.is_finite() && det > 0.0 && cov[(0, 0)] > 0.0) {
        return Err(Error::NumericDegeneracy(format!(
            "projected covariance of gaussian at {:?} is not invertible (det = {det})",
            g.mean
        )));
    }
    let conic = Mat2::new(cov[(1, 1)], -cov[(0, 1)], -cov[(1, 0)], cov[(0, 0)]) / det;
    let mean = project_point(camera, &t);
    let screen = ScreenGaussian {
        mean,
        cov,
        conic,
        depth: t.z,
        cam_mean: t,
    };

    let radius = CULL_SIGMAS * screen.max_variance().sqrt();
    let (w, h) = (camera.width as f64, camera.height as f64);
    if mean.x + radius < 0.0 || mean.x - radius > w || mean.y + radius < 0.0 || mean.y - radius > h
    {
        return Ok(Projection::Culled(CullReason::OffScreen));
    }
    Ok(Projection::Visible(screen))
}

/// Mahalanobis quadratic form `dᵀ·conic·d` for `d = x − mean`.
pub fn mahalanobis(screen: &ScreenGaussian, x: &Vec2) -> f64 {
    let d = x - screen.mean;
    let c = &screen.conic;
    c[(0, 0)] * d.x * d.x + 2.0 * c[(0, 1)] * d.x * d.y + c[(1, 1)] * d.y * d.y
}

/// `exp(−½ dᵀ Σ'⁻¹ d)`: exactly 1 at the projected mean.
pub fn gaussian_weight(screen: &ScreenGaussian, x: &Vec2) -> f64 {
    (-0.5 * mahalanobis(screen, x)).exp()
}

/// Upstream gradients on the screen-space quantities of one splat.
#[derive(Clone, Copy, Debug, Default)]
pub struct ScreenGrad {
    pub mean: Vec2,
    /// Full-matrix gradient with respect to the conic entries.
    pub conic: Mat2,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectionGrad {
    pub mean: Vec3,
    pub scale: Vec3,
    pub rotation: [f64; 4],
}

/// Reverse pass of [`project_gaussian`] for a visible Gaussian.
pub fn project_gaussian_backward(
    camera: &Camera,
    g: &GaussianPrimitive,
    screen: &ScreenGaussian,
    upstream: &ScreenGrad,
) -> Result<ProjectionGrad> {
    let t = screen.cam_mean;
    let w = camera.rotation;
    let rot = rotation_from_quaternion(&g.rotation)?;
    let s2 = Mat3::from_diagonal(&g.scale.component_mul(&g.scale));
    let cov3 = rot * s2 * rot.transpose();
    let m = w * cov3 * w.transpose();
    let j = perspective_jacobian(camera, &t);

    // conic = cov⁻¹, cov = sym(J M Jᵀ) + floor·I
    let conic = screen.conic;
    let d_cov = -(conic.transpose() * upstream.conic * conic.transpose());
    let d_raw = 0.5 * (d_cov + d_cov.transpose());
    let d_j = d_raw * j * m.transpose() + d_raw.transpose() * j * m;
    let d_m = j.transpose() * d_raw * j;
    let d_cov3 = w.transpose() * d_m * w;

    let d_rot = d_cov3 * rot * s2 + d_cov3.transpose() * rot * s2;
    let rt_g_r = rot.transpose() * d_cov3 * rot;
    let scale = Vec3::from_fn(|k, _| 2.0 * g.scale[k] * rt_g_r[(k, k)]);
    let rotation = rotation_from_quaternion_backward(&g.rotation, &d_rot)?;

    let [fx, fy] = camera.focal;
    let iz = 1.0 / t.z;
    let iz2 = iz * iz;
    let iz3 = iz2 * iz;
    let mut d_t = Vec3::new(
        upstream.mean.x * fx * iz,
        upstream.mean.y * fy * iz,
        -upstream.mean.x * fx * t.x * iz2 - upstream.mean.y * fy * t.y * iz2,
    );
    d_t.x += d_j[(0, 2)] * (-fx * iz2);
    d_t.y += d_j[(1, 2)] * (-fy * iz2);
    d_t.z += d_j[(0, 0)] * (-fx * iz2)
        + d_j[(0, 2)] * (2.0 * fx * t.x * iz3)
        + d_j[(1, 1)] * (-fy * iz2)
        + d_j[(1, 2)] * (2.0 * fy * t.y * iz3);

    Ok(ProjectionGrad {
        mean: w.transpose() * d_t,
        scale,
        rotation,
    })
}
