//! Reverse-mode gradients of the image loss and their finite-difference check.
//!
//! Per pixel the forward blend is replayed front to back to recover each
//! contributor's `αᵢ` and `Tᵢ`, then swept back to front with a suffix
//! accumulator `S = Σ_{j>i} cⱼ αⱼ Tⱼ + T_final·background`. Every contributor
//! receives three terms:
//!
//! * color: `∂L/∂cᵢ = g·αᵢ·Tᵢ`
//! * own alpha: `g·cᵢ·Tᵢ`
//! * suffix: `−g·S/(1 − αᵢ)`
//!
//! and `∂L/∂αᵢ` (own + suffix) is pushed through the alpha partials into the
//! opacity, the cross section, and, with geometry enabled, the screen-space
//! footprint. The transmittance derivative is the plain product rule on
//! `Tⱼ = Π_{k<j} (1 − αₖ)`.

use std::fmt;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::compositing::{dalpha_dparams, Cutoffs, OpacityMode};
use crate::crossnet::NetworkGrad;
use crate::error::{Error, Result};
use crate::geometry::{
    normalize_quaternion, project_gaussian_backward, Camera, Mat3, ScreenGrad, Vec2, Vec3,
};
use crate::render::{
    pixel_center, pixel_kernel, prepare_view, render_prepared, render_probed, Contribution,
    OutputKind, PreparedView, Probe, ProbeTerm, RenderRequest, TileGrid, DEFAULT_TILE_SIZE,
};
use crate::scene_io::{ImageBuffer, Scene};
use crate::shading::{shade_backward, LightRig};

/// Mean squared error over all pixel-channels and its gradient `2(r − t)/count`.
pub fn loss_l2(rendered: &ImageBuffer, target: &ImageBuffer) -> Result<(f64, ImageBuffer)> {
    rendered.check_same_shape(target)?;
    let n = rendered.len() as f64;
    let mut sum = 0.0;
    let mut grad = Vec::with_capacity(rendered.len());
    for (r, t) in rendered.data.iter().zip(&target.data) {
        let d = r - t;
        sum += d * d;
        grad.push(2.0 * d / n);
    }
    Ok((
        sum / n,
        ImageBuffer {
            data: grad,
            ..rendered.clone()
        },
    ))
}

/// Gradient of one Gaussian. Geometry entries stay zero unless requested.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GaussianGrad {
    pub raw_opacity: f64,
    /// Feature order: albedo rgb, roughness, metallic.
    pub material: [f64; 5],
    pub mean: Vec3,
    pub scale: Vec3,
    pub rotation: [f64; 4],
    pub normal: Vec3,
}

impl GaussianGrad {
    fn add_assign(&mut self, o: &GaussianGrad) {
        self.raw_opacity += o.raw_opacity;
        self.material
            .iter_mut()
            .zip(&o.material)
            .for_each(|(a, b)| *a += b);
        self.mean += o.mean;
        self.scale += o.scale;
        self.rotation
            .iter_mut()
            .zip(&o.rotation)
            .for_each(|(a, b)| *a += b);
        self.normal += o.normal;
    }

    fn is_finite(&self) -> bool {
        self.raw_opacity.is_finite()
            && self.material.iter().all(|v| v.is_finite())
            && self.rotation.iter().all(|v| v.is_finite())
            && [self.mean, self.scale, self.normal]
                .iter()
                .all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// Per-Gaussian derivatives of the loss with respect to each blend term,
/// in the parametrization used by [`Probe`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TermDiagnostics {
    pub color: f64,
    pub own_alpha: f64,
    pub suffix: f64,
}

impl TermDiagnostics {
    pub fn get(&self, term: ProbeTerm) -> f64 {
        match term {
            ProbeTerm::Color => self.color,
            ProbeTerm::OwnAlpha => self.own_alpha,
            ProbeTerm::Suffix => self.suffix,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet {
    pub gaussians: Vec<GaussianGrad>,
    pub network: Option<NetworkGrad>,
    /// Gaussians that produced a fragment in at least one accumulated view.
    pub populated: Vec<bool>,
    pub terms: Vec<TermDiagnostics>,
}

impl GradientSet {
    pub fn zeros(scene: &Scene) -> Self {
        let n = scene.gaussians.len();
        GradientSet {
            gaussians: vec![GaussianGrad::default(); n],
            network: scene.network.as_ref().map(NetworkGrad::zeros_like),
            populated: vec![false; n],
            terms: vec![TermDiagnostics::default(); n],
        }
    }

    pub fn add_assign(&mut self, other: &GradientSet) -> Result<()> {
        if self.gaussians.len() != other.gaussians.len()
            || self.network.is_some() != other.network.is_some()
        {
            return Err(Error::invalid("gradient sets have different shapes"));
        }
        for i in 0..self.gaussians.len() {
            self.gaussians[i].add_assign(&other.gaussians[i]);
            self.populated[i] |= other.populated[i];
            let (t, o) = (&mut self.terms[i], &other.terms[i]);
            t.color += o.color;
            t.own_alpha += o.own_alpha;
            t.suffix += o.suffix;
        }
        if let (Some(a), Some(b)) = (&mut self.network, &other.network) {
            a.add_assign(b);
        }
        Ok(())
    }

    pub fn scale(&mut self, k: f64) {
        for g in &mut self.gaussians {
            g.raw_opacity *= k;
            g.material.iter_mut().for_each(|v| *v *= k);
            g.mean *= k;
            g.scale *= k;
            g.rotation.iter_mut().for_each(|v| *v *= k);
            g.normal *= k;
        }
        for t in &mut self.terms {
            t.color *= k;
            t.own_alpha *= k;
            t.suffix *= k;
        }
        if let Some(n) = &mut self.network {
            n.weights
                .iter_mut()
                .chain(n.biases.iter_mut())
                .flatten()
                .for_each(|v| *v *= k);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.gaussians.iter().all(GaussianGrad::is_finite)
            && self.network.as_ref().is_none_or(|n| n.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BackwardOptions {
    /// Also differentiate means, scales, rotations and normals.
    pub geometry: bool,
    /// Drop the material's path through the cross section, keeping only the color path.
    pub zero_material_alpha_path: bool,
    pub cutoffs: Cutoffs,
    pub tile_size: usize,
    /// Scales one blend term by 1.5 to check that the verification notices.
    #[cfg(feature = "fault-injection")]
    pub corrupt: Option<ProbeTerm>,
}

impl Default for BackwardOptions {
    fn default() -> Self {
        BackwardOptions {
            geometry: false,
            zero_material_alpha_path: false,
            cutoffs: Cutoffs::default(),
            tile_size: DEFAULT_TILE_SIZE,
            #[cfg(feature = "fault-injection")]
            corrupt: None,
        }
    }
}

impl BackwardOptions {
    fn term_factors(&self) -> [f64; 3] {
        #[allow(unused_mut)]
        let mut f = [1.0; 3];
        #[cfg(feature = "fault-injection")]
        if let Some(t) = self.corrupt {
            f[t as usize] = 1.5;
        }
        f
    }
}

/// Sums per fragment slot over the pixels of one tile.
struct TileAccum {
    dcolor: Vec<[f64; 3]>,
    dsigma: Vec<f64>,
    dopacity: Vec<f64>,
    dscreen: Vec<ScreenGrad>,
    terms: Vec<[f64; 3]>,
}

impl TileAccum {
    fn new(n: usize, geometry: bool) -> Self {
        TileAccum {
            dcolor: vec![[0.0; 3]; n],
            dsigma: vec![0.0; n],
            dopacity: vec![0.0; n],
            dscreen: vec![ScreenGrad::default(); if geometry { n } else { 0 }],
            terms: vec![[0.0; 3]; n],
        }
    }
}

fn backward_tile(
    view: &PreparedView,
    slots: &[usize],
    xs: std::ops::Range<usize>,
    ys: std::ops::Range<usize>,
    dimage: &ImageBuffer,
    opts: &BackwardOptions,
) -> TileAccum {
    let mut acc = TileAccum::new(slots.len(), opts.geometry);
    let [f_color, f_own, f_suffix] = opts.term_factors();
    let mut trace: Vec<Contribution> = Vec::new();
    for y in ys {
        for x in xs.clone() {
            let g = dimage.pixel(x, y);
            if g.iter().all(|v| *v == 0.0) {
                continue;
            }
            let px: Vec2 = pixel_center(x, y);
            let sample = pixel_kernel(view, slots, x, y, opts.cutoffs, None, Some(&mut trace));
            let mut suffix: [f64; 3] = std::array::from_fn(|c| sample.t * view.background[c]);
            for con in trace.iter().rev() {
                let frag = &view.fragments[slots[con.pos]];
                let s = &frag.splat;
                let (a, t) = (con.alpha, con.t);
                let mut own = 0.0;
                let mut through = 0.0;
                for c in 0..3 {
                    acc.dcolor[con.pos][c] += f_color * g[c] * a * t;
                    own += g[c] * s.color[c] * t;
                    through -= g[c] * suffix[c] / (1.0 - a);
                }
                own *= f_own;
                through *= f_suffix;
                let term = &mut acc.terms[con.pos];
                term[0] += f_color * (g[0] + g[1] + g[2]) * a * t;
                term[1] += own * a;
                term[2] += through * a;
                for c in 0..3 {
                    suffix[c] += s.color[c] * a * t;
                }
                if con.clamped {
                    continue;
                }
                let dl_dalpha = own + through;
                let p = dalpha_dparams(view.mode, s.opacity, con.weight, s.cross_section);
                acc.dopacity[con.pos] += dl_dalpha * p.d_opacity;
                acc.dsigma[con.pos] += dl_dalpha * p.d_sigma;
                if opts.geometry {
                    // G = exp(−½ dᵀ C d), d = x − μ
                    let dg = dl_dalpha * p.d_weight * con.weight;
                    let d = px - s.screen.mean;
                    let sg = &mut acc.dscreen[con.pos];
                    sg.mean += dg * (s.screen.conic * d);
                    sg.conic += -0.5 * dg * (d * d.transpose());
                }
            }
        }
    }
    acc
}

fn backward_prepared(
    scene: &Scene,
    view: &PreparedView,
    rig: &LightRig,
    dimage: &ImageBuffer,
    opts: &BackwardOptions,
) -> Result<GradientSet> {
    let cam = &view.camera;
    if dimage.width != cam.width || dimage.height != cam.height || dimage.channels != 3 {
        return Err(Error::invalid(format!(
            "upstream gradient is {}x{}x{}, camera renders {}x{}x3",
            dimage.width, dimage.height, dimage.channels, cam.width, cam.height
        )));
    }
    if !dimage.is_finite() {
        return Err(Error::NumericDegeneracy(
            "upstream image gradient is not finite".into(),
        ));
    }
    if view
        .fragments
        .iter()
        .any(|f| f.splat.index >= scene.gaussians.len())
    {
        return Err(Error::InvalidState(
            "fragment list does not belong to this scene".into(),
        ));
    }
    if opts.tile_size == 0 {
        return Err(Error::invalid("tile size must be positive"));
    }

    let grid = TileGrid::build(view, opts.tile_size);
    let tiles: Vec<TileAccum> = (0..grid.lists.len())
        .into_par_iter()
        .map(|t| {
            let (xs, ys) = grid.bounds(t, cam.width, cam.height);
            backward_tile(view, &grid.lists[t], xs, ys, dimage, opts)
        })
        .collect();

    let n = view.fragments.len();
    let mut total = TileAccum::new(n, opts.geometry);
    for (t, acc) in tiles.iter().enumerate() {
        for (pos, &slot) in grid.lists[t].iter().enumerate() {
            for c in 0..3 {
                total.dcolor[slot][c] += acc.dcolor[pos][c];
                total.terms[slot][c] += acc.terms[pos][c];
            }
            total.dsigma[slot] += acc.dsigma[pos];
            total.dopacity[slot] += acc.dopacity[pos];
            if opts.geometry {
                total.dscreen[slot].mean += acc.dscreen[pos].mean;
                total.dscreen[slot].conic += acc.dscreen[pos].conic;
            }
        }
    }

    let mut out = GradientSet::zeros(scene);
    for (slot, frag) in view.fragments.iter().enumerate() {
        let i = frag.splat.index;
        let g = &scene.gaussians[i];
        out.populated[i] = true;
        let [color, own_alpha, suffix] = total.terms[slot];
        out.terms[i] = TermDiagnostics {
            color,
            own_alpha,
            suffix,
        };
        let grad = &mut out.gaussians[i];
        grad.raw_opacity =
            total.dopacity[slot] * scene.opacity_activation.derivative(g.raw_opacity);

        let sg = shade_backward(g, rig, &frag.view_dir, &total.dcolor[slot]);
        grad.material = sg.material;

        let dsigma = total.dsigma[slot];
        if dsigma != 0.0 {
            let net = scene.network()?;
            let cache = frag
                .net_cache
                .as_ref()
                .ok_or_else(|| Error::InvalidState("missing network cache for fragment".into()))?;
            let netgrad = out.network.as_mut().expect("network present");
            let dm = net.backward_into(cache, dsigma, netgrad)?;
            if !opts.zero_material_alpha_path {
                grad.material.iter_mut().zip(&dm).for_each(|(a, b)| *a += b);
            }
        }

        if opts.geometry {
            grad.normal = sg.normal;
            let offset = cam.position - g.mean;
            let r = offset.norm();
            let v = offset / r;
            // v = (p − μ)/|p − μ|
            grad.mean -= (Mat3::identity() - v * v.transpose()) * sg.view / r;
            let pg = project_gaussian_backward(cam, g, &frag.splat.screen, &total.dscreen[slot])?;
            grad.mean += pg.mean;
            grad.scale = pg.scale;
            grad.rotation = pg.rotation;
        }
    }
    Ok(out)
}

/// Gradient of a loss with upstream image gradient `dimage` for one view.
pub fn backward_image(
    scene: &Scene,
    camera: &Camera,
    mode: OpacityMode,
    rig: &LightRig,
    dimage: &ImageBuffer,
    opts: &BackwardOptions,
) -> Result<GradientSet> {
    let view = prepare_view(scene, camera, mode, rig, opts.cutoffs.alpha_skip)?;
    backward_prepared(scene, &view, rig, dimage, opts)
}

/// Loss and gradient of one view against its target.
#[derive(Clone, Debug)]
pub struct ViewEvaluation {
    pub loss: f64,
    pub rendered: ImageBuffer,
    pub grad: GradientSet,
    pub clamped: usize,
}

/// Renders with the scene lights, evaluates [`loss_l2`] and backpropagates it.
pub fn evaluate_view(
    scene: &Scene,
    camera: &Camera,
    mode: OpacityMode,
    target: &ImageBuffer,
    opts: &BackwardOptions,
) -> Result<ViewEvaluation> {
    let view = prepare_view(scene, camera, mode, &scene.lights, opts.cutoffs.alpha_skip)?;
    let out = render_prepared(
        &view,
        &[OutputKind::Color],
        opts.tile_size,
        opts.cutoffs,
        None,
    );
    let rendered = out.images.into_values().next().expect("color requested");
    let (loss, dimage) = loss_l2(&rendered, target)?;
    let grad = backward_prepared(scene, &view, &scene.lights, &dimage, opts)?;
    Ok(ViewEvaluation {
        loss,
        rendered,
        grad,
        clamped: out.stats.clamped,
    })
}

/// A scalar checked by [`finite_difference_check`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamId {
    RawOpacity(usize),
    /// Gaussian, feature index.
    Material(usize, usize),
    /// Flat network parameter index.
    Network(usize),
    Mean(usize, usize),
    Scale(usize, usize),
    /// Tangent-plane direction `k` of the unit quaternion.
    Rotation(usize, usize),
    /// Tangent-plane direction `k` of the unit normal.
    Normal(usize, usize),
    /// A blend term of one Gaussian, perturbed through a [`Probe`].
    Term(usize, ProbeTerm),
}

const FEATURE_NAMES: [&str; 5] = ["albedo_r", "albedo_g", "albedo_b", "roughness", "metallic"];
const AXES: [&str; 4] = ["x", "y", "z", "w"];

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            ParamId::RawOpacity(i) => write!(f, "gaussian[{i}].raw_opacity"),
            ParamId::Material(i, k) => write!(f, "gaussian[{i}].{}", FEATURE_NAMES[k]),
            ParamId::Network(k) => write!(f, "network[{k}]"),
            ParamId::Mean(i, k) => write!(f, "gaussian[{i}].mean.{}", AXES[k]),
            ParamId::Scale(i, k) => write!(f, "gaussian[{i}].scale.{}", AXES[k]),
            ParamId::Rotation(i, k) => write!(f, "gaussian[{i}].rotation[{k}]"),
            ParamId::Normal(i, k) => write!(f, "gaussian[{i}].normal.{}", AXES[k]),
            ParamId::Term(i, t) => write!(f, "term[{i}].{}", term_name(t)),
        }
    }
}

pub fn term_name(t: ProbeTerm) -> &'static str {
    match t {
        ProbeTerm::Color => "color",
        ProbeTerm::OwnAlpha => "alpha",
        ProbeTerm::Suffix => "suffix",
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum CheckStatus {
    Pass,
    Fail,
    /// Not comparable, e.g. the perturbation crosses the alpha clamp.
    Excluded(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckRecord {
    pub id: ParamId,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    pub status: CheckStatus,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub records: Vec<GradCheckRecord>,
}

impl GradCheckReport {
    pub fn count(&self, pred: impl Fn(&CheckStatus) -> bool) -> usize {
        self.records.iter().filter(|r| pred(&r.status)).count()
    }

    pub fn passed(&self) -> usize {
        self.count(|s| *s == CheckStatus::Pass)
    }

    pub fn failed(&self) -> usize {
        self.count(|s| *s == CheckStatus::Fail)
    }

    pub fn excluded(&self) -> usize {
        self.count(|s| matches!(s, CheckStatus::Excluded(_)))
    }

    pub fn all_passed(&self) -> bool {
        self.failed() == 0 && self.passed() > 0
    }

    pub fn max_rel_error(&self) -> f64 {
        self.records
            .iter()
            .filter(|r| !matches!(r.status, CheckStatus::Excluded(_)))
            .map(|r| r.rel_error)
            .fold(0.0, f64::max)
    }

    /// Blend terms with at least one failing record, in fixed order.
    pub fn failing_terms(&self) -> Vec<ProbeTerm> {
        [ProbeTerm::Color, ProbeTerm::OwnAlpha, ProbeTerm::Suffix]
            .into_iter()
            .filter(|t| {
                self.records.iter().any(|r| {
                    r.status == CheckStatus::Fail && matches!(r.id, ParamId::Term(_, k) if k == *t)
                })
            })
            .collect()
    }

    /// Tab-separated table with a header row.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("parameter\tanalytic\tnumeric\trel_error\tstatus\n");
        for r in &self.records {
            let status = match &r.status {
                CheckStatus::Pass => "pass".to_string(),
                CheckStatus::Fail => "fail".to_string(),
                CheckStatus::Excluded(why) => format!("excluded:{why}"),
            };
            s.push_str(&format!(
                "{}\t{:e}\t{:e}\t{:e}\t{status}\n",
                r.id, r.analytic, r.numeric, r.rel_error
            ));
        }
        s
    }
}

/// Which parameters a finite-difference check visits.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParamSelection {
    pub opacity: bool,
    pub material: bool,
    /// In material-aware mode: the whole output layer plus this many other
    /// network parameters drawn by seed. `None` checks every parameter.
    pub network_sample: Option<usize>,
    pub network: bool,
    pub geometry: bool,
    pub terms: bool,
}

impl Default for ParamSelection {
    fn default() -> Self {
        ParamSelection {
            opacity: true,
            material: true,
            network: true,
            network_sample: Some(128),
            geometry: false,
            terms: true,
        }
    }
}

struct Probed {
    loss: f64,
    clamped: usize,
    order: Vec<usize>,
}

fn probe_loss(
    scene: &Scene,
    camera: &Camera,
    mode: OpacityMode,
    rig: &LightRig,
    target: &ImageBuffer,
    cutoffs: Cutoffs,
    probe: Option<&Probe>,
) -> Result<Probed> {
    let req = RenderRequest::new(scene, camera, mode)
        .with_rig(rig)
        .with_cutoffs(cutoffs);
    let out = render_probed(&req, probe)?;
    let (loss, _) = loss_l2(out.color()?, target)?;
    Ok(Probed {
        loss,
        clamped: out.stats.clamped,
        order: out.order,
    })
}

fn unit_step(v: &Vec3, k: usize, h: f64) -> Vec3 {
    let mut p = *v;
    p[k] += h;
    p.normalize()
}

/// Copy of `scene` with parameter `id` moved by `h`; `None` if that leaves the valid domain.
fn perturb(scene: &Scene, id: ParamId, h: f64) -> Result<Option<Scene>> {
    let mut s = scene.clone();
    match id {
        ParamId::RawOpacity(i) => s.gaussians[i].raw_opacity += h,
        ParamId::Material(i, k) => {
            let mut f = s.gaussians[i].material.features();
            f[k] += h;
            if !(0.0..=1.0).contains(&f[k]) {
                return Ok(None);
            }
            s.gaussians[i].material = crate::geometry::Material::from_features(&f);
        }
        ParamId::Network(k) => {
            let net = s
                .network
                .as_mut()
                .ok_or_else(|| Error::invalid("scene has no network"))?;
            let mut p = net.flat_params();
            p[k] += h;
            net.set_flat_params(&p)?;
        }
        ParamId::Mean(i, k) => s.gaussians[i].mean[k] += h,
        ParamId::Scale(i, k) => {
            s.gaussians[i].scale[k] += h;
            if s.gaussians[i].scale[k] <= 0.0 {
                return Ok(None);
            }
        }
        ParamId::Rotation(i, k) => {
            let mut q = s.gaussians[i].rotation;
            q[k] += h;
            s.gaussians[i].rotation = normalize_quaternion(&q)?;
        }
        ParamId::Normal(i, k) => {
            let g = &mut s.gaussians[i];
            g.normal = unit_step(&g.normal, k, h);
        }
        ParamId::Term(..) => return Err(Error::invalid("blend terms are probed, not perturbed")),
    }
    Ok(Some(s))
}

fn analytic_value(scene: &Scene, grads: &GradientSet, flat_net: &[f64], id: ParamId) -> f64 {
    // Unit-constrained parameters compare the tangent component of the gradient.
    let tangent = |g: &[f64], u: &[f64], k: usize| {
        let dot: f64 = g.iter().zip(u).map(|(a, b)| a * b).sum();
        g[k] - dot * u[k]
    };
    match id {
        ParamId::RawOpacity(i) => grads.gaussians[i].raw_opacity,
        ParamId::Material(i, k) => grads.gaussians[i].material[k],
        ParamId::Network(k) => flat_net[k],
        ParamId::Mean(i, k) => grads.gaussians[i].mean[k],
        ParamId::Scale(i, k) => grads.gaussians[i].scale[k],
        ParamId::Rotation(i, k) => tangent(
            &grads.gaussians[i].rotation,
            &scene.gaussians[i].rotation,
            k,
        ),
        ParamId::Normal(i, k) => {
            let n = scene.gaussians[i].normal;
            tangent(grads.gaussians[i].normal.as_slice(), n.as_slice(), k)
        }
        ParamId::Term(i, t) => grads.terms[i].get(t),
    }
}

fn network_ids(scene: &Scene, sel: &ParamSelection, seed: u64) -> Vec<usize> {
    let Some(net) = &scene.network else {
        return Vec::new();
    };
    let total = net.param_count();
    let Some(extra) = sel.network_sample else {
        return (0..total).collect();
    };
    let last = net.layers().last().expect("network has layers");
    let head = total - last.weights.len() - last.biases.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids: Vec<usize> = sample(&mut rng, head, extra.min(head)).into_vec();
    ids.sort_unstable();
    ids.extend(head..total);
    ids
}

/// Parameters visited by [`finite_difference_check`], in report order.
pub fn selected_params(
    scene: &Scene,
    mode: OpacityMode,
    sel: &ParamSelection,
    seed: u64,
) -> Vec<ParamId> {
    let mut ids = Vec::new();
    for i in 0..scene.gaussians.len() {
        if sel.opacity {
            ids.push(ParamId::RawOpacity(i));
        }
        if sel.material {
            ids.extend((0..5).map(|k| ParamId::Material(i, k)));
        }
        if sel.geometry {
            ids.extend((0..3).map(|k| ParamId::Mean(i, k)));
            ids.extend((0..3).map(|k| ParamId::Scale(i, k)));
            ids.extend((0..4).map(|k| ParamId::Rotation(i, k)));
            ids.extend((0..3).map(|k| ParamId::Normal(i, k)));
        }
    }
    // The network only shapes the image through the material-aware alpha.
    if sel.network && mode == OpacityMode::Omg {
        ids.extend(
            network_ids(scene, sel, seed)
                .into_iter()
                .map(ParamId::Network),
        );
    }
    if sel.terms {
        for i in 0..scene.gaussians.len() {
            for t in [ProbeTerm::Color, ProbeTerm::OwnAlpha, ProbeTerm::Suffix] {
                ids.push(ParamId::Term(i, t));
            }
        }
    }
    ids
}

/// Compares analytic gradients with central differences of the loss.
///
/// `relative error = |a − n| / max(1, |a|, |n|)`. A parameter is excluded
/// when the perturbation changes the number of clamped fragments or the
/// blend order, or leaves the valid domain. Terms of Gaussians with no
/// fragment in the view are skipped.
#[allow(clippy::too_many_arguments)]
pub fn finite_difference_check(
    scene: &Scene,
    camera: &Camera,
    mode: OpacityMode,
    rig: &LightRig,
    target: &ImageBuffer,
    selection: &ParamSelection,
    eps: f64,
    tol: f64,
    seed: u64,
    opts: &BackwardOptions,
) -> Result<GradCheckReport> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::invalid(format!("eps {eps} outside [1e-7, 1e-3]")));
    }
    if !(tol > 0.0) {
        return Err(Error::invalid("tolerance must be positive"));
    }
    let opts = BackwardOptions {
        geometry: opts.geometry || selection.geometry,
        ..*opts
    };
    let view = prepare_view(scene, camera, mode, rig, opts.cutoffs.alpha_skip)?;
    let base_out = render_prepared(
        &view,
        &[OutputKind::Color],
        opts.tile_size,
        opts.cutoffs,
        None,
    );
    let rendered = base_out.color()?;
    let (_, dimage) = loss_l2(rendered, target)?;
    let grads = backward_prepared(scene, &view, rig, &dimage, &opts)?;
    let flat_net = grads
        .network
        .as_ref()
        .map(NetworkGrad::flatten)
        .unwrap_or_default();
    let base_clamped = base_out.stats.clamped;
    let base_order = base_out.order.clone();

    let ids: Vec<ParamId> = selected_params(scene, mode, selection, seed)
        .into_iter()
        .filter(|id| !matches!(id, ParamId::Term(i, _) if !grads.populated[*i]))
        .collect();

    let records: Result<Vec<GradCheckRecord>> = ids
        .par_iter()
        .map(|&id| {
            let analytic = analytic_value(scene, &grads, &flat_net, id);
            let excluded = |why: &str| GradCheckRecord {
                id,
                analytic,
                numeric: f64::NAN,
                rel_error: f64::NAN,
                status: CheckStatus::Excluded(why.into()),
            };
            let (plus, minus) = match id {
                ParamId::Term(i, term) => {
                    let at = |h: f64| {
                        let probe = Probe {
                            gaussian: i,
                            term,
                            eps: h,
                        };
                        probe_loss(scene, camera, mode, rig, target, opts.cutoffs, Some(&probe))
                    };
                    (at(eps)?, at(-eps)?)
                }
                _ => {
                    let (Some(sp), Some(sm)) =
                        (perturb(scene, id, eps)?, perturb(scene, id, -eps)?)
                    else {
                        return Ok(excluded("domain"));
                    };
                    let at =
                        |s: &Scene| probe_loss(s, camera, mode, rig, target, opts.cutoffs, None);
                    (at(&sp)?, at(&sm)?)
                }
            };
            if plus.clamped != base_clamped || minus.clamped != base_clamped {
                return Ok(excluded("clamp"));
            }
            if plus.order != base_order || minus.order != base_order {
                return Ok(excluded("order"));
            }
            let numeric = (plus.loss - minus.loss) / (2.0 * eps);
            let rel_error = relative_error(analytic, numeric);
            let status = if rel_error <= tol {
                CheckStatus::Pass
            } else {
                CheckStatus::Fail
            };
            Ok(GradCheckRecord {
                id,
                analytic,
                numeric,
                rel_error,
                status,
            })
        })
        .collect();
    Ok(GradCheckReport { records: records? })
}
