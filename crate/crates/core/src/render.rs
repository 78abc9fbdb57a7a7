//! Full-image rendering: a tiled, parallel fast path and a brute-force
//! single-threaded reference.
//!
//! Both paths blend every pixel in global depth order. Tiling only decides
//! which fragments a pixel looks at, and a fragment is left out of a tile only
//! when its alpha is provably below the skip threshold there, so the output
//! does not depend on the tile size.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::compositing::{evaluate_alpha, Cutoffs, OpacityMode};
use crate::crossnet::ForwardCache;
use crate::error::{Error, Result};
use crate::geometry::{
    gaussian_weight, project_gaussian, Camera, Projection, SplatFragment, Vec2, Vec3,
};
use crate::scene_io::{ImageBuffer, Scene};
use crate::shading::{shade, LightRig};

pub const DEFAULT_TILE_SIZE: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum OutputKind {
    Color,
    /// Composited network output `σ`, one channel.
    CrossSectionMap,
    /// Final transmittance, one channel.
    TransmittanceMap,
    /// Composited unit normals (raw components in `[−1, 1]`).
    NormalMap,
    /// Composited albedo, used for material-recovery metrics.
    AlbedoMap,
}

impl OutputKind {
    pub const ALL: [OutputKind; 5] = [
        OutputKind::Color,
        OutputKind::CrossSectionMap,
        OutputKind::TransmittanceMap,
        OutputKind::NormalMap,
        OutputKind::AlbedoMap,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OutputKind::Color => "color",
            OutputKind::CrossSectionMap => "cross_section_map",
            OutputKind::TransmittanceMap => "transmittance_map",
            OutputKind::NormalMap => "normal_map",
            OutputKind::AlbedoMap => "albedo_map",
        }
    }

    pub fn channels(self) -> usize {
        match self {
            OutputKind::CrossSectionMap | OutputKind::TransmittanceMap => 1,
            _ => 3,
        }
    }
}

impl fmt::Display for OutputKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OutputKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OutputKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown output kind `{s}`")))
    }
}

#[derive(Clone, Debug)]
pub struct RenderRequest<'a> {
    pub scene: &'a Scene,
    pub camera: &'a Camera,
    pub mode: OpacityMode,
    pub rig: &'a LightRig,
    pub outputs: Vec<OutputKind>,
    pub tile_size: usize,
    pub cutoffs: Cutoffs,
}

impl<'a> RenderRequest<'a> {
    /// Color only, scene lights, default tiling and cutoffs.
    pub fn new(scene: &'a Scene, camera: &'a Camera, mode: OpacityMode) -> Self {
        RenderRequest {
            scene,
            camera,
            mode,
            rig: &scene.lights,
            outputs: vec![OutputKind::Color],
            tile_size: DEFAULT_TILE_SIZE,
            cutoffs: Cutoffs::default(),
        }
    }

    pub fn with_outputs(mut self, outputs: &[OutputKind]) -> Self {
        self.outputs = outputs.to_vec();
        self
    }

    pub fn with_all_outputs(self) -> Self {
        self.with_outputs(&OutputKind::ALL)
    }

    pub fn with_tile_size(mut self, tile_size: usize) -> Self {
        self.tile_size = tile_size;
        self
    }

    pub fn with_cutoffs(mut self, cutoffs: Cutoffs) -> Self {
        self.cutoffs = cutoffs;
        self
    }

    pub fn with_rig(mut self, rig: &'a LightRig) -> Self {
        self.rig = rig;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.outputs.is_empty() {
            return Err(Error::invalid("render request has no outputs"));
        }
        if self.tile_size == 0 {
            return Err(Error::invalid("tile size must be positive"));
        }
        let c = &self.cutoffs;
        if !(0.0..1.0).contains(&c.alpha_skip) || !(0.0..1.0).contains(&c.t_min) {
            return Err(Error::invalid("cutoffs must lie in [0, 1)"));
        }
        if self.outputs.contains(&OutputKind::CrossSectionMap) && self.scene.network.is_none() {
            return Err(Error::invalid("cross-section map needs a network"));
        }
        self.rig.validate()?;
        self.camera.validate()
    }
}

/// Fragment counters of one render.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RenderStats {
    pub visible: usize,
    pub culled: usize,
    /// Fragment-pixel pairs that were blended.
    pub blended: usize,
    /// Blended pairs whose alpha hit the clamp.
    pub clamped: usize,
}

impl RenderStats {
    fn merge(&mut self, other: &RenderStats) {
        self.blended += other.blended;
        self.clamped += other.clamped;
    }
}

#[derive(Clone, Debug)]
pub struct RenderOutput {
    pub images: BTreeMap<OutputKind, ImageBuffer>,
    pub stats: RenderStats,
    /// Gaussian indices of the visible fragments in blend order.
    pub order: Vec<usize>,
}

impl RenderOutput {
    pub fn image(&self, kind: OutputKind) -> Result<&ImageBuffer> {
        self.images
            .get(&kind)
            .ok_or_else(|| Error::invalid(format!("output `{kind}` was not requested")))
    }

    pub fn color(&self) -> Result<&ImageBuffer> {
        self.image(OutputKind::Color)
    }
}

/// One visible Gaussian with everything the pixel loop needs.
#[derive(Clone, Debug)]
pub(crate) struct ViewFragment {
    pub splat: SplatFragment,
    pub view_dir: Vec3,
    pub normal: Vec3,
    pub albedo: [f64; 3],
    pub net_cache: Option<ForwardCache>,
    /// Inclusive pixel bounds `[x0, x1] × [y0, y1]`, `None` if the fragment can never pass the skip test.
    pub bbox: Option<[usize; 4]>,
}

/// A camera's fragment list, sorted by depth with ties broken by Gaussian index.
#[derive(Clone, Debug)]
pub(crate) struct PreparedView {
    pub camera: Camera,
    pub mode: OpacityMode,
    pub background: [f64; 3],
    pub fragments: Vec<ViewFragment>,
    pub culled: usize,
}

impl PreparedView {
    pub fn order(&self) -> Vec<usize> {
        self.fragments.iter().map(|f| f.splat.index).collect()
    }
}

/// Largest alpha a fragment can reach anywhere on screen.
fn peak_alpha(mode: OpacityMode, opacity: f64, sigma: f64) -> f64 {
    match mode {
        OpacityMode::Baseline => opacity,
        OpacityMode::Omg => opacity * sigma,
    }
}

/// Pixels whose centers may see `alpha ≥ alpha_skip`.
fn fragment_bbox(
    camera: &Camera,
    frag: &SplatFragment,
    peak: f64,
    alpha_skip: f64,
) -> Option<[usize; 4]> {
    let (w, h) = (camera.width, camera.height);
    if alpha_skip <= 0.0 {
        return Some([0, w - 1, 0, h - 1]);
    }
    if peak < alpha_skip {
        return None;
    }
    // alpha ≤ peak·G, and G < skip/peak once the Mahalanobis distance exceeds r.
    let r2 = 2.0 * (peak / alpha_skip).ln();
    let reach = (r2 * frag.screen.max_variance()).sqrt() + 1.0;
    let m = frag.screen.mean;
    let lo = |c: f64| (c - reach - 0.5).ceil().max(0.0);
    let hi = |c: f64, n: usize| (c + reach - 0.5).floor().min(n as f64 - 1.0);
    let (x0, x1, y0, y1) = (lo(m.x), hi(m.x, w), lo(m.y), hi(m.y, h));
    if !(x0 <= x1 && y0 <= y1) {
        return None;
    }
    Some([x0 as usize, x1 as usize, y0 as usize, y1 as usize])
}

/// Projects, shades and sorts every Gaussian for one camera.
pub(crate) fn prepare_view(
    scene: &Scene,
    camera: &Camera,
    mode: OpacityMode,
    rig: &LightRig,
    alpha_skip: f64,
) -> Result<PreparedView> {
    scene.validate()?;
    camera.validate()?;
    if mode == OpacityMode::Omg {
        scene.network()?;
    }
    let mut fragments = Vec::with_capacity(scene.gaussians.len());
    let mut culled = 0;
    for (index, g) in scene.gaussians.iter().enumerate() {
        let screen = match project_gaussian(camera, g)? {
            Projection::Visible(s) => s,
            Projection::Culled(_) => {
                culled += 1;
                continue;
            }
        };
        let view_dir = camera.view_direction(&g.mean);
        let (sigma, net_cache) = match &scene.network {
            Some(net) => {
                let (s, cache) = net.forward(&g.material.clamped().features())?;
                (s, Some(cache))
            }
            None => (1.0, None),
        };
        let splat = SplatFragment {
            index,
            screen,
            color: shade(g, rig, &view_dir),
            cross_section: sigma,
            opacity: scene.opacity(index),
        };
        let peak = peak_alpha(mode, splat.opacity, sigma);
        let bbox = fragment_bbox(camera, &splat, peak, alpha_skip);
        fragments.push(ViewFragment {
            splat,
            view_dir,
            normal: g.normal,
            albedo: g.material.albedo,
            net_cache,
            bbox,
        });
    }
    fragments.sort_by(|a, b| {
        a.splat
            .screen
            .depth
            .total_cmp(&b.splat.screen.depth)
            .then(a.splat.index.cmp(&b.splat.index))
    });
    Ok(PreparedView {
        camera: camera.clone(),
        mode,
        background: scene.background,
        fragments,
        culled,
    })
}

/// Which part of the blend a probe perturbs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeTerm {
    /// `cᵢ → cᵢ + ε` on every channel.
    Color,
    /// `αᵢ → αᵢ(1 + ε)` in the fragment's own weight `αᵢTᵢ` only.
    OwnAlpha,
    /// `αᵢ → αᵢ(1 + ε)` in the transmittance update only.
    Suffix,
}

/// Perturbation of one Gaussian inside the blend, for term-level derivative checks.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Probe {
    pub gaussian: usize,
    pub term: ProbeTerm,
    pub eps: f64,
}

/// A blended fragment as seen from one pixel.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Contribution {
    /// Position in the slot list handed to the kernel.
    pub pos: usize,
    pub alpha: f64,
    pub weight: f64,
    /// Transmittance in front of the fragment.
    pub t: f64,
    pub clamped: bool,
}

#[derive(Clone, Copy, Debug, Default)]
pub(crate) struct PixelSample {
    pub color: [f64; 3],
    pub t: f64,
    pub sigma: f64,
    pub normal: [f64; 3],
    pub albedo: [f64; 3],
    pub blended: usize,
    pub clamped: usize,
}

pub(crate) fn pixel_center(x: usize, y: usize) -> Vec2 {
    Vec2::new(x as f64 + 0.5, y as f64 + 0.5)
}

/// Front-to-back blend of the fragments `slots` (ascending) at pixel `(x, y)`.
pub(crate) fn pixel_kernel(
    view: &PreparedView,
    slots: &[usize],
    x: usize,
    y: usize,
    cutoffs: Cutoffs,
    probe: Option<&Probe>,
    mut trace: Option<&mut Vec<Contribution>>,
) -> PixelSample {
    let px = pixel_center(x, y);
    let mut out = PixelSample {
        t: 1.0,
        ..Default::default()
    };
    if let Some(tr) = trace.as_deref_mut() {
        tr.clear();
    }
    for (pos, &slot) in slots.iter().enumerate() {
        let f = &view.fragments[slot];
        let s = &f.splat;
        let weight = gaussian_weight(&s.screen, &px);
        let a = evaluate_alpha(view.mode, s.opacity, weight, s.cross_section);
        if a.value < cutoffs.alpha_skip {
            continue;
        }
        let (mut own, mut through, mut color) = (a.value, a.value, s.color);
        if let Some(p) = probe.filter(|p| p.gaussian == s.index) {
            match p.term {
                ProbeTerm::Color => color = color.map(|c| c + p.eps),
                ProbeTerm::OwnAlpha => own *= 1.0 + p.eps,
                ProbeTerm::Suffix => through *= 1.0 + p.eps,
            }
        }
        if let Some(tr) = trace.as_deref_mut() {
            tr.push(Contribution {
                pos,
                alpha: a.value,
                weight,
                t: out.t,
                clamped: a.clamped,
            });
        }
        let w = own * out.t;
        for c in 0..3 {
            out.color[c] += color[c] * w;
            out.normal[c] += f.normal[c] * w;
            out.albedo[c] += f.albedo[c] * w;
        }
        out.sigma += s.cross_section * w;
        out.t *= 1.0 - through;
        out.blended += 1;
        out.clamped += a.clamped as usize;
        if out.t < cutoffs.t_min {
            break;
        }
    }
    for c in 0..3 {
        out.color[c] += out.t * view.background[c];
    }
    out
}

/// Per-tile fragment lists in blend order.
pub(crate) struct TileGrid {
    pub size: usize,
    pub cols: usize,
    pub lists: Vec<Vec<usize>>,
}

impl TileGrid {
    pub fn build(view: &PreparedView, size: usize) -> Self {
        let cols = view.camera.width.div_ceil(size);
        let rows = view.camera.height.div_ceil(size);
        let mut lists = vec![Vec::new(); cols * rows];
        for (slot, f) in view.fragments.iter().enumerate() {
            let Some([x0, x1, y0, y1]) = f.bbox else {
                continue;
            };
            for ty in y0 / size..=y1 / size {
                for tx in x0 / size..=x1 / size {
                    lists[ty * cols + tx].push(slot);
                }
            }
        }
        TileGrid { size, cols, lists }
    }

    /// Pixel ranges `(x0..x1, y0..y1)` of tile `t`.
    pub fn bounds(
        &self,
        t: usize,
        width: usize,
        height: usize,
    ) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let (tx, ty) = (t % self.cols, t / self.cols);
        let x0 = tx * self.size;
        let y0 = ty * self.size;
        (
            x0..(x0 + self.size).min(width),
            y0..(y0 + self.size).min(height),
        )
    }
}

fn allocate(kinds: &[OutputKind], w: usize, h: usize) -> BTreeMap<OutputKind, ImageBuffer> {
    kinds
        .iter()
        .map(|&k| (k, ImageBuffer::new(w, h, k.channels())))
        .collect()
}

fn store(images: &mut BTreeMap<OutputKind, ImageBuffer>, x: usize, y: usize, s: &PixelSample) {
    for (kind, img) in images.iter_mut() {
        let px = img.pixel_mut(x, y);
        match kind {
            OutputKind::Color => px.copy_from_slice(&s.color),
            OutputKind::CrossSectionMap => px[0] = s.sigma,
            OutputKind::TransmittanceMap => px[0] = s.t,
            OutputKind::NormalMap => px.copy_from_slice(&s.normal),
            OutputKind::AlbedoMap => px.copy_from_slice(&s.albedo),
        }
    }
}

fn finish(
    view: &PreparedView,
    images: BTreeMap<OutputKind, ImageBuffer>,
    mut stats: RenderStats,
) -> RenderOutput {
    stats.visible = view.fragments.len();
    stats.culled = view.culled;
    RenderOutput {
        images,
        stats,
        order: view.order(),
    }
}

pub(crate) fn render_prepared(
    view: &PreparedView,
    outputs: &[OutputKind],
    tile_size: usize,
    cutoffs: Cutoffs,
    probe: Option<&Probe>,
) -> RenderOutput {
    let (w, h) = (view.camera.width, view.camera.height);
    let grid = TileGrid::build(view, tile_size);
    let tiles: Vec<(Vec<PixelSample>, RenderStats)> = (0..grid.lists.len())
        .into_par_iter()
        .map(|t| {
            let (xs, ys) = grid.bounds(t, w, h);
            let mut stats = RenderStats::default();
            let mut samples = Vec::with_capacity(xs.len() * ys.len());
            for y in ys {
                for x in xs.clone() {
                    let s = pixel_kernel(view, &grid.lists[t], x, y, cutoffs, probe, None);
                    stats.blended += s.blended;
                    stats.clamped += s.clamped;
                    samples.push(s);
                }
            }
            (samples, stats)
        })
        .collect();

    let mut images = allocate(outputs, w, h);
    let mut stats = RenderStats::default();
    for (t, (samples, tile_stats)) in tiles.iter().enumerate() {
        let (xs, ys) = grid.bounds(t, w, h);
        let mut it = samples.iter();
        for y in ys {
            for x in xs.clone() {
                store(&mut images, x, y, it.next().expect("one sample per pixel"));
            }
        }
        stats.merge(tile_stats);
    }
    finish(view, images, stats)
}

/// Tiled parallel render.
pub fn render(request: &RenderRequest) -> Result<RenderOutput> {
    render_probed(request, None)
}

/// [`render`] with one Gaussian's blend terms perturbed.
pub fn render_probed(request: &RenderRequest, probe: Option<&Probe>) -> Result<RenderOutput> {
    request.validate()?;
    let view = prepare_view(
        request.scene,
        request.camera,
        request.mode,
        request.rig,
        request.cutoffs.alpha_skip,
    )?;
    Ok(render_prepared(
        &view,
        &request.outputs,
        request.tile_size,
        request.cutoffs,
        probe,
    ))
}

/// Single-threaded oracle: every pixel blends every visible fragment with no
/// skipping and no early termination. Ignores the request's tiling and cutoffs.
pub fn render_reference(request: &RenderRequest) -> Result<RenderOutput> {
    request.validate()?;
    let view = prepare_view(
        request.scene,
        request.camera,
        request.mode,
        request.rig,
        0.0,
    )?;
    let (w, h) = (view.camera.width, view.camera.height);
    let all: Vec<usize> = (0..view.fragments.len()).collect();
    let mut images = allocate(&request.outputs, w, h);
    let mut stats = RenderStats::default();
    for y in 0..h {
        for x in 0..w {
            let s = pixel_kernel(&view, &all, x, y, Cutoffs::EXACT, None, None);
            stats.blended += s.blended;
            stats.clamped += s.clamped;
            store(&mut images, x, y, &s);
        }
    }
    Ok(finish(&view, images, stats))
}
