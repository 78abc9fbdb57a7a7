//! Adam and the multi-view fitting loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::compositing::OpacityMode;
use crate::error::{Error, Result};
use crate::geometry::{Camera, Material};
use crate::grad::{evaluate_view, BackwardOptions, GradientSet};
use crate::render::RenderRequest;
use crate::scene_io::metrics::{mse, psnr_from_mse};
use crate::scene_io::{ImageBuffer, Scene};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LearningRates {
    pub opacity: f64,
    pub material: f64,
    pub network: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates {
            opacity: 0.05,
            material: 0.01,
            network: 1e-3,
        }
    }
}

impl LearningRates {
    fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("opacity", self.opacity),
            ("material", self.material),
            ("network", self.network),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!(
                    "{name} learning rate must be positive, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Trainable scalars split into their learning-rate groups.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamGroups {
    /// Raw opacity per Gaussian.
    pub opacity: Vec<f64>,
    /// Five material features per Gaussian.
    pub material: Vec<f64>,
    pub network: Vec<f64>,
}

impl ParamGroups {
    pub fn from_scene(scene: &Scene) -> Self {
        ParamGroups {
            opacity: scene.gaussians.iter().map(|g| g.raw_opacity).collect(),
            material: scene
                .gaussians
                .iter()
                .flat_map(|g| g.material.features())
                .collect(),
            network: scene
                .network
                .as_ref()
                .map(|n| n.flat_params())
                .unwrap_or_default(),
        }
    }

    pub fn from_grads(grads: &GradientSet) -> Self {
        ParamGroups {
            opacity: grads.gaussians.iter().map(|g| g.raw_opacity).collect(),
            material: grads.gaussians.iter().flat_map(|g| g.material).collect(),
            network: grads
                .network
                .as_ref()
                .map(|n| n.flatten())
                .unwrap_or_default(),
        }
    }

    pub fn zeros_like(other: &ParamGroups) -> Self {
        ParamGroups {
            opacity: vec![0.0; other.opacity.len()],
            material: vec![0.0; other.material.len()],
            network: vec![0.0; other.network.len()],
        }
    }

    fn shape(&self) -> [usize; 3] {
        [self.opacity.len(), self.material.len(), self.network.len()]
    }

    /// Writes the parameters back, clamping materials into `[0, 1]`.
    pub fn apply_to(&self, scene: &mut Scene) -> Result<()> {
        let n = scene.gaussians.len();
        if self.opacity.len() != n || self.material.len() != 5 * n {
            return Err(Error::invalid("parameter groups do not match the scene"));
        }
        for (i, g) in scene.gaussians.iter_mut().enumerate() {
            g.raw_opacity = self.opacity[i];
            let f: [f64; 5] = std::array::from_fn(|k| self.material[5 * i + k]);
            g.material = Material::from_features(&f).clamped();
        }
        match &mut scene.network {
            Some(net) => net.set_flat_params(&self.network)?,
            None if !self.network.is_empty() => return Err(Error::invalid("scene has no network")),
            None => {}
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub hyper: AdamHyper,
    pub rates: LearningRates,
    pub step: u64,
    pub m: ParamGroups,
    pub v: ParamGroups,
}

impl AdamState {
    pub fn new(params: &ParamGroups, hyper: AdamHyper, rates: LearningRates) -> Self {
        AdamState {
            hyper,
            rates,
            step: 0,
            m: ParamGroups::zeros_like(params),
            v: ParamGroups::zeros_like(params),
        }
    }
}

fn adam_group(
    h: &AdamHyper,
    t: u64,
    lr: f64,
    p: &mut [f64],
    g: &[f64],
    m: &mut [f64],
    v: &mut [f64],
) {
    let c1 = 1.0 - h.beta1.powf(t as f64);
    let c2 = 1.0 - h.beta2.powf(t as f64);
    for i in 0..p.len() {
        m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g[i];
        v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g[i] * g[i];
        let mhat = m[i] / c1;
        let vhat = v[i] / c2;
        p[i] -= lr * mhat / (vhat.sqrt() + h.eps);
    }
}

/// One bias-corrected Adam update of every group.
pub fn adam_step(
    state: &mut AdamState,
    params: &mut ParamGroups,
    grads: &ParamGroups,
) -> Result<()> {
    if params.shape() != grads.shape() || params.shape() != state.m.shape() {
        return Err(Error::invalid(format!(
            "adam shapes differ: params {:?}, grads {:?}, state {:?}",
            params.shape(),
            grads.shape(),
            state.m.shape()
        )));
    }
    state.step += 1;
    let (h, t, r) = (state.hyper, state.step, state.rates);
    adam_group(
        &h,
        t,
        r.opacity,
        &mut params.opacity,
        &grads.opacity,
        &mut state.m.opacity,
        &mut state.v.opacity,
    );
    adam_group(
        &h,
        t,
        r.material,
        &mut params.material,
        &grads.material,
        &mut state.m.material,
        &mut state.v.material,
    );
    adam_group(
        &h,
        t,
        r.network,
        &mut params.network,
        &grads.network,
        &mut state.m.network,
        &mut state.v.network,
    );
    Ok(())
}

/// A training or evaluation view.
#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub camera: Camera,
    pub target: ImageBuffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitConfig {
    pub iterations: usize,
    pub mode: OpacityMode,
    pub rates: LearningRates,
    pub hyper: AdamHyper,
    pub seed: u64,
    pub views_per_step: usize,
    pub log_interval: usize,
    pub backward: BackwardOptions,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            iterations: 2000,
            mode: OpacityMode::Omg,
            rates: LearningRates::default(),
            hyper: AdamHyper::default(),
            seed: 0,
            views_per_step: 2,
            log_interval: 100,
            backward: BackwardOptions::default(),
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        self.rates.validate()?;
        if self.views_per_step == 0 || self.log_interval == 0 {
            return Err(Error::invalid(
                "views per step and log interval must be positive",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HistoryEntry {
    pub iteration: usize,
    /// Mean squared error over all training views.
    pub loss: f64,
    pub train_psnr: f64,
    pub held_out_psnr: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FitHistory {
    pub entries: Vec<HistoryEntry>,
}

impl FitHistory {
    pub fn last(&self) -> Option<&HistoryEntry> {
        self.entries.last()
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("iteration\tloss\ttrain_psnr\theld_out_psnr\n");
        for e in &self.entries {
            let held = e
                .held_out_psnr
                .map_or("-".to_string(), |p| format!("{p:.6}"));
            s.push_str(&format!(
                "{}\t{:.9e}\t{:.6}\t{held}\n",
                e.iteration, e.loss, e.train_psnr
            ));
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub scene: Scene,
    pub history: FitHistory,
}

fn check_views(views: &[View]) -> Result<()> {
    for (i, v) in views.iter().enumerate() {
        v.camera.validate()?;
        let t = &v.target;
        if t.width != v.camera.width || t.height != v.camera.height || t.channels != 3 {
            return Err(Error::invalid(format!(
                "view {i}: target is {}x{}x{}, camera renders {}x{}x3",
                t.width, t.height, t.channels, v.camera.width, v.camera.height
            )));
        }
    }
    Ok(())
}

/// Mean squared error over a set of views, pooled over every pixel-channel.
pub fn dataset_mse(scene: &Scene, views: &[View], mode: OpacityMode) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0.0;
    for v in views {
        let out = crate::render::render(&RenderRequest::new(scene, &v.camera, mode))?;
        let n = v.target.len() as f64;
        total += mse(out.color()?, &v.target)? * n;
        count += n;
    }
    Ok(total / count)
}

fn log_entry(
    scene: &Scene,
    iteration: usize,
    train: &[View],
    held_out: &[View],
    mode: OpacityMode,
) -> Result<HistoryEntry> {
    let loss = dataset_mse(scene, train, mode)?;
    if !loss.is_finite() {
        return Err(Error::Diverged { iteration, loss });
    }
    let held_out_psnr = if held_out.is_empty() {
        None
    } else {
        Some(psnr_from_mse(dataset_mse(scene, held_out, mode)?, 1.0))
    };
    Ok(HistoryEntry {
        iteration,
        loss,
        train_psnr: psnr_from_mse(loss, 1.0),
        held_out_psnr,
    })
}

/// Minimizes the mean squared color error over `train` with Adam.
///
/// Views are visited round-robin in a seed-dependent order. Geometry stays
/// fixed; opacity, materials and (if present) the network are trained from the
/// first step. History is logged at iteration 0, every `log_interval` steps and
/// at the end.
pub fn fit(
    scene_init: &Scene,
    train: &[View],
    held_out: &[View],
    config: &FitConfig,
) -> Result<FitResult> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("fitting needs at least one training view"));
    }
    check_views(train)?;
    check_views(held_out)?;
    scene_init.validate()?;

    let mut scene = scene_init.clone();
    let mut params = ParamGroups::from_scene(&scene);
    let mut adam = AdamState::new(&params, config.hyper, config.rates);
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed));

    let mut history = FitHistory::default();
    history
        .entries
        .push(log_entry(&scene, 0, train, held_out, config.mode)?);
    let mut cursor = 0;
    for it in 1..=config.iterations {
        let mut grads = GradientSet::zeros(&scene);
        let mut loss = 0.0;
        for _ in 0..config.views_per_step {
            let v = &train[order[cursor % order.len()]];
            cursor += 1;
            let ev = evaluate_view(&scene, &v.camera, config.mode, &v.target, &config.backward)?;
            loss += ev.loss;
            grads.add_assign(&ev.grad)?;
        }
        let k = 1.0 / config.views_per_step as f64;
        loss *= k;
        grads.scale(k);
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::Diverged {
                iteration: it,
                loss,
            });
        }
        adam_step(&mut adam, &mut params, &ParamGroups::from_grads(&grads))?;
        params.apply_to(&mut scene)?;
        // keep the optimizer's copy inside the valid range too
        params
            .material
            .iter_mut()
            .for_each(|v| *v = v.clamp(0.0, 1.0));
        if it % config.log_interval == 0 || it == config.iterations {
            history
                .entries
                .push(log_entry(&scene, it, train, held_out, config.mode)?);
        }
    }
    Ok(FitResult { scene, history })
}
