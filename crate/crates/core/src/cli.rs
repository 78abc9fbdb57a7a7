//! Command-line surface: `generate`, `render`, `fit`, `gradcheck` and `compare`.
//!
//! Exit codes: 0 success, 1 failure (failed check, I/O, numerical trouble),
//! 2 usage error. Standard output starts with a versioned header line
//! followed by `key: value` lines.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::compositing::OpacityMode;
use crate::error::Error;
use crate::geometry::{Camera, Material};
use crate::grad::{finite_difference_check, BackwardOptions, CheckStatus, ParamSelection};
use crate::optim::{fit, FitConfig, LearningRates, View};
use crate::render::{render, OutputKind, RenderRequest, DEFAULT_TILE_SIZE};
use crate::scene_io::{
    self, generate_synthetic_scene, load_dataset, load_scene, save_dataset, save_scene, Dataset,
    DatasetView, Scene, SceneSpec, Split, PSNR_SENTINEL_DB,
};

pub const SUMMARY_VERSION: u32 = 1;
pub const COMPARE_VERSION: u32 = 1;
pub const THREADS_ENV: &str = "OMG_THREADS";

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Default)]
pub struct CommandOutcome {
    pub code: i32,
    pub artifacts: Vec<PathBuf>,
    /// Text for standard output.
    pub summary: String,
    /// Text for standard error.
    pub diagnostic: String,
}

#[derive(Parser, Debug)]
#[command(
    name = "omg",
    version,
    about = "Gaussian-splatting inverse renderer with material-aware opacity"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic scene and its ground-truth views.
    Generate(GenerateArgs),
    /// Render maps of a scene from one of its cameras.
    Render(RenderArgs),
    /// Fit opacities, materials and the network to a set of views.
    Fit(FitArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Score two scenes against the same views.
    Compare(CompareArgs),
}

#[derive(Args, Debug)]
struct GenerateArgs {
    /// TOML file of generator settings; flags below override it.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    /// Number of training cameras.
    #[arg(long)]
    cameras: Option<usize>,
    #[arg(long)]
    held_out: Option<usize>,
    /// Linear RGB behind the scene.
    #[arg(long, value_delimiter = ',')]
    background: Option<Vec<f64>>,
    /// Generate without a cross-section network (only baseline mode can render it).
    #[arg(long)]
    no_network: bool,
    #[arg(long, default_value = "omg")]
    mode: OpacityMode,
    #[arg(long)]
    out_scene: PathBuf,
    #[arg(long)]
    out_views: PathBuf,
}

#[derive(Args, Debug)]
struct RenderArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long, default_value_t = 0)]
    camera_index: usize,
    #[arg(long, default_value = "omg")]
    mode: OpacityMode,
    /// Comma-separated output kinds.
    #[arg(long, value_delimiter = ',', default_value = "color")]
    outputs: Vec<OutputKind>,
    #[arg(long, default_value_t = DEFAULT_TILE_SIZE)]
    tile_size: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[arg(long)]
    scene_init: PathBuf,
    #[arg(long)]
    views: PathBuf,
    #[arg(long, default_value = "omg")]
    mode: OpacityMode,
    #[arg(long, default_value_t = 2000)]
    iters: usize,
    #[arg(long, default_value_t = LearningRates::default().opacity)]
    lr_opacity: f64,
    #[arg(long, default_value_t = LearningRates::default().material)]
    lr_material: f64,
    #[arg(long, default_value_t = LearningRates::default().network)]
    lr_network: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = FitConfig::default().views_per_step)]
    views_per_step: usize,
    #[arg(long, default_value_t = 100)]
    log_interval: usize,
    /// Set every material parameter to this value before fitting.
    #[arg(long)]
    reset_materials: Option<f64>,
    /// Add seeded Gaussian noise of this standard deviation to raw opacities before fitting.
    #[arg(long)]
    opacity_noise: Option<f64>,
    #[arg(long)]
    out_scene: PathBuf,
    #[arg(long)]
    out_history: PathBuf,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long, default_value = "omg")]
    mode: OpacityMode,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0)]
    camera_index: usize,
    /// Also check means, scales, rotations and normals.
    #[arg(long)]
    geometry: bool,
    /// Network parameters checked besides the output layer.
    #[arg(long, default_value_t = 128)]
    network_sample: usize,
    /// Standard deviation of the perturbation that produces the target image.
    #[arg(long, default_value_t = 0.3)]
    jitter: f64,
    #[arg(long)]
    report: Option<PathBuf>,
    /// Corrupt one blend term of the backward pass.
    #[cfg(feature = "fault-injection")]
    #[arg(long, value_parser = ["color", "alpha", "suffix"])]
    corrupt_term: Option<String>,
}

#[derive(Args, Debug)]
struct CompareArgs {
    #[arg(long)]
    scene_a: PathBuf,
    #[arg(long)]
    scene_b: PathBuf,
    #[arg(long, default_value = "omg")]
    mode_a: OpacityMode,
    #[arg(long, default_value = "omg")]
    mode_b: OpacityMode,
    #[arg(long)]
    views: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

enum Failure {
    Usage(String),
    Failed(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Failed(e.to_string())
    }
}

type CmdResult<T = ()> = std::result::Result<T, Failure>;

/// Collects summary lines and artifacts for one command.
struct Report {
    command: &'static str,
    lines: Vec<(String, String)>,
    artifacts: Vec<PathBuf>,
    code: i32,
    diagnostic: String,
}

impl Report {
    fn new(command: &'static str) -> Self {
        Report {
            command,
            lines: Vec::new(),
            artifacts: Vec::new(),
            code: EXIT_OK,
            diagnostic: String::new(),
        }
    }

    fn put(&mut self, key: &str, value: impl std::fmt::Display) {
        self.lines.push((key.to_string(), value.to_string()));
    }

    fn summary(&self) -> String {
        let mut s = format!("omg-summary v{SUMMARY_VERSION} {}\n", self.command);
        for (k, v) in &self.lines {
            let _ = writeln!(s, "{k}: {v}");
        }
        for a in &self.artifacts {
            let _ = writeln!(s, "artifact: {}", a.display());
        }
        s
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> CommandOutcome
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let (summary, diagnostic) = if code == EXIT_OK {
                (text, String::new())
            } else {
                (String::new(), text)
            };
            return CommandOutcome {
                code,
                summary,
                diagnostic,
                ..CommandOutcome::default()
            };
        }
    };
    if let Err(msg) = configure_threads() {
        return CommandOutcome {
            code: EXIT_USAGE,
            diagnostic: msg,
            ..CommandOutcome::default()
        };
    }

    let (name, result) = match &cli.command {
        Command::Generate(a) => ("generate", cmd_generate(a)),
        Command::Render(a) => ("render", cmd_render(a)),
        Command::Fit(a) => ("fit", cmd_fit(a)),
        Command::Gradcheck(a) => ("gradcheck", cmd_gradcheck(a)),
        Command::Compare(a) => ("compare", cmd_compare(a)),
    };
    match result {
        Ok(report) => CommandOutcome {
            code: report.code,
            summary: report.summary(),
            artifacts: report.artifacts,
            diagnostic: report.diagnostic,
        },
        Err(Failure::Usage(msg)) => CommandOutcome {
            code: EXIT_USAGE,
            diagnostic: format!("omg {name}: usage error: {msg}\n"),
            ..CommandOutcome::default()
        },
        Err(Failure::Failed(msg)) => CommandOutcome {
            code: EXIT_FAILURE,
            diagnostic: format!("omg {name}: error: {msg}\n"),
            ..CommandOutcome::default()
        },
    }
}

fn configure_threads() -> std::result::Result<(), String> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("{THREADS_ENV} must be a positive integer, got `{raw}`\n"))?;
    // The global pool can only be set once per process; later calls keep the first size.
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global();
    Ok(())
}

fn read_spec(path: &Path) -> CmdResult<SceneSpec> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::from(Error::io(path, e)))?;
    toml::from_str(&text)
        .map_err(|e| Failure::Usage(format!("{}: {}", path.display(), e.message().trim())))
}

fn cmd_generate(a: &GenerateArgs) -> CmdResult<Report> {
    let mut spec = match &a.spec {
        Some(p) => read_spec(p)?,
        None => SceneSpec::default(),
    };
    let overrides = [
        (a.count, &mut spec.count),
        (a.width, &mut spec.width),
        (a.height, &mut spec.height),
        (a.cameras, &mut spec.camera_count),
        (a.held_out, &mut spec.held_out),
    ];
    for (flag, field) in overrides {
        if let Some(v) = flag {
            *field = v;
        }
    }
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if let Some(bg) = &a.background {
        spec.background = <[f64; 3]>::try_from(bg.as_slice()).map_err(|_| {
            Failure::Usage(format!("--background takes 3 values, got {}", bg.len()))
        })?;
    }
    if a.no_network {
        spec.with_network = false;
    }
    spec.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    if a.mode == OpacityMode::Omg && !spec.with_network {
        return Err(Failure::Usage("network required for omg mode".into()));
    }

    let (scene, train) = generate_synthetic_scene(&spec)?;
    let held = spec.held_out_cameras()?;
    let mut views = Vec::with_capacity(train.len() + held.len());
    for (cams, split) in [(&train, Split::Train), (&held, Split::HeldOut)] {
        for cam in cams {
            let out = render(
                &RenderRequest::new(&scene, cam, a.mode)
                    .with_outputs(&[OutputKind::Color, OutputKind::AlbedoMap]),
            )?;
            views.push(DatasetView {
                camera: cam.clone(),
                image: out.color()?.clone(),
                albedo: Some(out.image(OutputKind::AlbedoMap)?.clone()),
                split,
            });
        }
    }
    if let Some(dir) = a.out_scene.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Failure::from(Error::io(dir, e)))?;
    }
    save_scene(&a.out_scene, &scene)?;

    let mut r = Report::new("generate");
    r.artifacts.push(a.out_scene.clone());
    r.artifacts.extend(save_dataset(
        &a.out_views,
        &Dataset {
            mode: Some(a.mode),
            views,
        },
    )?);
    r.put("mode", a.mode);
    r.put("seed", spec.seed);
    r.put("gaussians", scene.gaussians.len());
    r.put("train_views", train.len());
    r.put("held_out_views", held.len());
    r.put("resolution", format!("{}x{}", spec.width, spec.height));
    Ok(r)
}

fn scene_camera(scene: &Scene, index: usize) -> CmdResult<&Camera> {
    if scene.cameras.is_empty() {
        return Err(Failure::Failed("scene has no cameras".into()));
    }
    scene.cameras.get(index).ok_or_else(|| {
        Failure::Usage(format!(
            "camera index {index} out of range, scene has {} cameras",
            scene.cameras.len()
        ))
    })
}

fn cmd_render(a: &RenderArgs) -> CmdResult<Report> {
    if a.tile_size == 0 {
        return Err(Failure::Usage("tile size must be positive".into()));
    }
    let scene = load_scene(&a.scene)?;
    let camera = scene_camera(&scene, a.camera_index)?;
    let out = render(
        &RenderRequest::new(&scene, camera, a.mode)
            .with_outputs(&a.outputs)
            .with_tile_size(a.tile_size),
    )?;
    std::fs::create_dir_all(&a.out).map_err(|e| Failure::from(Error::io(&a.out, e)))?;

    let mut r = Report::new("render");
    for (kind, image) in &out.images {
        for ext in ["png", "pfm"] {
            let path = a.out.join(format!("{}.{ext}", kind.name()));
            scene_io::write_image(&path, image)?;
            r.artifacts.push(path);
        }
    }
    r.put("mode", a.mode);
    r.put("camera_index", a.camera_index);
    r.put("resolution", format!("{}x{}", camera.width, camera.height));
    r.put("visible", out.stats.visible);
    r.put("culled", out.stats.culled);
    r.put("blended", out.stats.blended);
    r.put("clamped", out.stats.clamped);
    Ok(r)
}

fn to_views<'a>(views: impl Iterator<Item = &'a DatasetView>) -> Vec<View> {
    views
        .map(|v| View {
            camera: v.camera.clone(),
            target: v.image.clone(),
        })
        .collect()
}

fn cmd_fit(a: &FitArgs) -> CmdResult<Report> {
    let mut scene = load_scene(&a.scene_init)?;
    let data = load_dataset(&a.views)?;
    let train = to_views(data.split(Split::Train));
    let held = to_views(data.split(Split::HeldOut));

    if let Some(v) = a.reset_materials {
        if !(0.0..=1.0).contains(&v) {
            return Err(Failure::Usage(format!(
                "--reset-materials {v} must lie in [0, 1]"
            )));
        }
        scene
            .gaussians
            .iter_mut()
            .for_each(|g| g.material = Material::uniform(v));
    }
    if let Some(std) = a.opacity_noise {
        let noise =
            Normal::new(0.0, std).map_err(|e| Failure::Usage(format!("--opacity-noise: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
        scene
            .gaussians
            .iter_mut()
            .for_each(|g| g.raw_opacity += noise.sample(&mut rng));
    }

    let config = FitConfig {
        iterations: a.iters,
        mode: a.mode,
        rates: LearningRates {
            opacity: a.lr_opacity,
            material: a.lr_material,
            network: a.lr_network,
        },
        seed: a.seed,
        views_per_step: a.views_per_step,
        log_interval: a.log_interval,
        ..FitConfig::default()
    };
    config
        .validate()
        .map_err(|e| Failure::Usage(e.to_string()))?;
    let result = fit(&scene, &train, &held, &config)?;

    for path in [&a.out_scene, &a.out_history] {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Failure::from(Error::io(dir, e)))?;
        }
    }
    save_scene(&a.out_scene, &result.scene)?;
    std::fs::write(&a.out_history, result.history.to_tsv())
        .map_err(|e| Failure::from(Error::io(&a.out_history, e)))?;

    let mut r = Report::new("fit");
    r.artifacts.push(a.out_scene.clone());
    r.artifacts.push(a.out_history.clone());
    r.put("mode", a.mode);
    r.put("iterations", a.iters);
    r.put("train_views", train.len());
    r.put("held_out_views", held.len());
    if let Some(last) = result.history.last() {
        r.put("final_loss", format!("{:.6e}", last.loss));
        r.put("train_psnr", format!("{:.4}", last.train_psnr));
        if let Some(h) = last.held_out_psnr {
            r.put("held_out_psnr", format!("{h:.4}"));
        }
    }
    Ok(r)
}

/// Target for a gradient check: the scene with seeded noise on materials and opacities.
fn jittered(scene: &Scene, jitter: f64, seed: u64) -> CmdResult<Scene> {
    let noise = Normal::new(0.0, jitter).map_err(|e| Failure::Usage(format!("--jitter: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_7a26);
    let mut out = scene.clone();
    for g in &mut out.gaussians {
        let mut f = g.material.features();
        f.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
        g.material = Material::from_features(&f).clamped();
        g.raw_opacity += noise.sample(&mut rng);
    }
    Ok(out)
}

fn cmd_gradcheck(a: &GradcheckArgs) -> CmdResult<Report> {
    if !(1e-7..=1e-3).contains(&a.eps) || !(a.tol > 0.0) {
        return Err(Failure::Usage(
            "--eps must lie in [1e-7, 1e-3] and --tol must be positive".into(),
        ));
    }
    let scene = load_scene(&a.scene)?;
    if a.mode == OpacityMode::Omg {
        scene.network()?;
    }
    let camera = scene_camera(&scene, a.camera_index)?;
    let target = render(&RenderRequest::new(
        &jittered(&scene, a.jitter, a.seed)?,
        camera,
        a.mode,
    ))?
    .color()?
    .clone();

    #[allow(unused_mut)]
    let mut opts = BackwardOptions::default();
    #[cfg(feature = "fault-injection")]
    {
        use crate::render::ProbeTerm;
        opts.corrupt = a.corrupt_term.as_deref().map(|t| match t {
            "color" => ProbeTerm::Color,
            "alpha" => ProbeTerm::OwnAlpha,
            _ => ProbeTerm::Suffix,
        });
    }
    let selection = ParamSelection {
        geometry: a.geometry,
        network_sample: Some(a.network_sample),
        ..ParamSelection::default()
    };
    let report = finite_difference_check(
        &scene,
        camera,
        a.mode,
        &scene.lights,
        &target,
        &selection,
        a.eps,
        a.tol,
        a.seed,
        &opts,
    )?;

    let mut r = Report::new("gradcheck");
    if let Some(path) = &a.report {
        std::fs::write(path, report.to_tsv()).map_err(|e| Failure::from(Error::io(path, e)))?;
        r.artifacts.push(path.clone());
    }
    r.put("mode", a.mode);
    r.put("eps", a.eps);
    r.put("tol", a.tol);
    r.put("checked", report.records.len());
    r.put("passed", report.passed());
    r.put("failed", report.failed());
    r.put("excluded", report.excluded());
    r.put("max_rel_error", format!("{:.3e}", report.max_rel_error()));
    let terms: Vec<&str> = report
        .failing_terms()
        .into_iter()
        .map(crate::grad::term_name)
        .collect();
    r.put(
        "failing_terms",
        if terms.is_empty() {
            "none".to_string()
        } else {
            terms.join(",")
        },
    );
    if !report.all_passed() {
        r.code = EXIT_FAILURE;
        for rec in report
            .records
            .iter()
            .filter(|x| x.status == CheckStatus::Fail)
        {
            let _ = writeln!(
                r.diagnostic,
                "FAIL {}: analytic {:.6e} numeric {:.6e} rel {:.3e}",
                rec.id, rec.analytic, rec.numeric, rec.rel_error
            );
        }
    }
    Ok(r)
}

fn same_camera(a: &Camera, b: &Camera) -> bool {
    let close = |x: f64, y: f64| (x - y).abs() <= 1e-9 * (1.0 + x.abs().max(y.abs()));
    a.width == b.width
        && a.height == b.height
        && (a.position - b.position).amax() <= 1e-9
        && (a.rotation - b.rotation).amax() <= 1e-9
        && close(a.focal[0], b.focal[0])
        && close(a.focal[1], b.focal[1])
        && close(a.principal[0], b.principal[0])
        && close(a.principal[1], b.principal[1])
}

/// A scene that carries cameras must carry exactly the dataset's training cameras.
fn check_cameras(label: &str, scene: &Scene, data: &Dataset) -> CmdResult {
    if scene.cameras.is_empty() {
        return Ok(());
    }
    let train: Vec<&Camera> = data.split(Split::Train).map(|v| &v.camera).collect();
    if scene.cameras.len() != train.len()
        || scene
            .cameras
            .iter()
            .zip(&train)
            .any(|(a, b)| !same_camera(a, b))
    {
        return Err(Failure::Failed(format!(
            "camera mismatch: scene {label} has {} cameras that do not match the {} training views",
            scene.cameras.len(),
            train.len()
        )));
    }
    Ok(())
}

struct Scores {
    psnr: f64,
    ssim: f64,
    albedo_mse: Option<f64>,
}

fn score(scene: &Scene, mode: OpacityMode, view: &DatasetView) -> CmdResult<Scores> {
    let out = render(
        &RenderRequest::new(scene, &view.camera, mode)
            .with_outputs(&[OutputKind::Color, OutputKind::AlbedoMap]),
    )?;
    let color = out.color()?;
    let albedo_mse = match &view.albedo {
        Some(t) => Some(scene_io::standardized_mse(
            out.image(OutputKind::AlbedoMap)?,
            t,
        )?),
        None => None,
    };
    Ok(Scores {
        psnr: scene_io::psnr(color, &view.image, 1.0)?,
        ssim: scene_io::ssim(color, &view.image, 1.0)?,
        albedo_mse,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("nan".to_string(), |x| format!("{x:.6e}"))
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

fn cmd_compare(a: &CompareArgs) -> CmdResult<Report> {
    let scene_a = load_scene(&a.scene_a)?;
    let scene_b = load_scene(&a.scene_b)?;
    let data = load_dataset(&a.views)?;
    check_cameras("a", &scene_a, &data)?;
    check_cameras("b", &scene_b, &data)?;

    let mut rows = Vec::with_capacity(data.views.len());
    for v in &data.views {
        rows.push((
            v.split,
            score(&scene_a, a.mode_a, v)?,
            score(&scene_b, a.mode_b, v)?,
        ));
    }

    let mut table = format!("# omg-compare v{COMPARE_VERSION}\n");
    let _ = writeln!(table, "# a\t{}\t{}", a.scene_a.display(), a.mode_a);
    let _ = writeln!(table, "# b\t{}\t{}", a.scene_b.display(), a.mode_b);
    table.push_str("view\tsplit\tpsnr_a\tssim_a\talbedo_mse_a\tpsnr_b\tssim_b\talbedo_mse_b\n");
    for (i, (split, sa, sb)) in rows.iter().enumerate() {
        let split = match split {
            Split::Train => "train",
            Split::HeldOut => "held_out",
        };
        let _ = writeln!(
            table,
            "{i}\t{split}\t{:.6}\t{:.6}\t{}\t{:.6}\t{:.6}\t{}",
            sa.psnr,
            sa.ssim,
            fmt_opt(sa.albedo_mse),
            sb.psnr,
            sb.ssim,
            fmt_opt(sb.albedo_mse)
        );
    }
    let psnr_a = mean(rows.iter().map(|r| r.1.psnr));
    let psnr_b = mean(rows.iter().map(|r| r.2.psnr));
    let ssim_a = mean(rows.iter().map(|r| r.1.ssim));
    let ssim_b = mean(rows.iter().map(|r| r.2.ssim));
    let alb_a = mean(rows.iter().filter_map(|r| r.1.albedo_mse));
    let alb_b = mean(rows.iter().filter_map(|r| r.2.albedo_mse));
    let _ = writeln!(
        table,
        "mean\tall\t{psnr_a:.6}\t{ssim_a:.6}\t{alb_a:.6e}\t{psnr_b:.6}\t{ssim_b:.6}\t{alb_b:.6e}"
    );
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Failure::from(Error::io(dir, e)))?;
    }
    std::fs::write(&a.out, table).map_err(|e| Failure::from(Error::io(&a.out, e)))?;

    let mut r = Report::new("compare");
    r.artifacts.push(a.out.clone());
    r.put("views", rows.len());
    r.put("psnr_cap", PSNR_SENTINEL_DB);
    r.put("mean_psnr_a", format!("{psnr_a:.4}"));
    r.put("mean_psnr_b", format!("{psnr_b:.4}"));
    r.put("mean_ssim_a", format!("{ssim_a:.6}"));
    r.put("mean_ssim_b", format!("{ssim_b:.6}"));
    r.put("albedo_mse_a", format!("{alb_a:.6e}"));
    r.put("albedo_mse_b", format!("{alb_b:.6e}"));
    Ok(r)
}
