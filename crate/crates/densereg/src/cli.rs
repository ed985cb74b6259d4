//! Command-line frontend: scene synthesis, fitting, refinement,
//! evaluation, gradient checking and the loss-ablation harness.
//!
//! Exit codes: 0 success, 2 usage error, 3 I/O or file-content error,
//! 4 numerical failure. `DENSEREG_THREADS` caps the worker pool.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{ring_rig, CameraRig};
use crate::meshio;
use crate::metrics::{self, RegionMasks, RegionStats, FULL_REGION};
use crate::model::{make_toy_model, ParametricModel};
use crate::optim::{
    self, DataTerm, FitConfig, FitError, FitScene, FitState, Variant, GRADCHECK_OBJECTIVES,
};
use crate::plot;
use crate::synth::{self, make_scene, NoiseSpec, ParamSpec, Scene, SynthError};
use crate::{pliks, Vec3};

// ---------------------------------------------------------------------------
// Errors and exit codes

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Io(String),
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Io(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Io(m) | CliError::Numeric(m) => m,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::HeadNotVisible => CliError::Usage(e.to_string()),
            other => CliError::Io(other.to_string()),
        }
    }
}

impl From<FitError> for CliError {
    fn from(e: FitError) -> Self {
        match e {
            FitError::Input(_) => CliError::Usage(e.to_string()),
            FitError::Container(_) | FitError::Checkpoint(_) => CliError::Io(e.to_string()),
            other => CliError::Numeric(other.to_string()),
        }
    }
}

impl From<metrics::MetricsError> for CliError {
    fn from(e: metrics::MetricsError) -> Self {
        match e {
            metrics::MetricsError::Io(_) | metrics::MetricsError::Schema(_) => {
                CliError::Io(e.to_string())
            }
            other => CliError::Usage(other.to_string()),
        }
    }
}

impl From<crate::model::ModelError> for CliError {
    fn from(e: crate::model::ModelError) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<crate::camera::RigError> for CliError {
    fn from(e: crate::camera::RigError) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<meshio::MeshIoError> for CliError {
    fn from(e: meshio::MeshIoError) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<crate::container::ContainerError> for CliError {
    fn from(e: crate::container::ContainerError) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<pliks::PliksError> for CliError {
    fn from(e: pliks::PliksError) -> Self {
        CliError::Numeric(e.to_string())
    }
}

type Result<T> = std::result::Result<T, CliError>;

// ---------------------------------------------------------------------------
// TOML run configuration

/// TOML run configuration: the full fit configuration plus input/output
/// paths. Unknown keys are rejected.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub fit: FitConfig,
    pub paths: RunPaths,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunPaths {
    pub model: Option<PathBuf>,
    pub rig: Option<PathBuf>,
    pub scene: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("cannot read config {path:?}: {e}")))?;
        let config: RunConfig = toml::from_str(&text)
            .map_err(|e| CliError::Usage(format!("config {path:?}: {e}")))?;
        for (name, p) in [
            ("model", &config.paths.model),
            ("rig", &config.paths.rig),
            ("scene", &config.paths.scene),
        ] {
            if let Some(p) = p {
                if !p.exists() {
                    return Err(CliError::Usage(format!(
                        "config path `paths.{name}` does not exist: {p:?}"
                    )));
                }
            }
        }
        Ok(config)
    }
}

// ---------------------------------------------------------------------------
// Argument definitions

#[derive(Parser, Debug)]
#[command(
    name = "densereg",
    version,
    about = "Registration-free fitting of a parametric head mesh to multi-view scans"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a deterministic toy head model container.
    Model(ModelArgs),
    /// Generate a synthetic scene directory from a model and a rig.
    Synth(SynthArgs),
    /// Run the coarse registration-free fit on a scene.
    Fit(FitArgs),
    /// Refine a coarse fit with test-time optimization.
    Tto(TtoArgs),
    /// Evaluate a fitted mesh against a scan: region stats and heatmaps.
    Eval(EvalArgs),
    /// Run seeded ablation trials over loss types, weights and TTO budgets.
    Ablate(AblateArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
pub struct ModelArgs {
    /// Output model container path.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Minimum vertex count (the generator rounds up to an icosphere size).
    #[arg(long, default_value_t = 642)]
    pub min_vertices: usize,
    #[arg(long, default_value_t = 8)]
    pub n_beta: usize,
    #[arg(long, default_value_t = 6)]
    pub n_psi: usize,
    #[arg(long, default_value_t = 4)]
    pub segments: usize,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Model container path.
    #[arg(long)]
    pub model: PathBuf,
    /// Output scene directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Rig JSON path; omit to build a camera ring.
    #[arg(long)]
    pub rig: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    pub views: usize,
    /// Ring radius (mm).
    #[arg(long, default_value_t = 1000.0)]
    pub radius: f64,
    /// Ring camera focal length (px).
    #[arg(long, default_value_t = 1200.0)]
    pub focal: f64,
    /// Ring camera resolution (px).
    #[arg(long, default_value_t = 512)]
    pub cam_res: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Scan-map render resolution.
    #[arg(long, default_value_t = 128)]
    pub resolution: usize,
    /// Gaussian scan vertex jitter (mm).
    #[arg(long, default_value_t = 0.0)]
    pub scan_jitter: f64,
    /// Gaussian landmark pixel noise.
    #[arg(long, default_value_t = 0.0)]
    pub landmark_noise: f64,
    /// Fraction of scan faces removed as holes.
    #[arg(long, default_value_t = 0.0)]
    pub hole_fraction: f64,
    /// Sample only rigid ground-truth motion (no shape/expression).
    #[arg(long, default_value_t = false)]
    pub rigid: bool,
    #[arg(long, default_value_t = 0.8)]
    pub beta_sd: f64,
    #[arg(long, default_value_t = 0.8)]
    pub psi_sd: f64,
    #[arg(long, default_value_t = 0.02)]
    pub theta_sd: f64,
    #[arg(long, default_value_t = 10.0)]
    pub trans_range: f64,
}

#[derive(Args, Debug)]
pub struct FitArgs {
    /// Scene directory produced by `densereg synth`.
    #[arg(long)]
    pub scene: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// TOML run configuration (flags override it).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Data term: pointmap (rendered maps), p2s, or chamfer.
    #[arg(long, value_parser = parse_data_term)]
    pub loss: Option<DataTerm>,
    /// Weight of the p2s/chamfer data term.
    #[arg(long)]
    pub data_weight: Option<f64>,
    /// Render resolution for the loss (defaults to the scene's).
    #[arg(long)]
    pub resolution: Option<usize>,
    /// Continue from the checkpoint in the output directory.
    #[arg(long, default_value_t = false)]
    pub resume: bool,
    /// Also dump the final inverse-solver result.
    #[arg(long, default_value_t = false)]
    pub dump_pliks: bool,
    /// Initialization: "landmarks" (triangulated rigid alignment) or
    /// "template".
    #[arg(long, default_value = "landmarks")]
    pub init: String,
    /// Initialize at the ground truth perturbed by this rigid offset (mm).
    #[arg(long)]
    pub perturb_rigid: Option<f64>,
    /// Smooth perturbation field RMS (mm), used with --perturb-rigid.
    #[arg(long, default_value_t = 0.0)]
    pub perturb_rms: f64,
    #[arg(long, default_value_t = 0)]
    pub perturb_seed: u64,
}

#[derive(Args, Debug)]
pub struct TtoArgs {
    #[arg(long)]
    pub scene: PathBuf,
    /// Coarse fit output directory or checkpoint file.
    #[arg(long)]
    pub coarse: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Refinement iterations.
    #[arg(long, default_value_t = 50)]
    pub iters: usize,
    /// Run the unregularized direct-vertex-optimization baseline.
    #[arg(long, default_value_t = false)]
    pub direct: bool,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub resolution: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Fitted mesh (.obj or .ply).
    #[arg(long)]
    pub mesh: PathBuf,
    /// Scan mesh (.obj or .ply); its vertices are the evaluation points.
    #[arg(long)]
    pub scan: PathBuf,
    /// Region masks JSON.
    #[arg(long)]
    pub masks: PathBuf,
    /// Rig JSON for per-view heatmaps.
    #[arg(long)]
    pub rig: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Heatmap clamp threshold (mm).
    #[arg(long, default_value_t = 1.0)]
    pub threshold: f64,
    #[arg(long, default_value_t = 512)]
    pub heatmap_res: usize,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Seeded trials per grid cell.
    #[arg(long, default_value_t = 20)]
    pub seeds: u64,
    /// Comma-separated data terms.
    #[arg(long, default_value = "pointmap,p2s,chamfer", value_delimiter = ',', value_parser = parse_data_term)]
    pub losses: Vec<DataTerm>,
    /// Comma-separated data-term weights.
    #[arg(long, default_value = "1.0", value_delimiter = ',')]
    pub weights: Vec<f64>,
    /// Comma-separated refinement budgets.
    #[arg(long, default_value = "5,10,20,50,100", value_delimiter = ',')]
    pub tto_iters: Vec<usize>,
    #[arg(long, default_value_t = 8)]
    pub views: usize,
    #[arg(long, default_value_t = 96)]
    pub resolution: usize,
    #[arg(long, default_value_t = 150)]
    pub coarse_iters: usize,
    #[arg(long, default_value_t = 0.0)]
    pub scan_jitter: f64,
    #[arg(long, default_value_t = 0.0)]
    pub hole_fraction: f64,
    /// Rigid init offset applied to the ground truth (mm).
    #[arg(long, default_value_t = 10.0)]
    pub perturb_rigid: f64,
    /// Smooth init field RMS (mm).
    #[arg(long, default_value_t = 5.0)]
    pub perturb_rms: f64,
    #[arg(long, default_value_t = false)]
    pub rigid: bool,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Objective to check (geom, landmark, edge, align, reg, refine, total).
    pub objective: Option<String>,
    /// Check every objective.
    #[arg(long, default_value_t = false)]
    pub all: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Override the per-objective default tolerance.
    #[arg(long)]
    pub tolerance: Option<f64>,
    #[arg(long, default_value_t = 64)]
    pub resolution: usize,
}

fn parse_data_term(s: &str) -> std::result::Result<DataTerm, String> {
    match s {
        "pointmap" => Ok(DataTerm::Pointmap),
        "p2s" => Ok(DataTerm::P2s),
        "chamfer" => Ok(DataTerm::Chamfer),
        other => Err(format!("unknown loss {other:?} (expected pointmap, p2s or chamfer)")),
    }
}

// ---------------------------------------------------------------------------
// Entry points

/// Parses `std::env::args`, configures the worker pool from
/// `DENSEREG_THREADS`, and runs. Returns the process exit code.
pub fn main() -> i32 {
    if let Ok(threads) = std::env::var("DENSEREG_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
        }
    }
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}

pub fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Model(args) => cmd_model(args),
        Command::Synth(args) => cmd_synth(args),
        Command::Fit(args) => cmd_fit(args),
        Command::Tto(args) => cmd_tto(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
    }
}

// ---------------------------------------------------------------------------
// Commands

fn cmd_model(args: ModelArgs) -> Result<()> {
    let model = make_toy_model(args.seed, args.min_vertices, args.n_beta, args.n_psi, args.segments);
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    model.save(&args.out)?;
    println!(
        "wrote model: {} vertices, {} faces, {} beta, {} psi, {} segments -> {}",
        model.n_vertices(),
        model.n_faces(),
        model.n_beta(),
        model.n_psi(),
        model.n_segments(),
        args.out.display()
    );
    Ok(())
}

fn load_rig_or_ring(
    rig: &Option<PathBuf>,
    model: &ParametricModel,
    views: usize,
    radius: f64,
    focal: f64,
    cam_res: u32,
) -> Result<CameraRig> {
    match rig {
        Some(path) => Ok(CameraRig::load(path)?),
        None => {
            let center = model.template.iter().sum::<Vec3>() / model.n_vertices() as f64;
            Ok(ring_rig(views, center, radius, focal, cam_res, cam_res))
        }
    }
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let model = ParametricModel::load(&args.model)?;
    let rig = load_rig_or_ring(&args.rig, &model, args.views, args.radius, args.focal, args.cam_res)?;
    let param_spec = if args.rigid {
        ParamSpec { trans_mm: args.trans_range, ..ParamSpec::rigid_only() }
    } else {
        ParamSpec {
            beta_sd: args.beta_sd,
            psi_sd: args.psi_sd,
            theta_sd: args.theta_sd,
            trans_mm: args.trans_range,
        }
    };
    let noise = NoiseSpec {
        scan_jitter_mm: args.scan_jitter,
        landmark_px: args.landmark_noise,
        hole_fraction: args.hole_fraction,
    };
    let scene = make_scene(
        &model,
        &rig,
        args.seed,
        &param_spec,
        &noise,
        (args.resolution, args.resolution),
    )?;
    scene.save(&model, &args.out)?;
    println!("{}", args.out.join("manifest.json").display());
    Ok(())
}

/// Loads a scene and re-renders scan maps when the requested loss
/// resolution differs from the stored one.
fn scene_for_fit(dir: &Path, resolution: Option<usize>) -> Result<(Scene, ParametricModel)> {
    let (mut scene, model) = Scene::load(dir)?;
    if let Some(res) = resolution {
        if (res, res) != scene.resolution {
            scene.gt_maps = scene
                .rig
                .cameras
                .iter()
                .map(|c| crate::raster::render(&scene.scan_vertices, &scene.scan_faces, c, res, res))
                .collect();
            scene.resolution = (res, res);
        }
    }
    Ok((scene, model))
}

fn build_fit_scene(scene: &Scene, model: ParametricModel) -> Result<FitScene> {
    Ok(FitScene::new(
        model,
        &scene.rig,
        scene.gt_maps.clone(),
        scene.landmarks.clone(),
        scene.scan_vertices.clone(),
        scene.scan_faces.clone(),
        scene.eye_mask.clone(),
    )?)
}

fn write_history_jsonl(path: &Path, history: &[crate::losses::LossReport]) -> Result<()> {
    let mut out = String::new();
    for (step, report) in history.iter().enumerate() {
        let record = serde_json::json!({
            "step": step,
            "total": report.total,
            "terms": report.terms,
            "raw": report.raw,
            "per_view_geom": report.per_view_geom,
            "masked_pixels": report.masked_pixels,
        });
        writeln!(out, "{record}").expect("writing to a string cannot fail");
    }
    fs::write(path, out)?;
    Ok(())
}

fn save_mesh_pair(dir: &Path, stem: &str, vertices: &[Vec3], faces: &[[u32; 3]]) -> Result<()> {
    meshio::save_obj(&dir.join(format!("{stem}.obj")), vertices, faces)?;
    meshio::save_ply(&dir.join(format!("{stem}.ply")), vertices, faces)?;
    Ok(())
}

fn fit_summary(
    scene: &Scene,
    fit_scene: &FitScene,
    verts: &[Vec3],
) -> Result<(RegionStats, usize)> {
    let stats = metrics::region_stats(
        &scene.scan_vertices,
        verts,
        &fit_scene.model.faces,
        &scene.masks,
    )?;
    let flipped = metrics::flipped_faces(verts, &fit_scene.model.template, &fit_scene.model.faces);
    Ok((stats, flipped))
}

fn cmd_fit(args: FitArgs) -> Result<()> {
    let run_config = args.config.as_deref().map(RunConfig::load).transpose()?.unwrap_or_default();
    let mut config = run_config.fit;
    config.variant = Variant::Coarse;
    if let Some(i) = args.iters {
        config.iterations = i;
    }
    if let Some(lr) = args.lr {
        config.learning_rate = lr;
    }
    if let Some(loss) = args.loss {
        config.data_term = loss;
    }
    if let Some(w) = args.data_weight {
        config.data_weight = w;
    }
    let scene_dir = args
        .scene
        .or(run_config.paths.scene)
        .ok_or_else(|| CliError::Usage("missing --scene (or paths.scene in the config)".into()))?;
    let out = args
        .out
        .or(run_config.paths.output)
        .ok_or_else(|| CliError::Usage("missing --out (or paths.output in the config)".into()))?;
    fs::create_dir_all(&out)?;

    let (scene, model) = scene_for_fit(&scene_dir, args.resolution)?;
    config.render_width = scene.resolution.0;
    config.render_height = scene.resolution.1;
    let fit_scene = build_fit_scene(&scene, model)?;

    let init = if let Some(rigid) = args.perturb_rigid {
        synth::perturb_init(&scene.gt_mesh.vertices, rigid, args.perturb_rms, args.perturb_seed)
    } else {
        match args.init.as_str() {
            "landmarks" => {
                let cams: Vec<&crate::camera::Camera> = fit_scene.cams.iter().collect();
                let lms: Vec<&crate::losses::ViewLandmarks> = fit_scene.landmarks.iter().collect();
                optim::initial_alignment(&fit_scene.model.template, &cams, &lms)
            }
            "template" => fit_scene.model.template.clone(),
            other => {
                return Err(CliError::Usage(format!(
                    "unknown --init {other:?} (expected landmarks or template)"
                )))
            }
        }
    };

    let state_path = out.join("state.dregb");
    let mut state = if args.resume && state_path.exists() {
        FitState::load(&state_path)?
    } else {
        FitState::new(init)
    };
    optim::fit_coarse_continue(&fit_scene, &mut state, &config)?;

    save_mesh_pair(&out, "fitted_mesh", &state.v_pred, &fit_scene.model.faces)?;
    state.save(&state_path)?;
    write_history_jsonl(&out.join("history.jsonl"), &state.history)?;
    let totals: Vec<f64> = state.history.iter().map(|r| r.total).collect();
    plot::line_plot(&totals, 640, 360)
        .save(out.join("convergence.png"))
        .map_err(|e| CliError::Io(e.to_string()))?;
    if args.dump_pliks {
        if let Some(p) = &state.last_pliks {
            p.to_container().write_file(&out.join("pliks.dregb"))?;
        }
    }

    let (stats, flipped) = fit_summary(&scene, &fit_scene, &state.v_pred)?;
    write_stats(&out, &stats)?;
    let full = &stats.per_region[FULL_REGION];
    println!(
        "fit: {} steps, final loss {:.6e}, median p2s {:.4} mm ({}), flipped faces {}",
        state.step,
        state.history.last().map(|r| r.total).unwrap_or(f64::NAN),
        full.median,
        FULL_REGION,
        flipped
    );
    Ok(())
}

fn resolve_state_path(coarse: &Path) -> PathBuf {
    if coarse.is_dir() {
        coarse.join("state.dregb")
    } else {
        coarse.to_path_buf()
    }
}

fn cmd_tto(args: TtoArgs) -> Result<()> {
    fs::create_dir_all(&args.out)?;
    let (scene, model) = scene_for_fit(&args.scene, args.resolution)?;
    let fit_scene = build_fit_scene(&scene, model)?;
    let coarse = FitState::load(&resolve_state_path(&args.coarse))?;
    let anchor = coarse.v_pred.clone();

    let mut config = FitConfig {
        iterations: args.iters,
        render_width: scene.resolution.0,
        render_height: scene.resolution.1,
        variant: if args.direct { Variant::Direct } else { Variant::Tto },
        ..FitConfig::default()
    };
    if let Some(lr) = args.lr {
        config.learning_rate = lr;
    }

    let (before_stats, _) = fit_summary(&scene, &fit_scene, &anchor)?;
    let state = if args.direct {
        optim::fit_direct(&fit_scene, &anchor, &config)?
    } else {
        optim::refine_tto(&fit_scene, &anchor, &config)?
    };
    let (after_stats, flipped) = fit_summary(&scene, &fit_scene, &state.v_pred)?;

    save_mesh_pair(&args.out, "refined_mesh", &state.v_pred, &fit_scene.model.faces)?;
    state.save(&args.out.join("state.dregb"))?;
    write_history_jsonl(&args.out.join("history.jsonl"), &state.history)?;
    let totals: Vec<f64> = state.history.iter().map(|r| r.total).collect();
    plot::line_plot(&totals, 640, 360)
        .save(args.out.join("convergence.png"))
        .map_err(|e| CliError::Io(e.to_string()))?;
    write_stats(&args.out, &after_stats)?;

    let before = before_stats.per_region[FULL_REGION].median;
    let after = after_stats.per_region[FULL_REGION].median;
    println!(
        "{}: {} iters, median p2s {before:.4} -> {after:.4} mm ({}), flipped faces {flipped}",
        if args.direct { "direct" } else { "tto" },
        state.step,
        FULL_REGION,
    );
    Ok(())
}

fn stats_csv(stats: &RegionStats) -> String {
    let mut out = String::from("region,median,mean,std,count\n");
    for (region, s) in &stats.per_region {
        writeln!(out, "{region},{},{},{},{}", s.median, s.mean, s.std, s.count)
            .expect("writing to a string cannot fail");
    }
    out
}

fn write_stats(dir: &Path, stats: &RegionStats) -> Result<()> {
    fs::write(dir.join("stats.csv"), stats_csv(stats))?;
    fs::write(
        dir.join("stats.json"),
        serde_json::to_string_pretty(stats).expect("stats serialize"),
    )?;
    Ok(())
}

fn load_mesh_by_extension(path: &Path) -> Result<(Vec<Vec3>, Vec<[u32; 3]>)> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("obj") => Ok(meshio::load_obj(path)?),
        Some("ply") => Ok(meshio::load_ply(path)?),
        other => Err(CliError::Usage(format!(
            "unsupported mesh extension {other:?} for {path:?} (expected .obj or .ply)"
        ))),
    }
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    fs::create_dir_all(&args.out)?;
    if !(args.threshold > 0.0) {
        return Err(CliError::Usage("--threshold must be positive".into()));
    }
    let (mesh_v, mesh_f) = load_mesh_by_extension(&args.mesh)?;
    let (scan_v, _) = load_mesh_by_extension(&args.scan)?;
    let masks = RegionMasks::load(&args.masks)?;
    masks.validate(mesh_v.len())?;

    let distances = metrics::point_to_surface(&scan_v, &mesh_v, &mesh_f)?;
    let nearest = metrics::nearest_vertex(&scan_v, &mesh_v);
    let stats = metrics::pool_stats(&distances, &nearest, mesh_v.len(), &masks);
    write_stats(&args.out, &stats)?;

    if let Some(rig_path) = &args.rig {
        let rig = CameraRig::load(rig_path)?;
        for (cam, name) in rig.cameras.iter().zip(&rig.names) {
            let img = metrics::heatmap(
                &scan_v,
                &distances,
                cam,
                args.heatmap_res,
                args.heatmap_res,
                args.threshold,
            );
            img.save(args.out.join(format!("heatmap_{name}.png")))
                .map_err(|e| CliError::Io(e.to_string()))?;
        }
    }

    println!("region,median,mean,std,count");
    for (region, s) in &stats.per_region {
        println!("{region},{:.4},{:.4},{:.4},{}", s.median, s.mean, s.std, s.count);
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
struct TrialRecord {
    loss: String,
    weight: f64,
    tto_iters: usize,
    seed: u64,
    median_p2s_coarse: f64,
    median_p2s_final: f64,
    flipped_coarse: usize,
    flipped_final: usize,
    status: String,
}

fn data_term_name(term: DataTerm) -> &'static str {
    match term {
        DataTerm::Pointmap => "pointmap",
        DataTerm::P2s => "p2s",
        DataTerm::Chamfer => "chamfer",
    }
}

fn run_trial(
    model: &ParametricModel,
    args: &AblateArgs,
    loss: DataTerm,
    weight: f64,
    tto_iters: usize,
    seed: u64,
) -> Result<TrialRecord> {
    let rig = load_rig_or_ring(&None, model, args.views, 1000.0, 1200.0, 512)?;
    let param_spec = if args.rigid { ParamSpec::rigid_only() } else { ParamSpec::default() };
    let noise = NoiseSpec {
        scan_jitter_mm: args.scan_jitter,
        landmark_px: 0.0,
        hole_fraction: args.hole_fraction,
    };
    let scene = make_scene(
        model,
        &rig,
        seed,
        &param_spec,
        &noise,
        (args.resolution, args.resolution),
    )?;
    let fit_scene = build_fit_scene(&scene, model.clone())?;
    let init =
        synth::perturb_init(&scene.gt_mesh.vertices, args.perturb_rigid, args.perturb_rms, seed);

    let mut config = FitConfig {
        iterations: args.coarse_iters,
        render_width: args.resolution,
        render_height: args.resolution,
        data_term: loss,
        data_weight: weight,
        seed,
        ..FitConfig::default()
    };
    if loss == DataTerm::Pointmap {
        config.weights.w_geom = weight;
    }
    if let Some(lr) = args.lr {
        config.learning_rate = lr;
    }

    let coarse = optim::fit_coarse(&fit_scene, init, &config)?;
    let (coarse_stats, flipped_coarse) = fit_summary(&scene, &fit_scene, &coarse.v_pred)?;

    let (final_verts, flipped_final, final_stats) = if tto_iters > 0 {
        let tto_config = FitConfig {
            iterations: tto_iters,
            render_width: args.resolution,
            render_height: args.resolution,
            variant: Variant::Tto,
            ..FitConfig::default()
        };
        let refined = optim::refine_tto(&fit_scene, &coarse.v_pred, &tto_config)?;
        let (stats, flipped) = fit_summary(&scene, &fit_scene, &refined.v_pred)?;
        (refined.v_pred, flipped, stats)
    } else {
        (coarse.v_pred.clone(), flipped_coarse, coarse_stats.clone())
    };
    let _ = final_verts;

    Ok(TrialRecord {
        loss: data_term_name(loss).to_string(),
        weight,
        tto_iters,
        seed,
        median_p2s_coarse: coarse_stats.per_region[FULL_REGION].median,
        median_p2s_final: final_stats.per_region[FULL_REGION].median,
        flipped_coarse,
        flipped_final,
        status: "ok".to_string(),
    })
}

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    fs::create_dir_all(&args.out)?;
    let model = ParametricModel::load(&args.model)?;
    let mut cells: Vec<(DataTerm, f64, usize, u64)> = Vec::new();
    for &loss in &args.losses {
        for &weight in &args.weights {
            for &t in &args.tto_iters {
                for seed in 0..args.seeds {
                    cells.push((loss, weight, t, seed));
                }
            }
        }
    }
    eprintln!("ablate: {} trials", cells.len());

    // Trials are independent; failures are recorded per cell and the run
    // continues. Results are ordered by trial id.
    let records: Vec<TrialRecord> = cells
        .par_iter()
        .map(|&(loss, weight, t, seed)| {
            run_trial(&model, &args, loss, weight, t, seed).unwrap_or_else(|e| TrialRecord {
                loss: data_term_name(loss).to_string(),
                weight,
                tto_iters: t,
                seed,
                median_p2s_coarse: f64::NAN,
                median_p2s_final: f64::NAN,
                flipped_coarse: usize::MAX,
                flipped_final: usize::MAX,
                status: format!("error: {}", e.message()),
            })
        })
        .collect();

    let mut csv = String::from(
        "loss,weight,tto_iters,seed,median_p2s_coarse,median_p2s_final,flipped_coarse,flipped_final,status\n",
    );
    for r in &records {
        writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{}",
            r.loss,
            r.weight,
            r.tto_iters,
            r.seed,
            r.median_p2s_coarse,
            r.median_p2s_final,
            r.flipped_coarse,
            r.flipped_final,
            r.status
        )
        .expect("writing to a string cannot fail");
    }
    fs::write(args.out.join("ablate.csv"), csv)?;

    let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.status == "ok") {
        groups.entry(r.loss.clone()).or_default().push(r.median_p2s_final);
    }
    let group_vec: Vec<(String, Vec<f64>)> = groups.into_iter().collect();
    plot::box_plot(&group_vec, 640, 360)
        .save(args.out.join("boxplot.png"))
        .map_err(|e| CliError::Io(e.to_string()))?;

    let failures = records.iter().filter(|r| r.status != "ok").count();
    println!(
        "ablate: {} trials, {} failures -> {}",
        records.len(),
        failures,
        args.out.join("ablate.csv").display()
    );
    Ok(())
}

fn default_tolerance(objective: &str) -> f64 {
    match objective {
        "reg" => 1e-8,
        "geom" | "refine" | "total" => 1e-3,
        _ => 1e-6,
    }
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<()> {
    let objectives: Vec<String> = if args.all {
        GRADCHECK_OBJECTIVES.iter().map(|s| s.to_string()).collect()
    } else {
        vec![args.objective.clone().ok_or_else(|| {
            CliError::Usage("pass an objective or --all".into())
        })?]
    };
    let mut all_passed = true;
    for objective in &objectives {
        let tol = args.tolerance.unwrap_or_else(|| default_tolerance(objective));
        let report = optim::gradcheck(objective, args.seed, tol, args.resolution)?;
        println!(
            "{}: max_rel_err={:.3e} checked={} skipped={} tol={:.0e} {}",
            report.objective,
            report.max_rel_err,
            report.checked,
            report.skipped,
            report.tolerance,
            if report.passed { "PASS" } else { "FAIL" }
        );
        all_passed &= report.passed;
    }
    if !all_passed {
        return Err(CliError::Numeric("gradient check failed".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn data_term_parsing() {
        assert_eq!(parse_data_term("pointmap"), Ok(DataTerm::Pointmap));
        assert_eq!(parse_data_term("p2s"), Ok(DataTerm::P2s));
        assert_eq!(parse_data_term("chamfer"), Ok(DataTerm::Chamfer));
        assert!(parse_data_term("icp").is_err());
    }

    #[test]
    fn run_config_rejects_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.toml");
        fs::write(&path, "[fit]\niterations = 5\nwarp_speed = 9\n").unwrap();
        assert!(matches!(RunConfig::load(&path), Err(CliError::Usage(_))));

        fs::write(&path, "[fit]\niterations = 5\nlearning_rate = 0.2\n").unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.fit.iterations, 5);
        assert_eq!(cfg.fit.learning_rate, 0.2);
    }

    #[test]
    fn run_config_requires_existing_paths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.toml");
        fs::write(&path, "[paths]\nmodel = \"/definitely/not/here.dregm\"\n").unwrap();
        assert!(matches!(RunConfig::load(&path), Err(CliError::Usage(_))));
    }

    #[test]
    fn stats_csv_has_expected_columns() {
        let mut per_region = BTreeMap::new();
        per_region.insert(
            "face".to_string(),
            metrics::Stats { median: 1.0, mean: 2.0, std: 0.5, count: 7 },
        );
        let csv = stats_csv(&RegionStats { per_region });
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("region,median,mean,std,count"));
        assert_eq!(lines.next(), Some("face,1,2,0.5,7"));
    }

    #[test]
    fn error_exit_codes_follow_contract() {
        assert_eq!(CliError::Usage("x".into()).exit_code(), 2);
        assert_eq!(CliError::Io("x".into()).exit_code(), 3);
        assert_eq!(CliError::Numeric("x".into()).exit_code(), 4);
    }
}
