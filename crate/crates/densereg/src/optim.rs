//! Gradient engine and the fitting loops: coarse registration-free fitting
//! over free-form vertices with inverse-solver coupling, test-time
//! refinement against a frozen anchor, the unregularized direct baseline,
//! and a finite-difference gradient checker.
//!
//! Fits are bitwise deterministic: views are processed in name-sorted
//! order, reductions are sequential in that order, and resuming from a
//! checkpoint reproduces the uninterrupted trajectory exactly.

use std::path::Path;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{Camera, CameraRig};
use crate::container::{Array, Container, ContainerError};
use crate::losses::{
    self, LossError, LossReport, LossWeights, ViewData, ViewLandmarks,
};
use crate::model::{edges as topo_edges, ParametricModel};
use crate::pliks::{self, PliksError, PliksLambdas, PliksResult};
use crate::raster::{render, GeoMaps};
use crate::Vec3;

pub const STATE_MAGIC: &str = "DREG-STATE";

#[derive(Debug, Error)]
pub enum FitError {
    #[error("non-finite gradient at vertex {vertex} axis {axis} on iteration {step}")]
    NonFiniteGradient { vertex: usize, axis: usize, step: u64 },
    #[error("iteration {step}: {source}")]
    Loss { step: u64, source: LossError },
    #[error("iteration {step}: {source}")]
    Pliks { step: u64, source: PliksError },
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),
    #[error("invalid input: {0}")]
    Input(String),
}

pub type Result<T> = std::result::Result<T, FitError>;

/// Data term driving the fit toward the scan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataTerm {
    /// Rendered pointmap + normal-map loss.
    Pointmap,
    /// Point-to-surface baseline (scan vertices to predicted surface).
    P2s,
    /// Symmetric Chamfer baseline between vertex sets.
    Chamfer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Coarse,
    Tto,
    Direct,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub render_width: usize,
    pub render_height: usize,
    pub seed: u64,
    pub variant: Variant,
    pub log_every: usize,
    pub data_term: DataTerm,
    /// Weight of the p2s/Chamfer baseline data term (the pointmap term
    /// uses `weights.w_geom`).
    pub data_weight: f64,
    pub weights: LossWeights,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            iterations: 300,
            learning_rate: 0.1,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            render_width: 256,
            render_height: 256,
            seed: 0,
            variant: Variant::Coarse,
            log_every: 10,
            data_term: DataTerm::Pointmap,
            data_weight: 1.0,
            weights: LossWeights::default(),
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(FitError::Input("iterations must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(FitError::Input("learning rate must be positive".into()));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(FitError::Input(format!("{name} must lie in (0, 1)")));
            }
        }
        if self.render_width < 8 || self.render_height < 8 {
            return Err(FitError::Input("render resolution below 8x8".into()));
        }
        self.weights.validate().map_err(FitError::Input)?;
        Ok(())
    }

    fn lambdas(&self) -> PliksLambdas {
        PliksLambdas { beta: self.weights.lambda_beta, psi: self.weights.lambda_psi }
    }
}

/// Everything a fit consumes, with views already in canonical
/// (name-sorted) order so rig file ordering cannot change trajectories.
#[derive(Debug, Clone)]
pub struct FitScene {
    pub model: ParametricModel,
    pub view_names: Vec<String>,
    pub cams: Vec<Camera>,
    pub gt_maps: Vec<GeoMaps>,
    pub landmarks: Vec<ViewLandmarks>,
    pub scan_vertices: Vec<Vec3>,
    pub scan_faces: Vec<[u32; 3]>,
    pub eye_mask: Vec<bool>,
    pub edges: Vec<(u32, u32)>,
}

impl FitScene {
    /// Bundles fit inputs, reordering per-view data into canonical order.
    /// `gt_maps` and `landmarks` must follow the rig's camera order.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        model: ParametricModel,
        rig: &CameraRig,
        gt_maps: Vec<GeoMaps>,
        landmarks: Vec<ViewLandmarks>,
        scan_vertices: Vec<Vec3>,
        scan_faces: Vec<[u32; 3]>,
        eye_mask: Vec<bool>,
    ) -> Result<FitScene> {
        if gt_maps.len() != rig.len() || landmarks.len() != rig.len() {
            return Err(FitError::Input(format!(
                "expected {} per-view inputs, got {} maps / {} landmark sets",
                rig.len(),
                gt_maps.len(),
                landmarks.len()
            )));
        }
        if eye_mask.len() != model.n_vertices() {
            return Err(FitError::Input(format!(
                "eye mask has {} entries, model has {} vertices",
                eye_mask.len(),
                model.n_vertices()
            )));
        }
        let order = rig.canonical_order();
        let mut gt_maps_opt: Vec<Option<GeoMaps>> = gt_maps.into_iter().map(Some).collect();
        let mut lms_opt: Vec<Option<ViewLandmarks>> = landmarks.into_iter().map(Some).collect();
        let edges = topo_edges(&model.faces);
        Ok(FitScene {
            edges,
            view_names: order.iter().map(|&i| rig.names[i].clone()).collect(),
            cams: order.iter().map(|&i| rig.cameras[i].clone()).collect(),
            gt_maps: order.iter().map(|&i| gt_maps_opt[i].take().unwrap()).collect(),
            landmarks: order.iter().map(|&i| lms_opt[i].take().unwrap()).collect(),
            scan_vertices,
            scan_faces,
            eye_mask,
            model,
        })
    }

    fn views(&self) -> Vec<ViewData<'_>> {
        self.cams
            .iter()
            .zip(&self.gt_maps)
            .zip(&self.landmarks)
            .map(|((camera, gt_maps), landmarks)| ViewData { camera, gt_maps, landmarks })
            .collect()
    }

    fn cam_refs(&self) -> Vec<&Camera> {
        self.cams.iter().collect()
    }

    fn lm_refs(&self) -> Vec<&ViewLandmarks> {
        self.landmarks.iter().collect()
    }
}

/// Optimizer state: the vertex decision variable plus Adam moments and the
/// loss history (one report per step taken).
#[derive(Debug, Clone, PartialEq)]
pub struct FitState {
    pub v_pred: Vec<Vec3>,
    pub moment1: Vec<Vec3>,
    pub moment2: Vec<Vec3>,
    pub step: u64,
    pub history: Vec<LossReport>,
    pub last_pliks: Option<PliksResult>,
}

impl FitState {
    pub fn new(init: Vec<Vec3>) -> FitState {
        let n = init.len();
        FitState {
            v_pred: init,
            moment1: vec![Vec3::zeros(); n],
            moment2: vec![Vec3::zeros(); n],
            step: 0,
            history: Vec::new(),
            last_pliks: None,
        }
    }

    /// Serializes the resumable part of the state (vertices, moments, step
    /// counter, loss history). The attached solver result is recomputed.
    pub fn to_container(&self) -> Container {
        let n = self.v_pred.len();
        let mut c = Container::new(STATE_MAGIC);
        c.set_dim("n_vertices", n as i64);
        c.set_dim("step", self.step as i64);
        let flat = |v: &[Vec3]| -> Vec<f64> { v.iter().flat_map(|p| [p.x, p.y, p.z]).collect() };
        c.insert("v_pred", Array::f64(vec![n, 3], flat(&self.v_pred)));
        c.insert("moment1", Array::f64(vec![n, 3], flat(&self.moment1)));
        c.insert("moment2", Array::f64(vec![n, 3], flat(&self.moment2)));
        let history =
            serde_json::to_vec(&self.history).expect("loss reports always serialize");
        c.insert("history_json", Array::u8(vec![history.len()], history));
        c
    }

    pub fn from_container(c: &Container) -> Result<FitState> {
        let n = c.dim("n_vertices")? as usize;
        let step = c.dim("step")? as u64;
        let get = |name: &str| -> Result<Vec<Vec3>> {
            let (shape, data) = c.f64s(name)?;
            if shape != [n, 3] {
                return Err(FitError::Checkpoint(format!("array {name} has shape {shape:?}")));
            }
            Ok(data.chunks_exact(3).map(|p| Vec3::new(p[0], p[1], p[2])).collect())
        };
        let (_, hist_bytes) = c.u8s("history_json")?;
        let history: Vec<LossReport> = serde_json::from_slice(&hist_bytes)
            .map_err(|e| FitError::Checkpoint(format!("history does not parse: {e}")))?;
        if history.len() != step as usize {
            return Err(FitError::Checkpoint(format!(
                "history has {} entries but step counter is {step}",
                history.len()
            )));
        }
        Ok(FitState {
            v_pred: get("v_pred")?,
            moment1: get("moment1")?,
            moment2: get("moment2")?,
            step,
            history,
            last_pliks: None,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(self.to_container().write_file(path)?)
    }

    pub fn load(path: &Path) -> Result<FitState> {
        FitState::from_container(&Container::read_file(path, Some(STATE_MAGIC))?)
    }
}

/// One bias-corrected Adam update. Rejects non-finite gradients, naming
/// the first offending coordinate.
pub fn adam_step(state: &mut FitState, grad: &[Vec3], config: &FitConfig) -> Result<()> {
    assert_eq!(grad.len(), state.v_pred.len());
    for (vertex, g) in grad.iter().enumerate() {
        for axis in 0..3 {
            if !g[axis].is_finite() {
                return Err(FitError::NonFiniteGradient { vertex, axis, step: state.step });
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - config.adam_beta1.powi(t);
    let bc2 = 1.0 - config.adam_beta2.powi(t);
    for i in 0..grad.len() {
        for axis in 0..3 {
            let g = grad[i][axis];
            let m = config.adam_beta1 * state.moment1[i][axis] + (1.0 - config.adam_beta1) * g;
            let v = config.adam_beta2 * state.moment2[i][axis] + (1.0 - config.adam_beta2) * g * g;
            state.moment1[i][axis] = m;
            state.moment2[i][axis] = v;
            let m_hat = m / bc1;
            let v_hat = v / bc2;
            state.v_pred[i][axis] -= config.learning_rate * m_hat / (v_hat.sqrt() + config.adam_eps);
        }
    }
    Ok(())
}

/// Renders one map per camera in parallel (each render is itself
/// tile-parallel and deterministic).
pub fn render_views(
    verts: &[Vec3],
    faces: &[[u32; 3]],
    cams: &[Camera],
    width: usize,
    height: usize,
) -> Vec<GeoMaps> {
    cams.par_iter().map(|c| render(verts, faces, c, width, height)).collect()
}

fn loss_err(step: u64) -> impl Fn(LossError) -> FitError {
    move |source| FitError::Loss { step, source }
}

/// Coarse objective evaluation for the configured data term.
fn coarse_loss(
    scene: &FitScene,
    v_pred: &[Vec3],
    pliks_res: &PliksResult,
    config: &FitConfig,
) -> Result<(LossReport, Vec<Vec3>)> {
    let step = 0; // patched by caller's map_err context when needed
    let _ = step;
    let views = scene.views();
    match config.data_term {
        DataTerm::Pointmap => {
            let pred_maps = render_views(
                v_pred,
                &scene.model.faces,
                &scene.cams,
                config.render_width,
                config.render_height,
            );
            losses::total_loss(
                v_pred,
                &scene.model.faces,
                &scene.edges,
                &pred_maps,
                &views,
                pliks_res,
                &config.weights,
            )
            .map_err(loss_err(0))
        }
        DataTerm::P2s | DataTerm::Chamfer => {
            let (data_val, g_data) = match config.data_term {
                DataTerm::P2s => losses::point_to_surface_loss(
                    &scene.scan_vertices,
                    v_pred,
                    &scene.model.faces,
                )
                .map_err(loss_err(0))?,
                _ => {
                    let (v, g, _) = losses::chamfer_loss(v_pred, &scene.scan_vertices)
                        .map_err(loss_err(0))?;
                    (v, g)
                }
            };
            let (coupling, g_coupling) = losses::coupling_loss(
                v_pred,
                &scene.edges,
                &scene.cam_refs(),
                &scene.lm_refs(),
                pliks_res,
                &config.weights,
            )
            .map_err(loss_err(0))?;
            let grad: Vec<Vec3> = (0..v_pred.len())
                .map(|v| g_data[v] * config.data_weight + g_coupling[v])
                .collect();
            let w = &config.weights;
            let mut report = LossReport {
                total: 0.0,
                terms: Default::default(),
                raw: Default::default(),
                per_view_geom: Vec::new(),
                masked_pixels: Vec::new(),
            };
            for (name, weighted, raw) in [
                ("data", config.data_weight * data_val, data_val),
                ("landmark", w.w_lm * coupling.landmark, coupling.landmark),
                ("align", w.w_align * coupling.align, coupling.align),
                ("reg", w.w_reg * coupling.reg, coupling.reg),
            ] {
                report.terms.insert(name.to_string(), weighted);
                report.raw.insert(name.to_string(), raw);
                report.total += weighted;
            }
            Ok((report, grad))
        }
    }
}

/// Runs the coarse registration-free fit from `init` for
/// `config.iterations` steps.
pub fn fit_coarse(scene: &FitScene, init: Vec<Vec3>, config: &FitConfig) -> Result<FitState> {
    let mut state = FitState::new(init);
    fit_coarse_continue(scene, &mut state, config)?;
    Ok(state)
}

/// Continues a coarse fit until `config.iterations` total steps. Resuming
/// a loaded checkpoint reproduces the uninterrupted trajectory bit for
/// bit.
pub fn fit_coarse_continue(
    scene: &FitScene,
    state: &mut FitState,
    config: &FitConfig,
) -> Result<()> {
    config.validate()?;
    if state.v_pred.len() != scene.model.n_vertices() {
        return Err(FitError::Input(format!(
            "state has {} vertices, model has {}",
            state.v_pred.len(),
            scene.model.n_vertices()
        )));
    }
    while (state.step as usize) < config.iterations {
        let step = state.step;
        let pliks_res = pliks::run(&state.v_pred, &scene.model, config.lambdas())
            .map_err(|source| FitError::Pliks { step, source })?;
        let (report, grad) =
            coarse_loss(scene, &state.v_pred, &pliks_res, config).map_err(|e| match e {
                FitError::Loss { source, .. } => FitError::Loss { step, source },
                other => other,
            })?;
        state.history.push(report);
        state.last_pliks = Some(pliks_res);
        adam_step(state, &grad, config)?;
    }
    Ok(())
}

/// Refinement objective evaluation around a frozen anchor.
fn refine_iteration(
    scene: &FitScene,
    anchor: &[Vec3],
    state: &mut FitState,
    config: &FitConfig,
    weights: &LossWeights,
) -> Result<()> {
    let step = state.step;
    let ref_maps = render_views(
        &state.v_pred,
        &scene.model.faces,
        &scene.cams,
        config.render_width,
        config.render_height,
    );
    let views = scene.views();
    let (report, grad) = losses::refine_loss(
        &state.v_pred,
        anchor,
        &scene.eye_mask,
        &scene.model.faces,
        &scene.edges,
        &ref_maps,
        &views,
        weights,
    )
    .map_err(|source| FitError::Loss { step, source })?;
    state.history.push(report);
    adam_step(state, &grad, config)
}

/// Continues a refinement run (shared by TTO and the direct baseline).
pub fn refine_continue(
    scene: &FitScene,
    anchor: &[Vec3],
    state: &mut FitState,
    config: &FitConfig,
    weights: &LossWeights,
) -> Result<()> {
    config.validate()?;
    while (state.step as usize) < config.iterations {
        refine_iteration(scene, anchor, state, config, weights)?;
    }
    Ok(())
}

/// Test-time refinement: optimizes vertices initialized at the (frozen)
/// coarse result under the refinement loss set.
pub fn refine_tto(scene: &FitScene, anchor: &[Vec3], config: &FitConfig) -> Result<FitState> {
    let mut state = FitState::new(anchor.to_vec());
    refine_continue(scene, anchor, &mut state, config, &config.weights)?;
    Ok(state)
}

/// Direct vertex optimization baseline: the refinement data terms without
/// the edge and eyeball regularizers.
pub fn fit_direct(scene: &FitScene, anchor: &[Vec3], config: &FitConfig) -> Result<FitState> {
    let mut weights = config.weights;
    weights.w_edge_r = 0.0;
    weights.w_eye_r = 0.0;
    let mut state = FitState::new(anchor.to_vec());
    refine_continue(scene, anchor, &mut state, config, &weights)?;
    Ok(state)
}

// ---------------------------------------------------------------------------
// Landmark-based rigid initialization

/// Linear (DLT) triangulation of one landmark from its 2D observations.
/// Needs at least two views with positive confidence.
pub fn triangulate_landmarks(
    cams: &[&Camera],
    lms: &[&ViewLandmarks],
    n_vertices: usize,
) -> Vec<Option<Vec3>> {
    (0..n_vertices)
        .map(|v| {
            let mut ata = nalgebra::Matrix3::<f64>::zeros();
            let mut atb = Vec3::zeros();
            let mut rows = 0usize;
            for (cam, lm) in cams.iter().zip(lms) {
                if lm.confidence[v] <= 0.0 {
                    continue;
                }
                let [u, w] = lm.points[v];
                let r = &cam.rotation;
                let t = &cam.translation;
                // fx (r1·X + t1) + (cx − u)(r3·X + t3) = 0, same for v.
                let rows2 = [
                    (
                        cam.fx * r.row(0).transpose() + (cam.cx - u) * r.row(2).transpose(),
                        -(cam.fx * t.x + (cam.cx - u) * t.z),
                    ),
                    (
                        cam.fy * r.row(1).transpose() + (cam.cy - w) * r.row(2).transpose(),
                        -(cam.fy * t.y + (cam.cy - w) * t.z),
                    ),
                ];
                for (a, b) in rows2 {
                    ata += a * a.transpose();
                    atb += a * b;
                    rows += 1;
                }
            }
            if rows < 4 {
                return None;
            }
            ata.lu().solve(&atb).map(|x| Vec3::new(x[0], x[1], x[2]))
        })
        .collect()
}

/// Rigidly pre-aligns the template to triangulated dense landmarks
/// (rotation + translation, no scale). Falls back to a pure centroid
/// shift when fewer than three landmarks triangulate.
pub fn initial_alignment(
    template: &[Vec3],
    cams: &[&Camera],
    lms: &[&ViewLandmarks],
) -> Vec<Vec3> {
    let tri = triangulate_landmarks(cams, lms, template.len());
    let pairs: Vec<(Vec3, Vec3)> = template
        .iter()
        .zip(&tri)
        .filter_map(|(t, x)| x.map(|x| (*t, x)))
        .collect();
    if pairs.len() < 3 {
        let shift = if pairs.is_empty() {
            Vec3::zeros()
        } else {
            let (ts, xs): (Vec<Vec3>, Vec<Vec3>) = pairs.iter().copied().unzip();
            xs.iter().sum::<Vec3>() / xs.len() as f64 - ts.iter().sum::<Vec3>() / ts.len() as f64
        };
        return template.iter().map(|p| p + shift).collect();
    }
    let n = pairs.len() as f64;
    let tc = pairs.iter().map(|(t, _)| t).sum::<Vec3>() / n;
    let xc = pairs.iter().map(|(_, x)| x).sum::<Vec3>() / n;
    let mut h = crate::Mat3::zeros();
    for (t, x) in &pairs {
        h += (t - tc) * (x - xc).transpose();
    }
    let svd = h.svd(true, true);
    let (Some(u), Some(v_t)) = (svd.u, svd.v_t) else {
        return template.to_vec();
    };
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant();
    let corr =
        crate::Mat3::from_diagonal(&Vec3::new(1.0, 1.0, if d < 0.0 { -1.0 } else { 1.0 }));
    let r = v * corr * u.transpose();
    let t = xc - r * tc;
    template.iter().map(|p| r * p + t).collect()
}

// ---------------------------------------------------------------------------
// Gradient checking

pub const GRADCHECK_OBJECTIVES: [&str; 7] =
    ["geom", "landmark", "edge", "align", "reg", "refine", "total"];

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub objective: String,
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Central finite differences (step 1e-3 mm) against the analytic
/// gradients of one objective on a random toy configuration. For
/// renderer-coupled objectives, coordinates whose pixel/triangle
/// assignment changes under the step are skipped.
pub fn gradcheck(objective: &str, seed: u64, tolerance: f64, res: usize) -> Result<GradCheckReport> {
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9).wrapping_add(17));
    let model = crate::model::make_toy_model(seed.wrapping_add(1000), 42, 3, 2, 2);
    let rig = crate::camera::ring_rig(
        2,
        Vec3::zeros(),
        600.0,
        (res as f64) * 5.0,
        res as u32,
        res as u32,
    );
    let mut sym = |scale: f64| (rng.random::<f64>() * 2.0 - 1.0) * scale;
    let gt_mesh = model.template.clone();
    let v_base: Vec<Vec3> = gt_mesh
        .iter()
        .map(|p| p + Vec3::new(sym(2.0), sym(2.0), sym(2.0)))
        .collect();
    let edges = topo_edges(&model.faces);
    let gt_maps: Vec<GeoMaps> = rig
        .cameras
        .iter()
        .map(|c| render(&gt_mesh, &model.faces, c, res, res))
        .collect();
    let landmarks: Vec<ViewLandmarks> = rig
        .cameras
        .iter()
        .map(|c| {
            let mut points = Vec::new();
            for p in &gt_mesh {
                let (uv, _) = c.project_point(p);
                points.push(uv);
            }
            ViewLandmarks { points, confidence: vec![1.0; gt_mesh.len()] }
        })
        .collect();
    let cams: Vec<&Camera> = rig.cameras.iter().collect();
    let lm_refs: Vec<&ViewLandmarks> = landmarks.iter().collect();
    let gt_refs: Vec<&GeoMaps> = gt_maps.iter().collect();
    let weights = LossWeights::default();
    let eye_mask: Vec<bool> = (0..model.n_vertices()).map(|v| v % 9 == 0).collect();

    // Frozen inverse-solver pieces for the coupled objectives.
    let assignment = pliks::dominant_segments(&model);
    let base_run = pliks::run(&v_base, &model, PliksLambdas::default())
        .map_err(|source| FitError::Pliks { step: 0, source })?;
    let rotations = base_run.rotations.clone();
    let frozen_pliks = |v: &[Vec3]| -> PliksResult {
        pliks::run_with_rotations(
            v,
            &model,
            rotations.clone(),
            assignment.clone(),
            vec![],
            PliksLambdas::default(),
        )
        .expect("frozen solve cannot fail on finite input")
    };

    let render_all = |v: &[Vec3]| -> Vec<GeoMaps> {
        rig.cameras.iter().map(|c| render(v, &model.faces, c, res, res)).collect()
    };
    let same_assignment = |a: &[GeoMaps], b: &[GeoMaps]| -> bool {
        a.iter().zip(b).all(|(x, y)| x.face_id == y.face_id)
    };

    // Objective value and analytic gradient, plus an assignment-stability
    // witness for the renderer-coupled cases.
    type ValueFn<'a> = Box<dyn Fn(&[Vec3]) -> (f64, Vec<GeoMaps>) + 'a>;
    let base_maps = render_all(&v_base);

    let (value, grad): (ValueFn, Vec<Vec3>) = match objective {
        "edge" => {
            let gt = gt_mesh.clone();
            let (_, g, _) = losses::edge_loss(&v_base, &gt, &edges);
            (
                Box::new(move |v: &[Vec3]| (losses::edge_loss(v, &gt, &edges).0, Vec::new())),
                g,
            )
        }
        "landmark" => {
            let (_, g) = losses::landmark_loss(&v_base, &cams, &lm_refs)
                .map_err(|source| FitError::Loss { step: 0, source })?;
            let cams = cams.clone();
            let lm_refs = lm_refs.clone();
            (
                Box::new(move |v: &[Vec3]| {
                    (losses::landmark_loss(v, &cams, &lm_refs).unwrap().0, Vec::new())
                }),
                g,
            )
        }
        "align" => {
            let pl = frozen_pliks(&v_base);
            let (_, g_fl, g_pred) =
                losses::pliks_align_loss(&pl.v_fl, &v_base, &edges, &weights);
            let g_solver = pl.backward(
                &g_fl,
                &DVector::zeros(model.n_beta()),
                &DVector::zeros(model.n_psi()),
                &Vec3::zeros(),
            );
            let g: Vec<Vec3> =
                g_pred.iter().zip(&g_solver).map(|(a, b)| a + b).collect();
            let w = weights;
            (
                Box::new(move |v: &[Vec3]| {
                    let pl = frozen_pliks(v);
                    (losses::pliks_align_loss(&pl.v_fl, v, &edges, &w).0, Vec::new())
                }),
                g,
            )
        }
        "reg" => {
            // Checked directly in parameter space.
            let beta = DVector::from_fn(model.n_beta(), |_, _| sym(2.0));
            let psi = DVector::from_fn(model.n_psi(), |_, _| sym(2.0));
            let (_, g_beta, g_psi) = losses::pliks_reg_loss(&beta, &psi, &weights);
            let h = 1e-3;
            let mut max_rel: f64 = 0.0;
            let mut checked = 0;
            let eval = |b: &DVector<f64>, p: &DVector<f64>| losses::pliks_reg_loss(b, p, &weights).0;
            for i in 0..beta.len() + psi.len() {
                let (mut bp, mut pp) = (beta.clone(), psi.clone());
                let (mut bm, mut pm) = (beta.clone(), psi.clone());
                let an = if i < beta.len() {
                    bp[i] += h;
                    bm[i] -= h;
                    g_beta[i]
                } else {
                    pp[i - beta.len()] += h;
                    pm[i - beta.len()] -= h;
                    g_psi[i - beta.len()]
                };
                let fd = (eval(&bp, &pp) - eval(&bm, &pm)) / (2.0 * h);
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-12);
                max_rel = max_rel.max(rel);
                checked += 1;
            }
            return Ok(GradCheckReport {
                objective: objective.to_string(),
                max_rel_err: max_rel,
                checked,
                skipped: 0,
                tolerance,
                passed: max_rel < tolerance,
            });
        }
        "geom" => {
            let (_, g, _, _) = losses::geom_loss(
                &v_base,
                &model.faces,
                &cams,
                &base_maps,
                &gt_refs,
                &weights,
            )
            .map_err(|source| FitError::Loss { step: 0, source })?;
            let cams = cams.clone();
            let gt_refs: Vec<GeoMaps> = gt_maps.clone();
            let faces = model.faces.clone();
            let w = weights;
            (
                Box::new(move |v: &[Vec3]| {
                    let maps = render_all(v);
                    let refs: Vec<&GeoMaps> = gt_refs.iter().collect();
                    let (val, _, _, _) =
                        losses::geom_loss(v, &faces, &cams, &maps, &refs, &w).unwrap();
                    (val, maps)
                }),
                g,
            )
        }
        "refine" => {
            let anchor = gt_mesh.clone();
            let views: Vec<ViewData> = rig
                .cameras
                .iter()
                .zip(&gt_maps)
                .zip(&landmarks)
                .map(|((camera, gt), landmarks)| ViewData { camera, gt_maps: gt, landmarks })
                .collect();
            let (_, g) = losses::refine_loss(
                &v_base,
                &anchor,
                &eye_mask,
                &model.faces,
                &edges,
                &base_maps,
                &views,
                &weights,
            )
            .map_err(|source| FitError::Loss { step: 0, source })?;
            let faces = model.faces.clone();
            let em = eye_mask.clone();
            let w = weights;
            (
                Box::new(move |v: &[Vec3]| {
                    let maps = render_all(v);
                    let (rep, _) = losses::refine_loss(
                        v, &anchor, &em, &faces, &edges, &maps, &views, &w,
                    )
                    .unwrap();
                    (rep.total, maps)
                }),
                g,
            )
        }
        "total" => {
            let views: Vec<ViewData> = rig
                .cameras
                .iter()
                .zip(&gt_maps)
                .zip(&landmarks)
                .map(|((camera, gt), landmarks)| ViewData { camera, gt_maps: gt, landmarks })
                .collect();
            let pl = frozen_pliks(&v_base);
            let (_, g) = losses::total_loss(
                &v_base,
                &model.faces,
                &edges,
                &base_maps,
                &views,
                &pl,
                &weights,
            )
            .map_err(|source| FitError::Loss { step: 0, source })?;
            let faces = model.faces.clone();
            let w = weights;
            (
                Box::new(move |v: &[Vec3]| {
                    let maps = render_all(v);
                    let pl = frozen_pliks(v);
                    let (rep, _) =
                        losses::total_loss(v, &faces, &edges, &maps, &views, &pl, &w).unwrap();
                    (rep.total, maps)
                }),
                g,
            )
        }
        other => {
            return Err(FitError::Input(format!(
                "unknown objective {other:?}; expected one of {GRADCHECK_OBJECTIVES:?}"
            )))
        }
    };

    let render_coupled = matches!(objective, "geom" | "refine" | "total");
    let h = 1e-3;
    let scale = grad.iter().map(|g| g.abs().max()).fold(0.0f64, f64::max);
    let floor = (1e-9 * scale).max(1e-12);
    let mut max_rel: f64 = 0.0;
    let mut checked = 0usize;
    let mut skipped = 0usize;
    for v in 0..v_base.len() {
        for axis in 0..3 {
            let mut plus = v_base.clone();
            plus[v][axis] += h;
            let mut minus = v_base.clone();
            minus[v][axis] -= h;
            let (fp, maps_p) = value(&plus);
            let (fm, maps_m) = value(&minus);
            if render_coupled
                && (!same_assignment(&maps_p, &base_maps) || !same_assignment(&maps_m, &base_maps))
            {
                skipped += 1;
                continue;
            }
            let fd = (fp - fm) / (2.0 * h);
            let an = grad[v][axis];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(floor);
            max_rel = max_rel.max(rel);
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        objective: objective.to_string(),
        max_rel_err: max_rel,
        checked,
        skipped,
        tolerance,
        passed: max_rel < tolerance,
    })
}
