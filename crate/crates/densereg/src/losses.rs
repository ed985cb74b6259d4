//! Objective terms: robust rendered-map losses, dense landmark
//! reprojection, topology alignment against the inverse-solver output,
//! parameter regularization, the refinement loss set, and the
//! point-to-surface / Chamfer baselines used by the ablations.
//!
//! Every function returns the loss value together with analytic gradients.
//! Per-view reductions always run in the caller-supplied view order, so a
//! canonical (name-sorted) ordering upstream makes whole fits bitwise
//! reproducible.

use std::collections::BTreeMap;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{Camera, Z_NEAR_MM};
use crate::metrics::{self, MetricsError};
use crate::pliks::PliksResult;
use crate::raster::{render_backward, GeoMaps, RasterError};
use crate::Vec3;

/// Relative edge-length denominators get this floor (mm).
pub const EDGE_EPS_MM: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("view count mismatch: {0}")]
    ViewCount(String),
    #[error("resolution mismatch: prediction {pred:?} vs ground truth {gt:?}")]
    Resolution { pred: (usize, usize), gt: (usize, usize) },
    #[error("landmark array has {got} entries, mesh has {expected} vertices")]
    LandmarkShape { expected: usize, got: usize },
    #[error("eye mask has {got} entries, mesh has {expected} vertices")]
    MaskLength { expected: usize, got: usize },
    #[error("point set is empty")]
    EmptyPoints,
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

pub type Result<T> = std::result::Result<T, LossError>;

/// Weights for every objective term. Defaults are engineering choices; the
/// two sigmas are the robust-penalty scales for pointmap residuals (mm)
/// and normal residuals (unitless).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub w_geom: f64,
    pub w_lm: f64,
    pub w_align: f64,
    pub w_reg: f64,
    pub lambda_v: f64,
    pub lambda_e: f64,
    pub lambda_beta: f64,
    pub lambda_psi: f64,
    pub sigma_point: f64,
    pub sigma_normal: f64,
    pub w_lm_r: f64,
    pub w_edge_r: f64,
    pub w_eye_r: f64,
    pub w_geom_r: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_geom: 1.0,
            w_lm: 1e-3,
            w_align: 1.0,
            w_reg: 1e-4,
            lambda_v: 1.0,
            lambda_e: 10.0,
            lambda_beta: 1e-3,
            lambda_psi: 1e-3,
            sigma_point: 10.0,
            sigma_normal: 1.0,
            w_lm_r: 1e-3,
            w_edge_r: 10.0,
            w_eye_r: 1.0,
            w_geom_r: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> std::result::Result<(), String> {
        let all = [
            self.w_geom,
            self.w_lm,
            self.w_align,
            self.w_reg,
            self.lambda_v,
            self.lambda_e,
            self.lambda_beta,
            self.lambda_psi,
            self.w_lm_r,
            self.w_edge_r,
            self.w_eye_r,
            self.w_geom_r,
        ];
        if all.iter().any(|&w| !(w >= 0.0)) {
            return Err("loss weights must be non-negative".into());
        }
        if !(self.sigma_point > 0.0 && self.sigma_normal > 0.0) {
            return Err("sigmas must be positive".into());
        }
        Ok(())
    }
}

/// Tracked 2D landmarks for one view: a pixel position and a confidence in
/// [0, 1] per mesh vertex. Confidence 0 removes a vertex from the loss.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewLandmarks {
    pub points: Vec<[f64; 2]>,
    pub confidence: Vec<f64>,
}

/// Itemized loss evaluation. `terms` are the weighted contributions and
/// sum to `total`; `raw` are the unweighted term values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub terms: BTreeMap<String, f64>,
    pub raw: BTreeMap<String, f64>,
    pub per_view_geom: Vec<f64>,
    pub masked_pixels: Vec<usize>,
}

impl LossReport {
    fn from_terms(weighted: Vec<(&str, f64, f64)>) -> LossReport {
        let mut terms = BTreeMap::new();
        let mut raw = BTreeMap::new();
        let mut total = 0.0;
        for (name, w, r) in weighted {
            terms.insert(name.to_string(), w);
            raw.insert(name.to_string(), r);
            total += w;
        }
        LossReport { total, terms, raw, per_view_geom: Vec::new(), masked_pixels: Vec::new() }
    }
}

// ---------------------------------------------------------------------------
// Geman–McClure

/// ρ(x) = x² / (x² + σ²): zero at zero, 0.5 at x = σ, saturates to 1.
pub fn gm(x: f64, sigma: f64) -> f64 {
    let x2 = x * x;
    x2 / (x2 + sigma * sigma)
}

/// Gradient of ρ(‖r‖) with respect to the residual vector r; smooth at
/// the origin: 2 σ² r / (‖r‖² + σ²)².
fn gm_grad(r: &Vec3, sigma: f64) -> Vec3 {
    let s2 = sigma * sigma;
    let denom = r.norm_squared() + s2;
    r * (2.0 * s2 / (denom * denom))
}

// ---------------------------------------------------------------------------
// Rendered geometric loss

/// Per-pixel robust residuals of one view, averaged over the mask
/// intersection. Returns the view's loss value and upstream gradients for
/// the renderer's backward pass.
pub fn geom_view_residual(
    pred: &GeoMaps,
    gt: &GeoMaps,
    weights: &LossWeights,
) -> Result<(f64, Vec<Vec3>, Vec<Vec3>, usize)> {
    if (pred.width, pred.height) != (gt.width, gt.height) {
        return Err(LossError::Resolution {
            pred: (pred.width, pred.height),
            gt: (gt.width, gt.height),
        });
    }
    let mut d_point = vec![Vec3::zeros(); pred.len()];
    let mut d_norm = vec![Vec3::zeros(); pred.len()];
    let mut count = 0usize;
    let mut value = 0.0;
    for idx in 0..pred.len() {
        if pred.mask[idx] && gt.mask[idx] {
            count += 1;
            let dp = pred.pointmap[idx] - gt.pointmap[idx];
            let dn = pred.normalmap[idx] - gt.normalmap[idx];
            value += gm(dp.norm(), weights.sigma_point) + gm(dn.norm(), weights.sigma_normal);
            d_point[idx] = gm_grad(&dp, weights.sigma_point);
            d_norm[idx] = gm_grad(&dn, weights.sigma_normal);
        }
    }
    if count == 0 {
        return Ok((0.0, d_point, d_norm, 0));
    }
    let inv = 1.0 / count as f64;
    for g in d_point.iter_mut().chain(d_norm.iter_mut()) {
        *g *= inv;
    }
    Ok((value * inv, d_point, d_norm, count))
}

/// Robust pointmap + normal-map loss over all views (mean per view over
/// the mask intersection, summed over views) with the gradient with
/// respect to the predicted vertices via the renderer's backward pass.
pub fn geom_loss(
    v_pred: &[Vec3],
    faces: &[[u32; 3]],
    cams: &[&Camera],
    pred_maps: &[GeoMaps],
    gt_maps: &[&GeoMaps],
    weights: &LossWeights,
) -> Result<(f64, Vec<Vec3>, Vec<f64>, Vec<usize>)> {
    if cams.len() != pred_maps.len() || cams.len() != gt_maps.len() {
        return Err(LossError::ViewCount(format!(
            "{} cameras, {} predicted maps, {} ground-truth maps",
            cams.len(),
            pred_maps.len(),
            gt_maps.len()
        )));
    }
    let mut total = 0.0;
    let mut grad = vec![Vec3::zeros(); v_pred.len()];
    let mut per_view = Vec::with_capacity(cams.len());
    let mut counts = Vec::with_capacity(cams.len());
    for ((cam, pred), gt) in cams.iter().zip(pred_maps).zip(gt_maps) {
        let (value, d_point, d_norm, count) = geom_view_residual(pred, gt, weights)?;
        total += value;
        per_view.push(value);
        counts.push(count);
        if count > 0 {
            let g = render_backward(pred, &d_point, &d_norm, v_pred, faces, cam)?;
            for (acc, gi) in grad.iter_mut().zip(g) {
                *acc += gi;
            }
        }
    }
    Ok((total, grad, per_view, counts))
}

// ---------------------------------------------------------------------------
// Landmark reprojection

/// Squared-pixel reprojection residuals against per-view dense landmarks,
/// confidence-weighted, averaged over the valid vertices of each view and
/// summed over views. Valid = confidence > 0 and projection in front of
/// the near plane.
pub fn landmark_loss(
    verts: &[Vec3],
    cams: &[&Camera],
    landmarks: &[&ViewLandmarks],
) -> Result<(f64, Vec<Vec3>)> {
    if cams.len() != landmarks.len() {
        return Err(LossError::ViewCount(format!(
            "{} cameras vs {} landmark views",
            cams.len(),
            landmarks.len()
        )));
    }
    let mut total = 0.0;
    let mut grad = vec![Vec3::zeros(); verts.len()];
    for (cam, lm) in cams.iter().zip(landmarks) {
        if lm.points.len() != verts.len() || lm.confidence.len() != verts.len() {
            return Err(LossError::LandmarkShape { expected: verts.len(), got: lm.points.len() });
        }
        // First pass: count valid vertices of this view.
        let mut valid = 0usize;
        let mut cache: Vec<Option<(Vec3, f64)>> = Vec::with_capacity(verts.len());
        for (v, p) in verts.iter().enumerate() {
            let conf = lm.confidence[v];
            if conf <= 0.0 {
                cache.push(None);
                continue;
            }
            let q = cam.to_camera_point(p);
            if q.z <= Z_NEAR_MM {
                cache.push(None);
                continue;
            }
            valid += 1;
            cache.push(Some((q, conf)));
        }
        if valid == 0 {
            continue;
        }
        let inv = 1.0 / valid as f64;
        let rt = cam.rotation.transpose();
        for (v, slot) in cache.iter().enumerate() {
            let Some((q, conf)) = slot else { continue };
            let u = cam.fx * q.x / q.z + cam.cx;
            let w = cam.fy * q.y / q.z + cam.cy;
            let ex = u - lm.points[v][0];
            let ey = w - lm.points[v][1];
            total += conf * (ex * ex + ey * ey) * inv;
            let s = 2.0 * conf * inv;
            let gq = Vec3::new(
                s * ex * cam.fx / q.z,
                s * ey * cam.fy / q.z,
                -s * (ex * cam.fx * q.x + ey * cam.fy * q.y) / (q.z * q.z),
            );
            grad[v] += rt * gq;
        }
    }
    Ok((total, grad))
}

// ---------------------------------------------------------------------------
// Edge and alignment losses

/// Mean squared relative edge-length change; `verts_b` is the reference.
pub fn edge_loss(
    verts_a: &[Vec3],
    verts_b: &[Vec3],
    edges: &[(u32, u32)],
) -> (f64, Vec<Vec3>, Vec<Vec3>) {
    let mut value = 0.0;
    let mut grad_a = vec![Vec3::zeros(); verts_a.len()];
    let mut grad_b = vec![Vec3::zeros(); verts_b.len()];
    if edges.is_empty() {
        return (0.0, grad_a, grad_b);
    }
    let inv = 1.0 / edges.len() as f64;
    for &(i, j) in edges {
        let (i, j) = (i as usize, j as usize);
        let ea = verts_a[i] - verts_a[j];
        let eb = verts_b[i] - verts_b[j];
        let la = ea.norm();
        let lb = eb.norm();
        let denom = lb + EDGE_EPS_MM;
        let s = (la - lb) / denom;
        value += s * s * inv;

        let d_la = 2.0 * s / denom * inv;
        // ∂s/∂lb = (−la − ε) / denom²
        let d_lb = 2.0 * s * (-(la + EDGE_EPS_MM) / (denom * denom)) * inv;
        if la > 1e-12 {
            let dir = ea / la;
            grad_a[i] += dir * d_la;
            grad_a[j] -= dir * d_la;
        }
        if lb > 1e-12 {
            let dir = eb / lb;
            grad_b[i] += dir * d_lb;
            grad_b[j] -= dir * d_lb;
        }
    }
    (value, grad_a, grad_b)
}

/// Topology alignment between the inverse-solver output and the free-form
/// prediction: λ_v mean squared vertex distance plus λ_e relative
/// edge-length loss with the prediction as reference. Gradients flow to
/// both vertex sets.
pub fn pliks_align_loss(
    v_fl: &[Vec3],
    v_pred: &[Vec3],
    edges: &[(u32, u32)],
    weights: &LossWeights,
) -> (f64, Vec<Vec3>, Vec<Vec3>) {
    let n = v_fl.len();
    let inv = 1.0 / n as f64;
    let mut vertex_term = 0.0;
    let mut g_fl = vec![Vec3::zeros(); n];
    let mut g_pred = vec![Vec3::zeros(); n];
    for v in 0..n {
        let d = v_fl[v] - v_pred[v];
        vertex_term += d.norm_squared() * inv;
        let g = d * (2.0 * inv * weights.lambda_v);
        g_fl[v] += g;
        g_pred[v] -= g;
    }
    let (edge_term, ge_fl, ge_pred) = edge_loss(v_fl, v_pred, edges);
    for v in 0..n {
        g_fl[v] += ge_fl[v] * weights.lambda_e;
        g_pred[v] += ge_pred[v] * weights.lambda_e;
    }
    (weights.lambda_v * vertex_term + weights.lambda_e * edge_term, g_fl, g_pred)
}

/// λ_β‖β‖² + λ_ψ‖ψ‖².
pub fn pliks_reg_loss(
    beta: &DVector<f64>,
    psi: &DVector<f64>,
    weights: &LossWeights,
) -> (f64, DVector<f64>, DVector<f64>) {
    let value = weights.lambda_beta * beta.norm_squared() + weights.lambda_psi * psi.norm_squared();
    (value, beta * (2.0 * weights.lambda_beta), psi * (2.0 * weights.lambda_psi))
}

// ---------------------------------------------------------------------------
// Total objective

/// Per-view inputs for the coarse objective.
pub struct ViewData<'a> {
    pub camera: &'a Camera,
    pub gt_maps: &'a GeoMaps,
    pub landmarks: &'a ViewLandmarks,
}

/// Raw values of the inverse-solver coupling terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coupling {
    /// Landmark loss on the prediction plus on the re-forwarded vertices.
    pub landmark: f64,
    pub align: f64,
    pub reg: f64,
}

/// Landmark, alignment and regularization terms shared by every data-term
/// variant, with their already-weighted gradient with respect to the
/// prediction (including the chain through the solver, rotations frozen).
pub fn coupling_loss(
    v_pred: &[Vec3],
    edges: &[(u32, u32)],
    cams: &[&Camera],
    lms: &[&ViewLandmarks],
    pliks: &PliksResult,
    weights: &LossWeights,
) -> Result<(Coupling, Vec<Vec3>)> {
    let (lm_pred_val, g_lm_pred) = landmark_loss(v_pred, cams, lms)?;
    let (lm_fl_val, g_lm_fl) = landmark_loss(&pliks.v_fl, cams, lms)?;
    let (align_val, g_fl_align, g_pred_align) =
        pliks_align_loss(&pliks.v_fl, v_pred, edges, weights);
    let (reg_val, g_beta, g_psi) = pliks_reg_loss(&pliks.beta, &pliks.psi, weights);

    // Everything landing on v_fl or the recovered parameters flows back to
    // the prediction through the solver.
    let g_vfl: Vec<Vec3> = g_lm_fl
        .iter()
        .zip(&g_fl_align)
        .map(|(lm, al)| lm * weights.w_lm + al * weights.w_align)
        .collect();
    let g_solver = pliks.backward(
        &g_vfl,
        &(g_beta * weights.w_reg),
        &(g_psi * weights.w_reg),
        &Vec3::zeros(),
    );

    let grad: Vec<Vec3> = (0..v_pred.len())
        .map(|v| g_lm_pred[v] * weights.w_lm + g_pred_align[v] * weights.w_align + g_solver[v])
        .collect();
    Ok((Coupling { landmark: lm_pred_val + lm_fl_val, align: align_val, reg: reg_val }, grad))
}

/// The coarse objective: weighted sum of rendered geometric loss, landmark
/// loss on both the prediction and the re-forwarded vertices, topology
/// alignment, and parameter regularization. The gradient with respect to
/// the prediction includes the chain through the inverse solver's linear
/// solve (rotations frozen).
pub fn total_loss(
    v_pred: &[Vec3],
    faces: &[[u32; 3]],
    edges: &[(u32, u32)],
    pred_maps: &[GeoMaps],
    views: &[ViewData],
    pliks: &PliksResult,
    weights: &LossWeights,
) -> Result<(LossReport, Vec<Vec3>)> {
    let cams: Vec<&Camera> = views.iter().map(|v| v.camera).collect();
    let gt_maps: Vec<&GeoMaps> = views.iter().map(|v| v.gt_maps).collect();
    let lms: Vec<&ViewLandmarks> = views.iter().map(|v| v.landmarks).collect();

    let (geom_val, g_geom, per_view, counts) =
        geom_loss(v_pred, faces, &cams, pred_maps, &gt_maps, weights)?;
    let (coupling, g_coupling) = coupling_loss(v_pred, edges, &cams, &lms, pliks, weights)?;

    let grad: Vec<Vec3> =
        (0..v_pred.len()).map(|v| g_geom[v] * weights.w_geom + g_coupling[v]).collect();

    let mut report = LossReport::from_terms(vec![
        ("geom", weights.w_geom * geom_val, geom_val),
        ("landmark", weights.w_lm * coupling.landmark, coupling.landmark),
        ("align", weights.w_align * coupling.align, coupling.align),
        ("reg", weights.w_reg * coupling.reg, coupling.reg),
    ]);
    report.per_view_geom = per_view;
    report.masked_pixels = counts;
    Ok((report, grad))
}

/// The refinement objective: landmark loss on the refined vertices,
/// edge-length regularization against the frozen anchor, an eyeball
/// constraint keeping masked vertices near the anchor, and the rendered
/// geometric loss. Gradient is with respect to `v_ref` only.
pub fn refine_loss(
    v_ref: &[Vec3],
    v_anchor: &[Vec3],
    eye_mask: &[bool],
    faces: &[[u32; 3]],
    edges: &[(u32, u32)],
    ref_maps: &[GeoMaps],
    views: &[ViewData],
    weights: &LossWeights,
) -> Result<(LossReport, Vec<Vec3>)> {
    if eye_mask.len() != v_ref.len() {
        return Err(LossError::MaskLength { expected: v_ref.len(), got: eye_mask.len() });
    }
    let cams: Vec<&Camera> = views.iter().map(|v| v.camera).collect();
    let gt_maps: Vec<&GeoMaps> = views.iter().map(|v| v.gt_maps).collect();
    let lms: Vec<&ViewLandmarks> = views.iter().map(|v| v.landmarks).collect();

    let (geom_val, g_geom, per_view, counts) =
        geom_loss(v_ref, faces, &cams, ref_maps, &gt_maps, weights)?;
    let (lm_val, g_lm) = landmark_loss(v_ref, &cams, &lms)?;
    let (edge_val, g_edge, _) = edge_loss(v_ref, v_anchor, edges);

    let n_eyes = eye_mask.iter().filter(|&&m| m).count();
    let mut eye_val = 0.0;
    let mut g_eye = vec![Vec3::zeros(); v_ref.len()];
    if n_eyes > 0 {
        let inv = 1.0 / n_eyes as f64;
        for v in 0..v_ref.len() {
            if eye_mask[v] {
                let d = v_ref[v] - v_anchor[v];
                eye_val += d.norm_squared() * inv;
                g_eye[v] = d * (2.0 * inv);
            }
        }
    }

    let grad: Vec<Vec3> = (0..v_ref.len())
        .map(|v| {
            g_geom[v] * weights.w_geom_r
                + g_lm[v] * weights.w_lm_r
                + g_edge[v] * weights.w_edge_r
                + g_eye[v] * weights.w_eye_r
        })
        .collect();

    let mut report = LossReport::from_terms(vec![
        ("geom", weights.w_geom_r * geom_val, geom_val),
        ("landmark", weights.w_lm_r * lm_val, lm_val),
        ("edge", weights.w_edge_r * edge_val, edge_val),
        ("eye", weights.w_eye_r * eye_val, eye_val),
    ]);
    report.per_view_geom = per_view;
    report.masked_pixels = counts;
    Ok((report, grad))
}

// ---------------------------------------------------------------------------
// Baselines

/// Mean squared distance from scan points to their closest point on the
/// mesh. The subgradient with respect to the mesh vertices holds each
/// point's closest-triangle assignment (and barycentric foot point) fixed.
pub fn point_to_surface_loss(
    points: &[Vec3],
    vertices: &[Vec3],
    faces: &[[u32; 3]],
) -> Result<(f64, Vec<Vec3>)> {
    if points.is_empty() {
        return Err(LossError::EmptyPoints);
    }
    let hits = metrics::closest_hits(points, vertices, faces)?;
    let inv = 1.0 / points.len() as f64;
    let mut value = 0.0;
    let mut grad = vec![Vec3::zeros(); vertices.len()];
    for (p, hit) in points.iter().zip(&hits) {
        value += hit.distance2 * inv;
        let residual = p - hit.point;
        let f = faces[hit.face as usize];
        for k in 0..3 {
            grad[f[k] as usize] -= residual * (2.0 * hit.bary[k] * inv);
        }
    }
    Ok((value, grad))
}

/// Symmetric Chamfer loss: the average of the two directional means of
/// squared nearest-neighbor distances. Assignments are held fixed for the
/// subgradients.
pub fn chamfer_loss(
    points_a: &[Vec3],
    points_b: &[Vec3],
) -> Result<(f64, Vec<Vec3>, Vec<Vec3>)> {
    if points_a.is_empty() || points_b.is_empty() {
        return Err(LossError::EmptyPoints);
    }
    let nn = |from: &[Vec3], to: &[Vec3]| -> Vec<usize> {
        from.iter()
            .map(|p| {
                let mut best = (f64::INFINITY, 0usize);
                for (i, q) in to.iter().enumerate() {
                    let d2 = (p - q).norm_squared();
                    if d2 < best.0 {
                        best = (d2, i);
                    }
                }
                best.1
            })
            .collect()
    };
    let a_to_b = nn(points_a, points_b);
    let b_to_a = nn(points_b, points_a);
    let inv_a = 0.5 / points_a.len() as f64;
    let inv_b = 0.5 / points_b.len() as f64;

    let mut value = 0.0;
    let mut grad_a = vec![Vec3::zeros(); points_a.len()];
    let mut grad_b = vec![Vec3::zeros(); points_b.len()];
    for (i, &j) in a_to_b.iter().enumerate() {
        let d = points_a[i] - points_b[j];
        value += d.norm_squared() * inv_a;
        grad_a[i] += d * (2.0 * inv_a);
        grad_b[j] -= d * (2.0 * inv_a);
    }
    for (j, &i) in b_to_a.iter().enumerate() {
        let d = points_b[j] - points_a[i];
        value += d.norm_squared() * inv_b;
        grad_b[j] += d * (2.0 * inv_b);
        grad_a[i] -= d * (2.0 * inv_b);
    }
    Ok((value, grad_a, grad_b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::ring_rig;
    use crate::model::{edges as topo_edges, make_toy_model, Params};
    use crate::pliks::{self, PliksLambdas};
    use crate::raster::render;
    use crate::Mat3;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rand_unit(rng: &mut ChaCha8Rng) -> f64 {
        rng.random::<f64>() * 2.0 - 1.0
    }

    fn rand_vec(rng: &mut ChaCha8Rng, scale: f64) -> Vec3 {
        Vec3::new(rand_unit(rng), rand_unit(rng), rand_unit(rng)) * scale
    }

    #[test]
    fn gm_pinned_values() {
        assert_eq!(gm(0.0, 10.0), 0.0);
        assert_eq!(gm(10.0, 10.0), 0.5);
        assert!(gm(1e6, 10.0) > 0.9999);
        assert_eq!(gm(0.0, 3.0), 0.0);
    }

    #[test]
    fn gm_monotone_bounded_smooth_at_origin() {
        let sigma = 7.0;
        let mut last = -1.0;
        for k in 0..2000 {
            let x = k as f64 * 0.05;
            let y = gm(x, sigma);
            assert!(y > last, "gm must be strictly increasing");
            assert!((0.0..1.0).contains(&y));
            last = y;
        }
        // Derivative at the origin vanishes.
        let g = gm_grad(&Vec3::zeros(), sigma);
        assert_eq!(g, Vec3::zeros());
        let h = 1e-7;
        let fd = (gm(h, sigma) - gm(-h_abs(h), sigma)) / (2.0 * h);
        assert!(fd.abs() < 1e-6);
    }

    fn h_abs(h: f64) -> f64 {
        h // gm is even in x; spelled out for clarity
    }

    fn view_camera() -> Camera {
        Camera {
            rotation: Mat3::identity(),
            translation: Vec3::new(0.0, 0.0, 400.0),
            fx: 350.0,
            fy: 350.0,
            cx: 31.5,
            cy: 31.5,
            width: 64,
            height: 64,
        }
    }

    fn triangle() -> (Vec<Vec3>, Vec<[u32; 3]>) {
        (
            vec![Vec3::new(-40.0, -40.0, 0.0), Vec3::new(40.0, -40.0, 0.0), Vec3::new(0.0, 50.0, 0.0)],
            vec![[0, 1, 2]],
        )
    }

    #[test]
    fn geom_loss_zero_on_identical_maps() {
        let (verts, faces) = triangle();
        let cam = view_camera();
        let maps = render(&verts, &faces, &cam, 64, 64);
        let w = LossWeights::default();
        let (val, grad, per_view, counts) =
            geom_loss(&verts, &faces, &[&cam], &[maps.clone()], &[&maps], &w).unwrap();
        assert_eq!(val, 0.0);
        assert_eq!(per_view, vec![0.0]);
        assert!(counts[0] > 50);
        assert!(grad.iter().all(|g| g.norm() < 1e-12));
    }

    #[test]
    fn geom_loss_constant_offset_hits_half() {
        // A uniform 10 mm pointmap offset with σ=10 puts every pixel at
        // ρ = 0.5; identical normals contribute zero.
        let (verts, faces) = triangle();
        let cam = view_camera();
        let pred = render(&verts, &faces, &cam, 64, 64);
        let mut gt = pred.clone();
        for p in &mut gt.pointmap {
            *p += Vec3::new(6.0, 0.0, 8.0); // norm 10 mm
        }
        let w = LossWeights::default();
        let (value, _, _, _) = geom_loss(&verts, &faces, &[&cam], &[pred], &[&gt], &w).unwrap();
        assert_relative_eq!(value, 0.5, epsilon = 1e-9);
    }

    #[test]
    fn geom_loss_matches_naive_per_pixel_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (mut verts, mut faces) = triangle();
        verts.push(Vec3::new(50.0, 45.0, 12.0));
        faces.push([1, 3, 2]);
        let cam = view_camera();
        let moved: Vec<Vec3> = verts.iter().map(|p| p + rand_vec(&mut rng, 6.0)).collect();
        let pred = render(&moved, &faces, &cam, 64, 64);
        let gt = render(&verts, &faces, &cam, 64, 64);
        let w = LossWeights::default();
        let (value, _, _, _) =
            geom_loss(&moved, &faces, &[&cam], &[pred.clone()], &[&gt], &w).unwrap();

        let mut acc = 0.0;
        let mut n = 0usize;
        for idx in 0..pred.len() {
            if pred.mask[idx] && gt.mask[idx] {
                let dp = (pred.pointmap[idx] - gt.pointmap[idx]).norm();
                let dn = (pred.normalmap[idx] - gt.normalmap[idx]).norm();
                acc += gm(dp, w.sigma_point) + gm(dn, w.sigma_normal);
                n += 1;
            }
        }
        assert_relative_eq!(value, acc / n as f64, epsilon = 1e-10);
    }

    #[test]
    fn geom_loss_view_order_sum_commutes() {
        let (verts, faces) = triangle();
        let rig = ring_rig(3, Vec3::zeros(), 400.0, 350.0, 64, 64);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let moved: Vec<Vec3> = verts.iter().map(|p| p + rand_vec(&mut rng, 4.0)).collect();
        let w = LossWeights::default();
        let gt: Vec<GeoMaps> =
            rig.cameras.iter().map(|c| render(&verts, &faces, c, 64, 64)).collect();
        let pred: Vec<GeoMaps> =
            rig.cameras.iter().map(|c| render(&moved, &faces, c, 64, 64)).collect();
        let cams: Vec<&Camera> = rig.cameras.iter().collect();
        let gts: Vec<&GeoMaps> = gt.iter().collect();
        let (v1, _, _, _) = geom_loss(&moved, &faces, &cams, &pred, &gts, &w).unwrap();

        let rcams: Vec<&Camera> = rig.cameras.iter().rev().collect();
        let rpred: Vec<GeoMaps> = pred.iter().rev().cloned().collect();
        let rgts: Vec<&GeoMaps> = gt.iter().rev().collect();
        let (v2, _, _, _) = geom_loss(&moved, &faces, &rcams, &rpred, &rgts, &w).unwrap();
        assert_relative_eq!(v1, v2, epsilon = 1e-12);
    }

    #[test]
    fn geom_loss_rejects_resolution_mismatch() {
        let (verts, faces) = triangle();
        let cam = view_camera();
        let a = render(&verts, &faces, &cam, 64, 64);
        let b = render(&verts, &faces, &cam, 32, 32);
        assert!(matches!(
            geom_loss(&verts, &faces, &[&cam], &[a], &[&b], &LossWeights::default()),
            Err(LossError::Resolution { .. })
        ));
    }

    fn exact_landmarks(verts: &[Vec3], cam: &Camera) -> ViewLandmarks {
        let mut points = Vec::with_capacity(verts.len());
        for p in verts {
            let (uv, _) = cam.project_point(p);
            points.push(uv);
        }
        ViewLandmarks { points, confidence: vec![1.0; verts.len()] }
    }

    #[test]
    fn landmark_loss_zero_on_exact_projections() {
        let (verts, _) = triangle();
        let cam = view_camera();
        let lm = exact_landmarks(&verts, &cam);
        let (val, grad) = landmark_loss(&verts, &[&cam], &[&lm]).unwrap();
        assert_eq!(val, 0.0);
        assert!(grad.iter().all(|g| g.norm() == 0.0));
    }

    #[test]
    fn landmark_loss_unit_offset_is_one() {
        let (verts, _) = triangle();
        let cam = view_camera();
        let mut lm = exact_landmarks(&verts, &cam);
        for p in &mut lm.points {
            p[0] -= 1.0; // prediction lands 1 px to the right of each target
        }
        let (val, _) = landmark_loss(&verts, &[&cam], &[&lm]).unwrap();
        assert_relative_eq!(val, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn landmark_loss_matches_per_vertex_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = make_toy_model(30, 42, 2, 2, 2);
        let cam = &ring_rig(1, Vec3::zeros(), 500.0, 400.0, 256, 256).cameras[0];
        let mut lm = exact_landmarks(&m.template, cam);
        for p in &mut lm.points {
            p[0] += rand_unit(&mut rng) * 3.0;
            p[1] += rand_unit(&mut rng) * 3.0;
        }
        for c in &mut lm.confidence {
            *c = if rng.random::<f64>() < 0.2 { 0.0 } else { rng.random::<f64>() };
        }
        let (val, _) = landmark_loss(&m.template, &[cam], &[&lm]).unwrap();

        let mut acc = 0.0;
        let mut n = 0usize;
        for (v, p) in m.template.iter().enumerate() {
            if lm.confidence[v] > 0.0 {
                let (uv, ok) = cam.project_point(p);
                if ok {
                    let ex = uv[0] - lm.points[v][0];
                    let ey = uv[1] - lm.points[v][1];
                    acc += lm.confidence[v] * (ex * ex + ey * ey);
                    n += 1;
                }
            }
        }
        assert_relative_eq!(val, acc / n as f64, epsilon = 1e-10);
    }

    #[test]
    fn landmark_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (verts, _) = triangle();
        let rig = ring_rig(2, Vec3::zeros(), 450.0, 380.0, 128, 128);
        let cams: Vec<&Camera> = rig.cameras.iter().collect();
        let lms: Vec<ViewLandmarks> = rig
            .cameras
            .iter()
            .map(|c| {
                let mut lm = exact_landmarks(&verts, c);
                for p in &mut lm.points {
                    p[0] += rand_unit(&mut rng) * 2.0;
                    p[1] += rand_unit(&mut rng) * 2.0;
                }
                lm
            })
            .collect();
        let lm_refs: Vec<&ViewLandmarks> = lms.iter().collect();
        let (_, grad) = landmark_loss(&verts, &cams, &lm_refs).unwrap();

        let h = 1e-5;
        for v in 0..verts.len() {
            for axis in 0..3 {
                let mut plus = verts.clone();
                plus[v][axis] += h;
                let mut minus = verts.clone();
                minus[v][axis] -= h;
                let fp = landmark_loss(&plus, &cams, &lm_refs).unwrap().0;
                let fm = landmark_loss(&minus, &cams, &lm_refs).unwrap().0;
                let fd = (fp - fm) / (2.0 * h);
                let an = grad[v][axis];
                let denom = fd.abs().max(an.abs()).max(1e-9);
                assert!((fd - an).abs() / denom < 1e-6, "fd {fd} vs analytic {an}");
            }
        }
    }

    #[test]
    fn edge_loss_zero_and_scale_cases() {
        let m = make_toy_model(31, 42, 2, 2, 2);
        let e = topo_edges(&m.faces);
        let (val, _, _) = edge_loss(&m.template, &m.template, &e);
        assert_eq!(val, 0.0);

        let doubled: Vec<Vec3> = m.template.iter().map(|p| p * 2.0).collect();
        let (val, _, _) = edge_loss(&doubled, &m.template, &e);
        assert_relative_eq!(val, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn edge_loss_matches_per_edge_oracle_and_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let m = make_toy_model(32, 42, 2, 2, 2);
        let e = topo_edges(&m.faces);
        let moved: Vec<Vec3> = m.template.iter().map(|p| p + rand_vec(&mut rng, 2.0)).collect();
        let (val, grad_a, grad_b) = edge_loss(&moved, &m.template, &e);

        let mut acc = 0.0;
        for &(i, j) in &e {
            let la = (moved[i as usize] - moved[j as usize]).norm();
            let lb = (m.template[i as usize] - m.template[j as usize]).norm();
            let s = (la - lb) / (lb + EDGE_EPS_MM);
            acc += s * s;
        }
        assert_relative_eq!(val, acc / e.len() as f64, epsilon = 1e-10);

        // Finite differences on both argument sets.
        let h = 1e-6;
        for v in (0..moved.len()).step_by(11) {
            for axis in 0..3 {
                let mut plus = moved.clone();
                plus[v][axis] += h;
                let mut minus = moved.clone();
                minus[v][axis] -= h;
                let fd = (edge_loss(&plus, &m.template, &e).0 - edge_loss(&minus, &m.template, &e).0)
                    / (2.0 * h);
                let an = grad_a[v][axis];
                assert!((fd - an).abs() / fd.abs().max(an.abs()).max(1e-9) < 1e-6);

                let mut bplus = m.template.clone();
                bplus[v][axis] += h;
                let mut bminus = m.template.clone();
                bminus[v][axis] -= h;
                let fd_b = (edge_loss(&moved, &bplus, &e).0 - edge_loss(&moved, &bminus, &e).0)
                    / (2.0 * h);
                let an_b = grad_b[v][axis];
                assert!((fd_b - an_b).abs() / fd_b.abs().max(an_b.abs()).max(1e-9) < 1e-6);
            }
        }
    }

    #[test]
    fn align_loss_translation_case() {
        let m = make_toy_model(33, 42, 2, 2, 2);
        let e = topo_edges(&m.faces);
        let mut w = LossWeights::default();
        w.lambda_v = 1.0;
        w.lambda_e = 1.0;
        let shifted: Vec<Vec3> = m.template.iter().map(|p| p + Vec3::new(1.0, 0.0, 0.0)).collect();
        let (val, _, _) = pliks_align_loss(&shifted, &m.template, &e, &w);
        assert_relative_eq!(val, 1.0, epsilon = 1e-12);

        let (zero, _, _) = pliks_align_loss(&m.template, &m.template, &e, &w);
        assert_eq!(zero, 0.0);
    }

    #[test]
    fn align_loss_is_sum_of_its_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let m = make_toy_model(34, 42, 2, 2, 2);
        let e = topo_edges(&m.faces);
        let w = LossWeights::default();
        let a: Vec<Vec3> = m.template.iter().map(|p| p + rand_vec(&mut rng, 1.5)).collect();
        let (val, _, _) = pliks_align_loss(&a, &m.template, &e, &w);
        let vertex: f64 =
            a.iter().zip(&m.template).map(|(x, y)| (x - y).norm_squared()).sum::<f64>()
                / a.len() as f64;
        let (edge_val, _, _) = edge_loss(&a, &m.template, &e);
        assert_relative_eq!(val, w.lambda_v * vertex + w.lambda_e * edge_val, epsilon = 1e-12);
    }

    #[test]
    fn reg_loss_values_and_gradient() {
        let mut w = LossWeights::default();
        w.lambda_beta = 1.0;
        w.lambda_psi = 1.0;
        let beta = DVector::from_vec(vec![3.0, 4.0]);
        let psi = DVector::zeros(2);
        let (val, g_beta, _) = pliks_reg_loss(&beta, &psi, &w);
        assert_eq!(val, 25.0);
        assert_eq!(g_beta, DVector::from_vec(vec![6.0, 8.0]));

        let (zero, _, _) = pliks_reg_loss(&DVector::zeros(2), &DVector::zeros(2), &w);
        assert_eq!(zero, 0.0);

        // Finite differences.
        let h = 1e-6;
        let mut bp = beta.clone();
        bp[0] += h;
        let mut bm = beta.clone();
        bm[0] -= h;
        let fd = (pliks_reg_loss(&bp, &psi, &w).0 - pliks_reg_loss(&bm, &psi, &w).0) / (2.0 * h);
        assert!((fd - g_beta[0]).abs() < 1e-8);
    }

    fn perfect_scene_views(
        m: &crate::model::ParametricModel,
        mesh_verts: &[Vec3],
        k: usize,
        res: usize,
    ) -> (Vec<Camera>, Vec<GeoMaps>, Vec<ViewLandmarks>) {
        let center = mesh_verts.iter().sum::<Vec3>() / mesh_verts.len() as f64;
        let rig = ring_rig(k, center, 600.0, 400.0, res as u32, res as u32);
        let gt_maps: Vec<GeoMaps> =
            rig.cameras.iter().map(|c| render(mesh_verts, &m.faces, c, res, res)).collect();
        let lms: Vec<ViewLandmarks> =
            rig.cameras.iter().map(|c| exact_landmarks(mesh_verts, c)).collect();
        (rig.cameras, gt_maps, lms)
    }

    #[test]
    fn total_loss_zero_weights_and_manual_sum() {
        let m = make_toy_model(35, 42, 3, 2, 2);
        let mut params = Params::zeros(&m);
        params.theta[0] = Vec3::new(0.1, 0.0, -0.05);
        params.trans = Vec3::new(2.0, 1.0, 0.0);
        let mesh = m.forward(&params).unwrap();
        let e = topo_edges(&m.faces);
        let (cams, gt_maps, lms) = perfect_scene_views(&m, &mesh.vertices, 2, 48);
        let views: Vec<ViewData> = cams
            .iter()
            .zip(&gt_maps)
            .zip(&lms)
            .map(|((camera, gt), landmarks)| ViewData { camera, gt_maps: gt, landmarks })
            .collect();

        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let v_pred: Vec<Vec3> =
            mesh.vertices.iter().map(|p| p + rand_vec(&mut rng, 1.0)).collect();
        let pred_maps: Vec<GeoMaps> =
            cams.iter().map(|c| render(&v_pred, &m.faces, c, 48, 48)).collect();
        let pliks_res = pliks::run(&v_pred, &m, PliksLambdas::default()).unwrap();

        let zero = LossWeights {
            w_geom: 0.0,
            w_lm: 0.0,
            w_align: 0.0,
            w_reg: 0.0,
            ..LossWeights::default()
        };
        let (report, grad) =
            total_loss(&v_pred, &m.faces, &e, &pred_maps, &views, &pliks_res, &zero).unwrap();
        assert_eq!(report.total, 0.0);
        assert!(grad.iter().all(|g| g.norm() == 0.0));

        let w = LossWeights::default();
        let (report, _) =
            total_loss(&v_pred, &m.faces, &e, &pred_maps, &views, &pliks_res, &w).unwrap();
        let manual: f64 = report.terms.values().sum();
        assert_relative_eq!(report.total, manual, epsilon = 1e-9 * report.total.abs().max(1.0));
        assert_eq!(report.per_view_geom.len(), 2);
        assert_eq!(report.masked_pixels.len(), 2);
    }

    #[test]
    fn total_loss_near_zero_on_perfect_rigid_fit() {
        // Rigid-only ground truth keeps the Procrustes step exact, so the
        // inverse pass reproduces the prediction and every term vanishes.
        let m = make_toy_model(36, 162, 3, 2, 1);
        let mut params = Params::zeros(&m);
        params.theta[0] = Vec3::new(0.2, -0.1, 0.3);
        params.trans = Vec3::new(5.0, -2.0, 3.0);
        let mesh = m.forward(&params).unwrap();
        let e = topo_edges(&m.faces);
        let (cams, gt_maps, lms) = perfect_scene_views(&m, &mesh.vertices, 3, 64);
        let views: Vec<ViewData> = cams
            .iter()
            .zip(&gt_maps)
            .zip(&lms)
            .map(|((camera, gt), landmarks)| ViewData { camera, gt_maps: gt, landmarks })
            .collect();
        let pred_maps: Vec<GeoMaps> =
            cams.iter().map(|c| render(&mesh.vertices, &m.faces, c, 64, 64)).collect();
        let pliks_res =
            pliks::run(&mesh.vertices, &m, PliksLambdas { beta: 0.0, psi: 0.0 }).unwrap();
        let mut w = LossWeights::default();
        w.w_reg = 0.0;
        let (report, _) =
            total_loss(&mesh.vertices, &m.faces, &e, &pred_maps, &views, &pliks_res, &w).unwrap();
        assert!(report.total < 1e-8, "perfect fit total {}", report.total);
    }

    #[test]
    fn refine_loss_eye_mask_semantics() {
        let m = make_toy_model(37, 42, 2, 2, 2);
        let e = topo_edges(&m.faces);
        let n = m.n_vertices();
        let mut eye_mask = vec![false; n];
        eye_mask[3] = true;
        eye_mask[7] = true;

        let (cams, gt_maps, lms) = perfect_scene_views(&m, &m.template, 2, 48);
        let views: Vec<ViewData> = cams
            .iter()
            .zip(&gt_maps)
            .zip(&lms)
            .map(|((camera, gt), landmarks)| ViewData { camera, gt_maps: gt, landmarks })
            .collect();
        let w = LossWeights::default();

        // Anchor configuration is a global minimum: everything zero.
        let ref_maps: Vec<GeoMaps> =
            cams.iter().map(|c| render(&m.template, &m.faces, c, 48, 48)).collect();
        let (report, _) = refine_loss(
            &m.template,
            &m.template,
            &eye_mask,
            &m.faces,
            &e,
            &ref_maps,
            &views,
            &w,
        )
        .unwrap();
        assert!(report.total < 1e-12);

        // Moving a non-eye vertex keeps the eye term at zero.
        let mut moved = m.template.clone();
        moved[0] += Vec3::new(3.0, 0.0, 0.0);
        let moved_maps: Vec<GeoMaps> =
            cams.iter().map(|c| render(&moved, &m.faces, c, 48, 48)).collect();
        let (report, _) =
            refine_loss(&moved, &m.template, &eye_mask, &m.faces, &e, &moved_maps, &views, &w)
                .unwrap();
        assert_eq!(report.raw["eye"], 0.0);

        // Moving one eye vertex by 2 mm: eye term is 4 / |mask|.
        let mut eye_moved = m.template.clone();
        eye_moved[3] += Vec3::new(0.0, 2.0, 0.0);
        let eye_maps: Vec<GeoMaps> =
            cams.iter().map(|c| render(&eye_moved, &m.faces, c, 48, 48)).collect();
        let (report, _) =
            refine_loss(&eye_moved, &m.template, &eye_mask, &m.faces, &e, &eye_maps, &views, &w)
                .unwrap();
        assert_relative_eq!(report.raw["eye"], 4.0 / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn refine_loss_rejects_bad_mask_length() {
        let m = make_toy_model(38, 42, 2, 2, 2);
        let e = topo_edges(&m.faces);
        let (cams, gt_maps, lms) = perfect_scene_views(&m, &m.template, 1, 32);
        let views: Vec<ViewData> = cams
            .iter()
            .zip(&gt_maps)
            .zip(&lms)
            .map(|((camera, gt), landmarks)| ViewData { camera, gt_maps: gt, landmarks })
            .collect();
        let ref_maps: Vec<GeoMaps> =
            cams.iter().map(|c| render(&m.template, &m.faces, c, 32, 32)).collect();
        let err = refine_loss(
            &m.template,
            &m.template,
            &vec![false; 3],
            &m.faces,
            &e,
            &ref_maps,
            &views,
            &LossWeights::default(),
        )
        .unwrap_err();
        assert!(matches!(err, LossError::MaskLength { .. }));
    }

    #[test]
    fn p2s_loss_plane_and_surface_cases() {
        let verts =
            vec![Vec3::new(-50.0, -50.0, 0.0), Vec3::new(50.0, -50.0, 0.0), Vec3::new(0.0, 60.0, 0.0)];
        let faces = vec![[0u32, 1, 2]];
        let (val, _) = point_to_surface_loss(&[Vec3::new(0.0, 0.0, 3.0)], &verts, &faces).unwrap();
        assert_relative_eq!(val, 9.0, epsilon = 1e-12);

        let on_surface = vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(10.0, -20.0, 0.0)];
        let (val, _) = point_to_surface_loss(&on_surface, &verts, &faces).unwrap();
        assert!(val < 1e-18);
    }

    #[test]
    fn p2s_gradient_matches_finite_differences_with_stable_assignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let m = make_toy_model(39, 42, 2, 2, 1);
        let points: Vec<Vec3> = (0..40)
            .map(|_| {
                let d = rand_vec(&mut rng, 1.0).normalize();
                d * 120.0
            })
            .collect();
        let (_, grad) = point_to_surface_loss(&points, &m.template, &m.faces).unwrap();
        let base_hits = metrics::closest_hits(&points, &m.template, &m.faces).unwrap();

        let h = 1e-4;
        let mut checked = 0;
        for v in (0..m.n_vertices()).step_by(5) {
            for axis in 0..3 {
                let mut plus = m.template.clone();
                plus[v][axis] += h;
                let mut minus = m.template.clone();
                minus[v][axis] -= h;
                let hp = metrics::closest_hits(&points, &plus, &m.faces).unwrap();
                let hm = metrics::closest_hits(&points, &minus, &m.faces).unwrap();
                // Skip coordinates where any assignment changed.
                if hp.iter().zip(&hm).zip(&base_hits).any(|((a, b), c)| {
                    a.face != c.face || b.face != c.face
                }) {
                    continue;
                }
                let fp = point_to_surface_loss(&points, &plus, &m.faces).unwrap().0;
                let fm = point_to_surface_loss(&points, &minus, &m.faces).unwrap().0;
                let fd = (fp - fm) / (2.0 * h);
                let an = grad[v][axis];
                let denom = fd.abs().max(an.abs()).max(1e-9);
                assert!((fd - an).abs() / denom < 1e-4, "fd {fd} vs analytic {an}");
                checked += 1;
            }
        }
        assert!(checked > 10);
    }

    #[test]
    fn chamfer_loss_pinned_and_oracle() {
        let a = vec![Vec3::zeros()];
        let b = vec![Vec3::new(3.0, 4.0, 0.0)];
        let (val, _, _) = chamfer_loss(&a, &b).unwrap();
        assert_eq!(val, 25.0);

        let (zero, _, _) = chamfer_loss(&a, &a).unwrap();
        assert_eq!(zero, 0.0);

        // Exhaustive O(N²) oracle.
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let pa: Vec<Vec3> = (0..60).map(|_| rand_vec(&mut rng, 20.0)).collect();
        let pb: Vec<Vec3> = (0..45).map(|_| rand_vec(&mut rng, 20.0)).collect();
        let (val, _, _) = chamfer_loss(&pa, &pb).unwrap();
        let dir = |xs: &[Vec3], ys: &[Vec3]| -> f64 {
            xs.iter()
                .map(|x| ys.iter().map(|y| (x - y).norm_squared()).fold(f64::INFINITY, f64::min))
                .sum::<f64>()
                / xs.len() as f64
        };
        let expected = 0.5 * (dir(&pa, &pb) + dir(&pb, &pa));
        assert_eq!(val, expected);
    }

    #[test]
    fn chamfer_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let pa: Vec<Vec3> = (0..20).map(|_| rand_vec(&mut rng, 15.0)).collect();
        let pb: Vec<Vec3> = (0..25).map(|_| rand_vec(&mut rng, 15.0)).collect();
        let (_, grad_a, _) = chamfer_loss(&pa, &pb).unwrap();
        let h = 1e-6;
        for i in (0..pa.len()).step_by(3) {
            for axis in 0..3 {
                let mut plus = pa.clone();
                plus[i][axis] += h;
                let mut minus = pa.clone();
                minus[i][axis] -= h;
                let fd = (chamfer_loss(&plus, &pb).unwrap().0 - chamfer_loss(&minus, &pb).unwrap().0)
                    / (2.0 * h);
                let an = grad_a[i][axis];
                let denom = fd.abs().max(an.abs()).max(1e-9);
                assert!((fd - an).abs() / denom < 1e-5, "fd {fd} vs analytic {an}");
            }
        }
    }

    #[test]
    fn empty_point_sets_are_errors() {
        assert!(matches!(chamfer_loss(&[], &[Vec3::zeros()]), Err(LossError::EmptyPoints)));
        assert!(matches!(
            point_to_surface_loss(&[], &[Vec3::zeros()], &[]),
            Err(LossError::EmptyPoints)
        ));
    }
}
