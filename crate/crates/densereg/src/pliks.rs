//! Pseudo-linear inverse-kinematic recovery of model parameters from
//! free-form vertex predictions, plus the topology-enforcing re-forward.
//!
//! Per-segment rotations come from one Procrustes alignment of dominant
//! vertices (no iterative refinement); shape, expression and translation
//! then solve a single linear least-squares system in which every vertex
//! row is pre-rotated by its segment's rotation. The re-forward applies
//! the same piecewise-rigid map, so the solve residual is exactly the
//! re-forward error. Rotations are treated as constants for gradients;
//! the solve itself is linear in the prediction, and [`PliksResult::backward`]
//! pulls loss gradients on the re-forwarded vertices and recovered
//! parameters back to the prediction through that linear map.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::container::{Array, Container};
use crate::model::ParametricModel;
use crate::{Mat3, Vec3};

pub const PLIKS_MAGIC: &str = "DREG-PLIKS";

#[derive(Debug, Error)]
pub enum PliksError {
    #[error(
        "normal equations are singular with zero ridge (column {column}); \
         set lambda_beta/lambda_psi > 0 or provide richer bases"
    )]
    Singular { column: usize },
    #[error("prediction has {got} vertices, model has {expected}")]
    VertexCount { expected: usize, got: usize },
    #[error("non-finite prediction at vertex {0}")]
    NonFinite(usize),
}

pub type Result<T> = std::result::Result<T, PliksError>;

/// Ridge strengths for the linear solve. Zero switches to a plain QR
/// least-squares path (no squaring of the condition number).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PliksLambdas {
    pub beta: f64,
    pub psi: f64,
}

impl Default for PliksLambdas {
    fn default() -> Self {
        PliksLambdas { beta: 1e-3, psi: 1e-3 }
    }
}

/// Output of the full inverse pass.
#[derive(Debug, Clone, PartialEq)]
pub struct PliksResult {
    /// Per-segment world rotations {R_s}.
    pub rotations: Vec<Mat3>,
    pub beta: DVector<f64>,
    pub psi: DVector<f64>,
    pub trans: Vec3,
    /// Re-forwarded topology-respecting vertices.
    pub v_fl: Vec<Vec3>,
    /// RMS of ‖v_fl − pred‖ over vertices (mm).
    pub residual: f64,
    /// Dominant segment per vertex.
    pub assignment: Vec<u32>,
    /// Segments that inherited their parent's rotation.
    pub fallback_segments: Vec<u32>,
    backward: SolveBackward,
}

/// Captured factorization for pulling gradients back through the solve.
#[derive(Debug, Clone, PartialEq)]
struct SolveBackward {
    /// Unaugmented system matrix, `3 n_v × d`.
    a: DMatrix<f64>,
    /// Upper-triangular factor with `RᵀR = AᵀA + Λ`.
    r: DMatrix<f64>,
}

impl SolveBackward {
    /// `(AᵀA + Λ)⁻¹ g` via two triangular solves.
    fn solve_normal(&self, g: &DVector<f64>) -> DVector<f64> {
        let y = self
            .r
            .transpose()
            .solve_lower_triangular(g)
            .expect("factor validated at solve time");
        self.r.solve_upper_triangular(&y).expect("factor validated at solve time")
    }
}

/// Per-vertex argmax over skinning weights; ties resolve to the lowest
/// segment index.
pub fn dominant_segments(model: &ParametricModel) -> Vec<u32> {
    (0..model.n_vertices())
        .map(|v| {
            let row = model.skin_weights.row(v);
            let mut best = (0usize, f64::NEG_INFINITY);
            for (s, &w) in row.iter().enumerate() {
                if w > best.1 {
                    best = (s, w);
                }
            }
            best.0 as u32
        })
        .collect()
}

/// Optimal rotation of centered template points onto centered predictions,
/// one segment at a time. Segments with fewer than 3 vertices or a
/// rank-deficient covariance inherit the parent rotation (root: identity);
/// those segment ids are returned alongside.
pub fn segment_procrustes(
    template: &[Vec3],
    pred: &[Vec3],
    assignment: &[u32],
    parents: &[u32],
) -> (Vec<Mat3>, Vec<u32>) {
    let s_count = parents.len();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); s_count];
    for (v, &s) in assignment.iter().enumerate() {
        members[s as usize].push(v);
    }

    let mut rotations = vec![Mat3::identity(); s_count];
    let mut fallbacks = Vec::new();
    for s in 0..s_count {
        let vs = &members[s];
        let parent_rot = if parents[s] as usize == s {
            Mat3::identity()
        } else {
            rotations[parents[s] as usize]
        };
        match procrustes_rotation(template, pred, vs) {
            Some(r) => rotations[s] = r,
            None => {
                rotations[s] = parent_rot;
                fallbacks.push(s as u32);
            }
        }
    }
    (rotations, fallbacks)
}

/// Kabsch rotation for one vertex subset; `None` when the problem is
/// degenerate.
fn procrustes_rotation(template: &[Vec3], pred: &[Vec3], vs: &[usize]) -> Option<Mat3> {
    if vs.len() < 3 {
        return None;
    }
    let n = vs.len() as f64;
    let mut tc = Vec3::zeros();
    let mut pc = Vec3::zeros();
    for &v in vs {
        tc += template[v];
        pc += pred[v];
    }
    tc /= n;
    pc /= n;

    // H = Σ (template − t̄)(pred − p̄)ᵀ; the optimum of min Σ‖R a − b‖² is
    // R = V diag(1,1,det(VUᵀ)) Uᵀ for svd(H) = U Σ Vᵀ.
    let mut h = Mat3::zeros();
    for &v in vs {
        let a = template[v] - tc;
        let b = pred[v] - pc;
        h += a * b.transpose();
    }
    let svd = h.svd(true, true);
    let sv = &svd.singular_values;
    if !(sv[0].is_finite()) || sv[1] <= 1e-12 * sv[0].max(1.0) {
        return None; // rank < 2: rotation not unique
    }
    let u = svd.u?;
    let v_t = svd.v_t?;
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant();
    let correction = Mat3::from_diagonal(&Vec3::new(1.0, 1.0, if d < 0.0 { -1.0 } else { 1.0 }));
    Some(v * correction * u.transpose())
}

/// Parameters recovered by the linear solve.
#[derive(Debug, Clone)]
pub struct Solved {
    pub beta: DVector<f64>,
    pub psi: DVector<f64>,
    pub trans: Vec3,
    backward: SolveBackward,
}

/// Solves `R_s (V̄ + B_id β + B_exp ψ) + t ≈ pred` for `[β, ψ, t]`, ridge
/// penalties on the β and ψ blocks only. A QR factorization of the
/// (ridge-augmented) system avoids forming normal equations.
pub fn solve(
    pred: &[Vec3],
    model: &ParametricModel,
    rotations: &[Mat3],
    assignment: &[u32],
    lambdas: PliksLambdas,
) -> Result<Solved> {
    let n_v = model.n_vertices();
    if pred.len() != n_v {
        return Err(PliksError::VertexCount { expected: n_v, got: pred.len() });
    }
    if let Some(v) = pred.iter().position(|p| !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite())) {
        return Err(PliksError::NonFinite(v));
    }
    let nb = model.n_beta();
    let np = model.n_psi();
    let d = nb + np + 3;

    let mut a = DMatrix::zeros(3 * n_v, d);
    let mut b = DVector::zeros(3 * n_v);
    let put = |a: &mut DMatrix<f64>, v: usize, col: usize, value: Vec3| {
        a[(3 * v, col)] = value.x;
        a[(3 * v + 1, col)] = value.y;
        a[(3 * v + 2, col)] = value.z;
    };
    for v in 0..n_v {
        let r = &rotations[assignment[v] as usize];
        for c in 0..nb {
            let col = Vec3::new(
                model.basis_id[(3 * v, c)],
                model.basis_id[(3 * v + 1, c)],
                model.basis_id[(3 * v + 2, c)],
            );
            put(&mut a, v, c, r * col);
        }
        for c in 0..np {
            let col = Vec3::new(
                model.basis_exp[(3 * v, c)],
                model.basis_exp[(3 * v + 1, c)],
                model.basis_exp[(3 * v + 2, c)],
            );
            put(&mut a, v, nb + c, r * col);
        }
        for axis in 0..3 {
            a[(3 * v + axis, nb + np + axis)] = 1.0;
        }
        let rhs = pred[v] - r * model.template[v];
        b[3 * v] = rhs.x;
        b[3 * v + 1] = rhs.y;
        b[3 * v + 2] = rhs.z;
    }

    // Ridge rows: sqrt(λ) on the β/ψ diagonal, zero right-hand side.
    let n_ridge_rows = (lambdas.beta > 0.0) as usize * nb + (lambdas.psi > 0.0) as usize * np;
    let mut aug = DMatrix::zeros(3 * n_v + n_ridge_rows, d);
    aug.view_mut((0, 0), (3 * n_v, d)).copy_from(&a);
    let mut row = 3 * n_v;
    if lambdas.beta > 0.0 {
        for c in 0..nb {
            aug[(row, c)] = lambdas.beta.sqrt();
            row += 1;
        }
    }
    if lambdas.psi > 0.0 {
        for c in 0..np {
            aug[(row, nb + c)] = lambdas.psi.sqrt();
            row += 1;
        }
    }
    let mut b_aug = DVector::zeros(aug.nrows());
    b_aug.rows_mut(0, 3 * n_v).copy_from(&b);

    let qr = aug.qr();
    let r_factor = qr.r();
    let diag_max = (0..d).map(|i| r_factor[(i, i)].abs()).fold(0.0f64, f64::max);
    for i in 0..d {
        if r_factor[(i, i)].abs() <= 1e-12 * diag_max.max(1.0) {
            return Err(PliksError::Singular { column: i });
        }
    }
    let qtb = qr.q().transpose() * &b_aug;
    let x = r_factor
        .solve_upper_triangular(&qtb.rows(0, d).clone_owned())
        .ok_or(PliksError::Singular { column: 0 })?;

    Ok(Solved {
        beta: x.rows(0, nb).clone_owned(),
        psi: x.rows(nb, np).clone_owned(),
        trans: Vec3::new(x[nb + np], x[nb + np + 1], x[nb + np + 2]),
        backward: SolveBackward { a, r: r_factor },
    })
}

/// Piecewise-rigid re-forward: `v = R_{s(v)} (V̄_v + B_id β + B_exp ψ) + t`.
/// Matches the solve model exactly (no blended weights, no pose
/// correctives), so the residual of [`solve`] is the re-forward error.
pub fn reforward(
    model: &ParametricModel,
    rotations: &[Mat3],
    assignment: &[u32],
    beta: &DVector<f64>,
    psi: &DVector<f64>,
    trans: &Vec3,
) -> Vec<Vec3> {
    let rest = model.rest_shape(beta, psi).expect("solver dimensions match the model");
    rest.iter()
        .enumerate()
        .map(|(v, p)| rotations[assignment[v] as usize] * p + trans)
        .collect()
}

/// Full inverse pass: dominant segments, Procrustes rotations, linear
/// solve, re-forward.
pub fn run(pred: &[Vec3], model: &ParametricModel, lambdas: PliksLambdas) -> Result<PliksResult> {
    let assignment = dominant_segments(model);
    let (rotations, fallback_segments) =
        segment_procrustes(&model.template, pred, &assignment, &model.segment_parents);
    run_with_rotations(pred, model, rotations, assignment, fallback_segments, lambdas)
}

/// Inverse pass with externally fixed rotations and assignment; used by
/// gradient checks that freeze the non-differentiable pieces.
pub fn run_with_rotations(
    pred: &[Vec3],
    model: &ParametricModel,
    rotations: Vec<Mat3>,
    assignment: Vec<u32>,
    fallback_segments: Vec<u32>,
    lambdas: PliksLambdas,
) -> Result<PliksResult> {
    let solved = solve(pred, model, &rotations, &assignment, lambdas)?;
    let v_fl = reforward(model, &rotations, &assignment, &solved.beta, &solved.psi, &solved.trans);
    let ss: f64 = v_fl.iter().zip(pred).map(|(a, b)| (a - b).norm_squared()).sum();
    let residual = (ss / pred.len() as f64).sqrt();
    Ok(PliksResult {
        rotations,
        beta: solved.beta,
        psi: solved.psi,
        trans: solved.trans,
        v_fl,
        residual,
        assignment,
        fallback_segments,
        backward: solved.backward,
    })
}

impl PliksResult {
    /// Pulls gradients on `v_fl` and on the recovered parameters back to
    /// the prediction, with rotations and assignment frozen:
    /// `g_pred = A (AᵀA + Λ)⁻¹ (Aᵀ g_vfl + g_params)`.
    pub fn backward(
        &self,
        g_vfl: &[Vec3],
        g_beta: &DVector<f64>,
        g_psi: &DVector<f64>,
        g_trans: &Vec3,
    ) -> Vec<Vec3> {
        let a = &self.backward.a;
        let n_v = a.nrows() / 3;
        assert_eq!(g_vfl.len(), n_v, "gradient length mismatch");
        let nb = self.beta.len();
        let np = self.psi.len();

        let mut g_flat = DVector::zeros(3 * n_v);
        for (v, g) in g_vfl.iter().enumerate() {
            g_flat[3 * v] = g.x;
            g_flat[3 * v + 1] = g.y;
            g_flat[3 * v + 2] = g.z;
        }
        let mut g_x = a.transpose() * g_flat;
        for i in 0..nb {
            g_x[i] += g_beta[i];
        }
        for i in 0..np {
            g_x[nb + i] += g_psi[i];
        }
        g_x[nb + np] += g_trans.x;
        g_x[nb + np + 1] += g_trans.y;
        g_x[nb + np + 2] += g_trans.z;

        let y = self.backward.solve_normal(&g_x);
        let g_pred_flat = a * y;
        (0..n_v)
            .map(|v| Vec3::new(g_pred_flat[3 * v], g_pred_flat[3 * v + 1], g_pred_flat[3 * v + 2]))
            .collect()
    }

    /// Serializes to the container blob format (`densereg fit --dump-pliks`).
    pub fn to_container(&self) -> Container {
        let mut c = Container::new(PLIKS_MAGIC);
        let s = self.rotations.len();
        let n_v = self.v_fl.len();
        c.set_dim("n_segments", s as i64);
        c.set_dim("n_vertices", n_v as i64);
        c.set_dim("n_beta", self.beta.len() as i64);
        c.set_dim("n_psi", self.psi.len() as i64);

        let mut rot = Vec::with_capacity(9 * s);
        for r in &self.rotations {
            for row in 0..3 {
                for col in 0..3 {
                    rot.push(r[(row, col)]);
                }
            }
        }
        c.insert("rotations", Array::f64(vec![s, 3, 3], rot));
        c.insert("beta", Array::f64(vec![self.beta.len()], self.beta.iter().copied().collect()));
        c.insert("psi", Array::f64(vec![self.psi.len()], self.psi.iter().copied().collect()));
        c.insert("trans", Array::f64(vec![3], vec![self.trans.x, self.trans.y, self.trans.z]));
        c.insert(
            "v_fl",
            Array::f64(vec![n_v, 3], self.v_fl.iter().flat_map(|p| [p.x, p.y, p.z]).collect()),
        );
        c.insert("residual", Array::f64(vec![1], vec![self.residual]));
        c.insert(
            "assignment",
            Array::i32(vec![n_v], self.assignment.iter().map(|&a| a as i32).collect()),
        );
        c
    }
}
