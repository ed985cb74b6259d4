//! Parametric linear-blend-skinned head model: forward evaluation, topology
//! queries, model container I/O and a deterministic toy-model generator
//! used as the ground-truth oracle in tests and synthetic scenes.
//!
//! All lengths are millimeters.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector, Rotation3};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::container::{Array, Container, ContainerError};
use crate::{Mat3, Vec3};

pub const MODEL_MAGIC: &str = "DREG-MODEL";

/// Faces with area under this (mm²) are degenerate: zero normal, skipped by
/// the rasterizer.
pub const DEGENERATE_AREA_MM2: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch in {basis}: expected {expected}, got {got}")]
    DimensionMismatch { basis: &'static str, expected: usize, got: usize },
    #[error("invariant violation: {0}")]
    Invariant(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error(transparent)]
    Container(#[from] ContainerError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// A triangle mesh in the model's shared canonical topology.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[u32; 3]>,
}

/// Pose/shape coefficients driving [`ParametricModel::forward`].
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub beta: DVector<f64>,
    pub psi: DVector<f64>,
    /// Per-segment axis-angle rotations (radians), length = segment count.
    pub theta: Vec<Vec3>,
    /// Global translation, applied last (mm).
    pub trans: Vec3,
}

impl Params {
    pub fn zeros(model: &ParametricModel) -> Params {
        Params {
            beta: DVector::zeros(model.n_beta()),
            psi: DVector::zeros(model.n_psi()),
            theta: vec![Vec3::zeros(); model.n_segments()],
            trans: Vec3::zeros(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.beta.iter().all(|v| v.is_finite())
            && self.psi.iter().all(|v| v.is_finite())
            && self.theta.iter().all(|t| t.iter().all(|v| v.is_finite()))
            && self.trans.iter().all(|v| v.is_finite())
    }
}

/// Linear-blend-skinned parametric model. Basis matrices are stored as
/// `(3 n_v) × n_coeff` with row `3 v + axis`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParametricModel {
    pub template: Vec<Vec3>,
    pub faces: Vec<[u32; 3]>,
    pub basis_id: DMatrix<f64>,
    pub basis_exp: DMatrix<f64>,
    /// Pose-corrective basis; its input is vec(R_s − I) concatenated over
    /// non-root segments, so its column count is 9 (S − 1) or zero.
    pub basis_pose: DMatrix<f64>,
    /// `S × n_v`, rows sum to one; joints = regressor · rest shape.
    pub joint_regressor: DMatrix<f64>,
    /// `n_v × S`, row-stochastic skinning weights.
    pub skin_weights: DMatrix<f64>,
    /// `parents[s]` is the parent segment; the single root has
    /// `parents[s] == s`. Parents precede children.
    pub segment_parents: Vec<u32>,
}

impl ParametricModel {
    pub fn n_vertices(&self) -> usize {
        self.template.len()
    }

    pub fn n_faces(&self) -> usize {
        self.faces.len()
    }

    pub fn n_beta(&self) -> usize {
        self.basis_id.ncols()
    }

    pub fn n_psi(&self) -> usize {
        self.basis_exp.ncols()
    }

    pub fn n_pose(&self) -> usize {
        self.basis_pose.ncols()
    }

    pub fn n_segments(&self) -> usize {
        self.segment_parents.len()
    }

    /// Checks every structural invariant; called on load and after
    /// generation.
    pub fn validate(&self) -> Result<()> {
        let n_v = self.n_vertices();
        let s = self.n_segments();
        for (name, m) in [
            ("basis_id", &self.basis_id),
            ("basis_exp", &self.basis_exp),
            ("basis_pose", &self.basis_pose),
        ] {
            if m.nrows() != 3 * n_v {
                return Err(ModelError::DimensionMismatch { basis: name, expected: 3 * n_v, got: m.nrows() });
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(ModelError::NonFinite(name));
            }
        }
        if self.n_pose() != 0 && self.n_pose() != 9 * (s.saturating_sub(1)) {
            return Err(ModelError::Invariant(format!(
                "basis_pose has {} columns, expected 0 or {}",
                self.n_pose(),
                9 * s.saturating_sub(1)
            )));
        }
        if self.joint_regressor.shape() != (s, n_v) {
            return Err(ModelError::Invariant(format!(
                "joint_regressor shape {:?}, expected ({s}, {n_v})",
                self.joint_regressor.shape()
            )));
        }
        if self.skin_weights.shape() != (n_v, s) {
            return Err(ModelError::Invariant(format!(
                "skin_weights shape {:?}, expected ({n_v}, {s})",
                self.skin_weights.shape()
            )));
        }
        for v in 0..n_v {
            let row = self.skin_weights.row(v);
            if row.iter().any(|&w| w < 0.0) {
                return Err(ModelError::Invariant(format!("skin_weights row {v} has a negative entry")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(ModelError::Invariant(format!(
                    "skin_weights row {v} sums to {sum}, expected 1 within 1e-6"
                )));
            }
        }
        // Faces reference valid vertices; each undirected edge in <= 2 faces.
        let mut edge_count: BTreeMap<(u32, u32), u32> = BTreeMap::new();
        for (fi, f) in self.faces.iter().enumerate() {
            for &i in f {
                if i as usize >= n_v {
                    return Err(ModelError::Invariant(format!(
                        "face {fi} references vertex {i} (n_v = {n_v})"
                    )));
                }
            }
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                let key = (a.min(b), a.max(b));
                let c = edge_count.entry(key).or_insert(0);
                *c += 1;
                if *c > 2 {
                    return Err(ModelError::Invariant(format!("edge {key:?} shared by more than 2 faces")));
                }
            }
        }
        // Segment tree: single root, acyclic, parents precede children.
        let roots = self.segment_parents.iter().enumerate().filter(|(i, &p)| p as usize == *i).count();
        if roots != 1 {
            return Err(ModelError::Invariant(format!("segment tree has {roots} roots, expected 1")));
        }
        for (i, &p) in self.segment_parents.iter().enumerate() {
            if p as usize >= s {
                return Err(ModelError::Invariant(format!("segment {i} has out-of-range parent {p}")));
            }
            if p as usize > i {
                return Err(ModelError::Invariant(format!(
                    "segment {i} precedes its parent {p}; parents must come first"
                )));
            }
        }
        if self.template.iter().any(|v| !v.x.is_finite() || !v.y.is_finite() || !v.z.is_finite()) {
            return Err(ModelError::NonFinite("template"));
        }
        Ok(())
    }

    /// `template + B_id β + B_exp ψ`; pose correctives are added inside
    /// [`ParametricModel::forward`].
    pub fn rest_shape(&self, beta: &DVector<f64>, psi: &DVector<f64>) -> Result<Vec<Vec3>> {
        if beta.len() != self.n_beta() {
            return Err(ModelError::DimensionMismatch {
                basis: "basis_id",
                expected: self.n_beta(),
                got: beta.len(),
            });
        }
        if psi.len() != self.n_psi() {
            return Err(ModelError::DimensionMismatch {
                basis: "basis_exp",
                expected: self.n_psi(),
                got: psi.len(),
            });
        }
        let mut flat = DVector::zeros(3 * self.n_vertices());
        flat.gemv(1.0, &self.basis_id, beta, 0.0);
        flat.gemv(1.0, &self.basis_exp, psi, 1.0);
        Ok(self
            .template
            .iter()
            .enumerate()
            .map(|(v, t)| t + Vec3::new(flat[3 * v], flat[3 * v + 1], flat[3 * v + 2]))
            .collect())
    }

    /// Rest-shape joint locations, `joint_regressor · rest`.
    pub fn joints(&self, rest: &[Vec3]) -> Vec<Vec3> {
        (0..self.n_segments())
            .map(|j| {
                let mut acc = Vec3::zeros();
                for (v, &w) in self.joint_regressor.row(j).iter().enumerate() {
                    if w != 0.0 {
                        acc += rest[v] * w;
                    }
                }
                acc
            })
            .collect()
    }

    /// World transform per segment, composed along the tree, in
    /// displacement form: segment `s` maps a rest position `p` to
    /// `p + (R̂_s − I)(p − j_s) + d_s` where `d_s` is the displacement of
    /// joint `s`. Zero pose gives exactly zero displacement.
    pub fn segment_transforms(&self, rotations: &[Mat3], joints: &[Vec3]) -> Vec<(Mat3, Vec3)> {
        let s = self.n_segments();
        let mut world: Vec<(Mat3, Vec3)> = Vec::with_capacity(s);
        for i in 0..s {
            let parent = self.segment_parents[i] as usize;
            if parent == i {
                world.push((rotations[i], Vec3::zeros()));
            } else {
                let (pr, pd) = world[parent];
                let offset = joints[i] - joints[parent];
                world.push((pr * rotations[i], (pr - Mat3::identity()) * offset + pd));
            }
        }
        world
    }

    /// Applies the skinning blend in displacement form.
    fn blend(
        &self,
        v: usize,
        p: Vec3,
        transforms: &[(Mat3, Vec3)],
        joints: &[Vec3],
    ) -> Vec3 {
        let mut acc = p;
        for (s, &(r, d)) in transforms.iter().enumerate() {
            let w = self.skin_weights[(v, s)];
            if w != 0.0 {
                acc += ((r - Mat3::identity()) * (p - joints[s]) + d) * w;
            }
        }
        acc
    }

    /// Full LBS forward pass: shape/expression offsets, pose correctives,
    /// articulated skinning, then global translation.
    pub fn forward(&self, params: &Params) -> Result<Mesh> {
        if !params.is_finite() {
            return Err(ModelError::NonFinite("params"));
        }
        if params.theta.len() != self.n_segments() {
            return Err(ModelError::DimensionMismatch {
                basis: "theta",
                expected: self.n_segments(),
                got: params.theta.len(),
            });
        }
        let rest = self.rest_shape(&params.beta, &params.psi)?;
        let joints = self.joints(&rest);
        let rotations: Vec<Mat3> =
            params.theta.iter().map(|t| Rotation3::new(*t).into_inner()).collect();

        let mut posed = rest;
        if self.n_pose() > 0 {
            let mut pose_vec = DVector::zeros(self.n_pose());
            let mut k = 0;
            for (s, r) in rotations.iter().enumerate() {
                if self.segment_parents[s] as usize == s {
                    continue; // root excluded by convention
                }
                let d = r - Mat3::identity();
                for row in 0..3 {
                    for col in 0..3 {
                        pose_vec[k] = d[(row, col)];
                        k += 1;
                    }
                }
            }
            let offsets = &self.basis_pose * pose_vec;
            for (v, p) in posed.iter_mut().enumerate() {
                *p += Vec3::new(offsets[3 * v], offsets[3 * v + 1], offsets[3 * v + 2]);
            }
        }

        let transforms = self.segment_transforms(&rotations, &joints);
        let out = posed
            .iter()
            .enumerate()
            .map(|(v, &p)| self.blend(v, p, &transforms, &joints) + params.trans)
            .collect();
        Ok(Mesh { vertices: out, faces: self.faces.clone() })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(self.to_container().write_file(path)?)
    }

    pub fn load(path: &Path) -> Result<ParametricModel> {
        Self::from_container(&Container::read_file(path, Some(MODEL_MAGIC))?)
    }

    /// Serializes with float32 array blobs; generated models are quantized
    /// to f32 at construction so the round trip is exact.
    pub fn to_container(&self) -> Container {
        let n_v = self.n_vertices();
        let s = self.n_segments();
        let mut c = Container::new(MODEL_MAGIC);
        c.set_dim("n_vertices", n_v as i64);
        c.set_dim("n_faces", self.n_faces() as i64);
        c.set_dim("n_beta", self.n_beta() as i64);
        c.set_dim("n_psi", self.n_psi() as i64);
        c.set_dim("n_pose", self.n_pose() as i64);
        c.set_dim("n_segments", s as i64);

        c.insert("template", Array::f32(vec![n_v, 3], flatten_points_f32(&self.template)));
        c.insert(
            "faces",
            Array::i32(vec![self.n_faces(), 3], self.faces.iter().flatten().map(|&i| i as i32).collect()),
        );
        c.insert("basis_id", basis_to_array(&self.basis_id, n_v));
        c.insert("basis_exp", basis_to_array(&self.basis_exp, n_v));
        c.insert("basis_pose", basis_to_array(&self.basis_pose, n_v));
        c.insert("joint_regressor", Array::f32(vec![s, n_v], row_major_f32(&self.joint_regressor)));
        c.insert("skin_weights", Array::f32(vec![n_v, s], row_major_f32(&self.skin_weights)));
        c.insert(
            "segment_parents",
            Array::i32(vec![s], self.segment_parents.iter().map(|&p| p as i32).collect()),
        );
        c
    }

    pub fn from_container(c: &Container) -> Result<ParametricModel> {
        let n_v = c.dim("n_vertices")? as usize;
        let n_f = c.dim("n_faces")? as usize;
        let n_beta = c.dim("n_beta")? as usize;
        let n_psi = c.dim("n_psi")? as usize;
        let n_pose = c.dim("n_pose")? as usize;
        let s = c.dim("n_segments")? as usize;

        let template = points_from_container(c, "template", n_v)?;
        let (fshape, fdata) = c.i32s("faces")?;
        expect_shape("faces", &fshape, &[n_f, 3])?;
        let faces: Vec<[u32; 3]> = fdata
            .chunks_exact(3)
            .map(|f| {
                if f.iter().any(|&i| i < 0) {
                    Err(ModelError::Invariant(format!("negative face index in {f:?}")))
                } else {
                    Ok([f[0] as u32, f[1] as u32, f[2] as u32])
                }
            })
            .collect::<Result<_>>()?;

        let (pshape, pdata) = c.i32s("segment_parents")?;
        expect_shape("segment_parents", &pshape, &[s])?;
        let segment_parents = pdata
            .iter()
            .map(|&p| {
                if p < 0 {
                    Err(ModelError::Invariant(format!("negative segment parent {p}")))
                } else {
                    Ok(p as u32)
                }
            })
            .collect::<Result<_>>()?;

        let model = ParametricModel {
            template,
            faces,
            basis_id: basis_from_container(c, "basis_id", n_v, n_beta)?,
            basis_exp: basis_from_container(c, "basis_exp", n_v, n_psi)?,
            basis_pose: basis_from_container(c, "basis_pose", n_v, n_pose)?,
            joint_regressor: matrix_from_container(c, "joint_regressor", s, n_v)?,
            skin_weights: matrix_from_container(c, "skin_weights", n_v, s)?,
            segment_parents,
        };
        model.validate()?;
        Ok(model)
    }
}

fn expect_shape(name: &str, got: &[usize], want: &[usize]) -> Result<()> {
    if got != want {
        return Err(ModelError::Invariant(format!("array {name} has shape {got:?}, expected {want:?}")));
    }
    Ok(())
}

fn flatten_points_f32(points: &[Vec3]) -> Vec<f32> {
    points.iter().flat_map(|p| [p.x as f32, p.y as f32, p.z as f32]).collect()
}

fn row_major_f32(m: &DMatrix<f64>) -> Vec<f32> {
    let mut out = Vec::with_capacity(m.nrows() * m.ncols());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            out.push(m[(r, c)] as f32);
        }
    }
    out
}

fn basis_to_array(m: &DMatrix<f64>, n_v: usize) -> Array {
    // File layout [n_v, 3, n_coeff] row-major; memory layout (3 n_v) × n_coeff.
    let n_c = m.ncols();
    let mut out = Vec::with_capacity(3 * n_v * n_c);
    for row in 0..3 * n_v {
        for col in 0..n_c {
            out.push(m[(row, col)] as f32);
        }
    }
    Array::f32(vec![n_v, 3, n_c], out)
}

fn basis_from_container(c: &Container, name: &str, n_v: usize, n_c: usize) -> Result<DMatrix<f64>> {
    let (shape, data) = c.f64s(name)?;
    expect_shape(name, &shape, &[n_v, 3, n_c])?;
    let mut m = DMatrix::zeros(3 * n_v, n_c);
    for row in 0..3 * n_v {
        for col in 0..n_c {
            m[(row, col)] = data[row * n_c + col];
        }
    }
    Ok(m)
}

fn matrix_from_container(c: &Container, name: &str, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
    let (shape, data) = c.f64s(name)?;
    expect_shape(name, &shape, &[rows, cols])?;
    Ok(DMatrix::from_row_slice(rows, cols, &data))
}

fn points_from_container(c: &Container, name: &str, n: usize) -> Result<Vec<Vec3>> {
    let (shape, data) = c.f64s(name)?;
    expect_shape(name, &shape, &[n, 3])?;
    Ok(data.chunks_exact(3).map(|p| Vec3::new(p[0], p[1], p[2])).collect())
}

// ---------------------------------------------------------------------------
// Topology

/// Unique undirected edges, sorted ascending. For a closed genus-0 mesh the
/// count is `n_v + n_f − 2`.
pub fn edges(faces: &[[u32; 3]]) -> Vec<(u32, u32)> {
    let mut out: Vec<(u32, u32)> = Vec::with_capacity(faces.len() * 3);
    for f in faces {
        for k in 0..3 {
            let (a, b) = (f[k], f[(k + 1) % 3]);
            out.push((a.min(b), a.max(b)));
        }
    }
    out.sort_unstable();
    out.dedup();
    out
}

/// Face and area-weighted vertex normals.
#[derive(Debug, Clone)]
pub struct Normals {
    /// Unit normals following counter-clockwise winding; zero for
    /// degenerate faces.
    pub face: Vec<Vec3>,
    /// Unit area-weighted vertex normals; zero where undefined.
    pub vertex: Vec<Vec3>,
    /// Indices of faces with area below [`DEGENERATE_AREA_MM2`].
    pub degenerate: Vec<usize>,
}

pub fn normals(vertices: &[Vec3], faces: &[[u32; 3]]) -> Normals {
    let mut face = Vec::with_capacity(faces.len());
    let mut vertex = vec![Vec3::zeros(); vertices.len()];
    let mut degenerate = Vec::new();
    for (fi, f) in faces.iter().enumerate() {
        let (a, b, c) = (vertices[f[0] as usize], vertices[f[1] as usize], vertices[f[2] as usize]);
        let cross = (b - a).cross(&(c - a));
        let norm = cross.norm();
        if norm * 0.5 < DEGENERATE_AREA_MM2 {
            face.push(Vec3::zeros());
            degenerate.push(fi);
            continue;
        }
        face.push(cross / norm);
        // The raw cross product is twice the area-weighted normal.
        for &i in f {
            vertex[i as usize] += cross;
        }
    }
    for v in &mut vertex {
        let n = v.norm();
        *v = if n > 1e-300 { *v / n } else { Vec3::zeros() };
    }
    Normals { face, vertex, degenerate }
}

// ---------------------------------------------------------------------------
// Icosphere

/// Unit icosphere via repeated midpoint subdivision of an icosahedron.
/// Vertex counts per level: 12, 42, 162, 642, 2562, ...
pub fn icosphere(subdivisions: u32) -> (Vec<Vec3>, Vec<[u32; 3]>) {
    let phi = (1.0 + 5.0f64.sqrt()) / 2.0;
    let mut vertices: Vec<Vec3> = [
        (-1.0, phi, 0.0),
        (1.0, phi, 0.0),
        (-1.0, -phi, 0.0),
        (1.0, -phi, 0.0),
        (0.0, -1.0, phi),
        (0.0, 1.0, phi),
        (0.0, -1.0, -phi),
        (0.0, 1.0, -phi),
        (phi, 0.0, -1.0),
        (phi, 0.0, 1.0),
        (-phi, 0.0, -1.0),
        (-phi, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Vec3::new(x, y, z).normalize())
    .collect();
    let mut faces: Vec<[u32; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];

    for _ in 0..subdivisions {
        let mut midpoint: BTreeMap<(u32, u32), u32> = BTreeMap::new();
        let mut next_faces = Vec::with_capacity(faces.len() * 4);
        for f in &faces {
            let mut mid = [0u32; 3];
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                let key = (a.min(b), a.max(b));
                mid[k] = *midpoint.entry(key).or_insert_with(|| {
                    let m = ((vertices[a as usize] + vertices[b as usize]) / 2.0).normalize();
                    vertices.push(m);
                    (vertices.len() - 1) as u32
                });
            }
            next_faces.push([f[0], mid[0], mid[2]]);
            next_faces.push([f[1], mid[1], mid[0]]);
            next_faces.push([f[2], mid[2], mid[1]]);
            next_faces.push([mid[0], mid[1], mid[2]]);
        }
        faces = next_faces;
    }
    (vertices, faces)
}

// ---------------------------------------------------------------------------
// Toy model generator

/// Maximum per-vertex basis displacement per unit coefficient (mm).
pub const TOY_BASIS_MAX_MM: f64 = 5.0;

/// Deterministic icosphere-based head-like model. Picks the smallest
/// icosphere with at least `min_vertices` vertices (so the returned model
/// may hold more vertices than requested), builds smooth random shape and
/// expression bases bounded by [`TOY_BASIS_MAX_MM`], and partitions the
/// head into `n_segments` vertical bands with smoothed skinning weights.
/// The pose-corrective basis is zero. All arrays are quantized to f32 so
/// container round trips are exact.
pub fn make_toy_model(
    seed: u64,
    min_vertices: usize,
    n_beta: usize,
    n_psi: usize,
    n_segments: usize,
) -> ParametricModel {
    assert!(min_vertices >= 12, "toy models need at least 12 vertices");
    assert!(n_segments >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut level = 0;
    while icosphere_vertex_count(level) < min_vertices {
        level += 1;
        assert!(level <= 6, "requested toy model too large");
    }
    let (unit, faces) = icosphere(level);
    let n_v = unit.len();

    // Head-like template: ellipsoid with a nose lobe and a chin lobe.
    let radii = Vec3::new(
        80.0 * (1.0 + 0.05 * sym_unit(&mut rng)),
        105.0 * (1.0 + 0.05 * sym_unit(&mut rng)),
        90.0 * (1.0 + 0.05 * sym_unit(&mut rng)),
    );
    let nose_dir = Vec3::new(0.0, -0.15, 1.0).normalize();
    let chin_dir = Vec3::new(0.0, -0.85, 0.6).normalize();
    let template: Vec<Vec3> = unit
        .iter()
        .map(|n| {
            let base = Vec3::new(n.x * radii.x, n.y * radii.y, n.z * radii.z);
            let nose = 16.0 * lobe(n.dot(&nose_dir), 24.0);
            let chin = 8.0 * lobe(n.dot(&chin_dir), 12.0);
            base + *n * (nose + chin)
        })
        .collect();

    let basis_id = smooth_basis(&mut rng, &unit, n_beta);
    let basis_exp = smooth_basis(&mut rng, &unit, n_psi);
    let basis_pose = DMatrix::zeros(3 * n_v, if n_segments > 1 { 9 * (n_segments - 1) } else { 0 });

    // Vertical quantile bands define the segments.
    let mut ys: Vec<(f64, usize)> = template.iter().map(|p| p.y).zip(0..n_v).collect();
    ys.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut band = vec![0usize; n_v];
    for (rank, &(_, v)) in ys.iter().enumerate() {
        band[v] = (rank * n_segments / n_v).min(n_segments - 1);
    }
    let mut centers = vec![0.0f64; n_segments];
    let mut counts = vec![0usize; n_segments];
    for v in 0..n_v {
        centers[band[v]] += template[v].y;
        counts[band[v]] += 1;
    }
    for (c, &n) in centers.iter_mut().zip(&counts) {
        *c /= n.max(1) as f64;
    }
    let y_span = ys.last().unwrap().0 - ys[0].0;
    let sigma = (y_span / n_segments as f64) * 0.4;

    let mut skin_weights = DMatrix::zeros(n_v, n_segments);
    for v in 0..n_v {
        let mut row = vec![0.0f64; n_segments];
        for (s, &c) in centers.iter().enumerate() {
            let d = (template[v].y - c) / sigma;
            row[s] = (-0.5 * d * d).exp();
        }
        // The vertex's own band must stay dominant after smoothing.
        row[band[v]] += 1e-3;
        let total: f64 = row.iter().sum();
        for (s, w) in row.iter().enumerate() {
            skin_weights[(v, s)] = w / total;
        }
    }

    let mut joint_regressor = DMatrix::zeros(n_segments, n_v);
    for v in 0..n_v {
        joint_regressor[(band[v], v)] = 1.0 / counts[band[v]] as f64;
    }

    let segment_parents: Vec<u32> =
        (0..n_segments).map(|s| if s == 0 { 0 } else { (s - 1) as u32 }).collect();

    let mut model = ParametricModel {
        template,
        faces,
        basis_id,
        basis_exp,
        basis_pose,
        joint_regressor,
        skin_weights,
        segment_parents,
    };
    quantize_model_f32(&mut model);
    model.validate().expect("generated toy model must satisfy invariants");
    model
}

fn icosphere_vertex_count(level: u32) -> usize {
    // 12 vertices, 30 edges, 20 faces at level 0; v' = v + e, e' = 2e + 3f.
    let (mut v, mut e, mut f) = (12usize, 30usize, 20usize);
    for _ in 0..level {
        v += e;
        e = 2 * e + 3 * f;
        f *= 4;
    }
    v
}

fn sym_unit(rng: &mut ChaCha8Rng) -> f64 {
    rng.random::<f64>() * 2.0 - 1.0
}

fn lobe(cos_angle: f64, sharpness: f64) -> f64 {
    (sharpness * (cos_angle - 1.0)).exp()
}

/// Smooth random displacement basis: each column is a sum of low-frequency
/// directional sine fields over the sphere, scaled so the largest
/// per-vertex displacement lies in (0, TOY_BASIS_MAX_MM].
fn smooth_basis(rng: &mut ChaCha8Rng, unit: &[Vec3], n_cols: usize) -> DMatrix<f64> {
    let n_v = unit.len();
    let mut m = DMatrix::zeros(3 * n_v, n_cols);
    for col in 0..n_cols {
        let mut waves = Vec::new();
        for _ in 0..4 {
            let dir = Vec3::new(sym_unit(rng), sym_unit(rng), sym_unit(rng)).normalize();
            let amp = Vec3::new(sym_unit(rng), sym_unit(rng), sym_unit(rng));
            let freq = 1.0 + rng.random::<f64>();
            let phase = rng.random::<f64>() * std::f64::consts::TAU;
            waves.push((dir, amp, freq, phase));
        }
        let field: Vec<Vec3> = unit
            .iter()
            .map(|n| {
                let mut d = Vec3::zeros();
                for &(dir, amp, freq, phase) in &waves {
                    d += amp * (freq * n.dot(&dir) * std::f64::consts::PI + phase).sin();
                }
                d
            })
            .collect();
        let max_norm = field.iter().map(|d| d.norm()).fold(0.0f64, f64::max).max(1e-9);
        let target = TOY_BASIS_MAX_MM * (0.5 + 0.5 * rng.random::<f64>());
        let scale = target / max_norm;
        for (v, d) in field.iter().enumerate() {
            m[(3 * v, col)] = d.x * scale;
            m[(3 * v + 1, col)] = d.y * scale;
            m[(3 * v + 2, col)] = d.z * scale;
        }
    }
    m
}

/// Rounds every float array through f32 (the container dtype) and repairs
/// row sums that must equal one.
fn quantize_model_f32(model: &mut ParametricModel) {
    let q = |x: f64| x as f32 as f64;
    for p in &mut model.template {
        *p = Vec3::new(q(p.x), q(p.y), q(p.z));
    }
    for m in [&mut model.basis_id, &mut model.basis_exp, &mut model.basis_pose] {
        m.iter_mut().for_each(|x| *x = q(*x));
    }
    for m in [&mut model.skin_weights, &mut model.joint_regressor] {
        m.iter_mut().for_each(|x| *x = q(*x));
        for r in 0..m.nrows() {
            let sum: f64 = m.row(r).iter().sum();
            let (imax, _) = m
                .row(r)
                .iter()
                .enumerate()
                .fold((0, f64::MIN), |acc, (i, &w)| if w > acc.1 { (i, w) } else { acc });
            m[(r, imax)] = q(m[(r, imax)] + (1.0 - sum));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn toy() -> ParametricModel {
        make_toy_model(42, 42, 4, 3, 3)
    }

    #[test]
    fn rest_shape_identity_case() {
        let m = toy();
        let rest = m.rest_shape(&DVector::zeros(4), &DVector::zeros(3)).unwrap();
        assert_eq!(rest, m.template);
    }

    #[test]
    fn rest_shape_unit_vector_adds_basis_column() {
        let m = toy();
        let mut beta = DVector::zeros(4);
        beta[0] = 1.0;
        let rest = m.rest_shape(&beta, &DVector::zeros(3)).unwrap();
        for v in 0..m.n_vertices() {
            let expected = m.template[v]
                + Vec3::new(m.basis_id[(3 * v, 0)], m.basis_id[(3 * v + 1, 0)], m.basis_id[(3 * v + 2, 0)]);
            assert_relative_eq!(rest[v], expected, epsilon = 1e-15);
        }
    }

    #[test]
    fn rest_shape_matches_triple_loop_oracle() {
        let m = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let beta = DVector::from_fn(4, |_, _| sym_unit(&mut rng) * 2.0);
        let psi = DVector::from_fn(3, |_, _| sym_unit(&mut rng) * 2.0);
        let rest = m.rest_shape(&beta, &psi).unwrap();
        for v in 0..m.n_vertices() {
            for axis in 0..3 {
                let mut val = m.template[v][axis];
                for b in 0..4 {
                    val += m.basis_id[(3 * v + axis, b)] * beta[b];
                }
                for p in 0..3 {
                    val += m.basis_exp[(3 * v + axis, p)] * psi[p];
                }
                assert_relative_eq!(rest[v][axis], val, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn rest_shape_dimension_mismatch_names_basis() {
        let m = toy();
        match m.rest_shape(&DVector::zeros(5), &DVector::zeros(3)).unwrap_err() {
            ModelError::DimensionMismatch { basis, .. } => assert_eq!(basis, "basis_id"),
            other => panic!("unexpected error {other:?}"),
        }
        match m.rest_shape(&DVector::zeros(4), &DVector::zeros(9)).unwrap_err() {
            ModelError::DimensionMismatch { basis, .. } => assert_eq!(basis, "basis_exp"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn rest_shape_is_linear() {
        let m = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let b1 = DVector::from_fn(4, |_, _| sym_unit(&mut rng));
        let b2 = DVector::from_fn(4, |_, _| sym_unit(&mut rng));
        let psi = DVector::from_fn(3, |_, _| sym_unit(&mut rng));
        let lhs = m.rest_shape(&(&b1 + &b2), &psi).unwrap();
        let a = m.rest_shape(&b1, &psi).unwrap();
        let b = m.rest_shape(&b2, &DVector::zeros(3)).unwrap();
        for v in 0..m.n_vertices() {
            let rhs = a[v] + b[v] - m.template[v];
            assert_relative_eq!(lhs[v], rhs, epsilon = 1e-10);
        }
    }

    #[test]
    fn forward_zero_pose_equals_rest_plus_translation() {
        let m = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = Params::zeros(&m);
        params.beta = DVector::from_fn(4, |_, _| sym_unit(&mut rng));
        params.psi = DVector::from_fn(3, |_, _| sym_unit(&mut rng));
        let rest = m.rest_shape(&params.beta, &params.psi).unwrap();
        let mesh = m.forward(&params).unwrap();
        assert_eq!(mesh.vertices, rest, "zero pose must reproduce the rest shape exactly");

        params.trans = Vec3::new(10.0, 0.0, 0.0);
        let mesh = m.forward(&params).unwrap();
        for v in 0..m.n_vertices() {
            assert_eq!(mesh.vertices[v], rest[v] + Vec3::new(10.0, 0.0, 0.0));
        }
    }

    #[test]
    fn forward_single_segment_matches_rigid_oracle() {
        let m = make_toy_model(5, 42, 2, 2, 1);
        let mut params = Params::zeros(&m);
        params.theta[0] = Vec3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2);
        params.trans = Vec3::new(1.0, -2.0, 3.0);
        let mesh = m.forward(&params).unwrap();

        let joints = m.joints(&m.template);
        let r = Rotation3::new(params.theta[0]).into_inner();
        for v in 0..m.n_vertices() {
            let expected = r * (m.template[v] - joints[0]) + joints[0] + params.trans;
            assert_relative_eq!(mesh.vertices[v], expected, epsilon = 1e-10);
        }
    }

    #[test]
    fn forward_rejects_non_finite_theta() {
        let m = toy();
        let mut params = Params::zeros(&m);
        params.theta[1] = Vec3::new(f64::NAN, 0.0, 0.0);
        assert!(matches!(m.forward(&params), Err(ModelError::NonFinite(_))));
    }

    #[test]
    fn forward_rigid_invariance_single_segment() {
        // Conjugating the pose by a global rotation commutes with forward.
        let m = make_toy_model(8, 42, 2, 2, 1);
        let r0 = Rotation3::new(Vec3::new(0.3, -0.2, 0.5)).into_inner();
        let t0 = Vec3::new(4.0, 5.0, -6.0);

        let mut transformed = m.clone();
        for p in &mut transformed.template {
            *p = r0 * *p + t0;
        }

        let theta = Vec3::new(0.2, 0.7, -0.4);
        let mut params = Params::zeros(&m);
        params.theta[0] = theta;
        let base = m.forward(&params).unwrap();

        let mut params_t = Params::zeros(&transformed);
        params_t.theta[0] = r0 * theta;
        let moved = transformed.forward(&params_t).unwrap();

        for v in 0..m.n_vertices() {
            let expected = r0 * base.vertices[v] + t0;
            assert_relative_eq!(moved.vertices[v], expected, epsilon = 1e-8);
        }
    }

    #[test]
    fn edges_of_single_triangle() {
        assert_eq!(edges(&[[0, 1, 2]]), vec![(0, 1), (0, 2), (1, 2)]);
    }

    #[test]
    fn edges_of_two_triangles_sharing_one() {
        let e = edges(&[[0, 1, 2], [1, 3, 2]]);
        assert_eq!(e.len(), 5);
    }

    #[test]
    fn edges_satisfy_euler_formula_on_icosphere() {
        for level in 0..3 {
            let (v, f) = icosphere(level);
            let e = edges(&f);
            assert_eq!(e.len(), v.len() + f.len() - 2);
        }
    }

    #[test]
    fn normals_of_ccw_triangle_point_up() {
        let verts = vec![Vec3::zeros(), Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0)];
        let n = normals(&verts, &[[0, 1, 2]]);
        assert_relative_eq!(n.face[0], Vec3::new(0.0, 0.0, 1.0), epsilon = 1e-15);
        let flipped = normals(&verts, &[[0, 2, 1]]);
        assert_relative_eq!(flipped.face[0], Vec3::new(0.0, 0.0, -1.0), epsilon = 1e-15);
    }

    #[test]
    fn degenerate_faces_get_zero_normal_and_are_flagged() {
        let verts = vec![Vec3::zeros(), Vec3::new(1.0, 0.0, 0.0), Vec3::new(2.0, 0.0, 0.0)];
        let n = normals(&verts, &[[0, 1, 2]]);
        assert_eq!(n.face[0], Vec3::zeros());
        assert_eq!(n.degenerate, vec![0]);
    }

    #[test]
    fn icosphere_vertex_normals_are_radial() {
        let (v, f) = icosphere(3);
        let n = normals(&v, &f);
        let mut worst: f64 = 0.0;
        for (p, nv) in v.iter().zip(&n.vertex) {
            let cos = p.normalize().dot(nv).clamp(-1.0, 1.0);
            worst = worst.max(cos.acos().to_degrees());
        }
        assert!(worst < 2.0, "max angular deviation {worst} deg");
    }

    #[test]
    fn toy_model_is_deterministic() {
        let a = make_toy_model(123, 100, 5, 4, 4);
        let b = make_toy_model(123, 100, 5, 4, 4);
        assert_eq!(a, b);
        let c = make_toy_model(124, 100, 5, 4, 4);
        assert_ne!(a, c);
    }

    #[test]
    fn toy_model_skin_rows_sum_to_one() {
        let m = make_toy_model(77, 162, 4, 4, 5);
        for v in 0..m.n_vertices() {
            let sum: f64 = m.skin_weights.row(v).iter().sum();
            assert!((sum - 1.0).abs() <= 1e-6, "row {v} sums to {sum}");
        }
    }

    #[test]
    fn forward_deviation_bounded_by_basis_magnitudes() {
        let m = make_toy_model(55, 162, 4, 3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut params = Params::zeros(&m);
        params.beta = DVector::from_fn(4, |_, _| sym_unit(&mut rng) * 1.5);
        params.psi = DVector::from_fn(3, |_, _| sym_unit(&mut rng) * 1.5);
        let theta_max = 0.1;
        for t in &mut params.theta {
            *t = Vec3::new(sym_unit(&mut rng), sym_unit(&mut rng), sym_unit(&mut rng)) * theta_max
                / 3.0f64.sqrt();
        }
        let mesh = m.forward(&params).unwrap();

        let joints = m.joints(&m.template);
        let max_arm = m
            .template
            .iter()
            .map(|p| joints.iter().map(|j| (p - j).norm()).fold(0.0f64, f64::max))
            .fold(0.0f64, f64::max);
        // Chained segments compound rotations; bound with the tree depth.
        let depth = m.n_segments() as f64;
        let pose_bound = 2.0 * ((depth * theta_max) / 2.0).sin() * max_arm;
        let shape_bound = TOY_BASIS_MAX_MM * (params.beta.lp_norm(1) + params.psi.lp_norm(1));
        // Shape offsets also rotate; they enter the pose arm conservatively.
        let bound = shape_bound + pose_bound + depth * theta_max * shape_bound + 1e-6;
        for (v, p) in mesh.vertices.iter().enumerate() {
            let d = (p - m.template[v]).norm();
            assert!(d <= bound, "vertex {v} moved {d} mm > bound {bound}");
        }
    }

    #[test]
    fn container_round_trip_preserves_model() {
        let m = make_toy_model(9, 42, 3, 2, 2);
        let bytes = m.to_container().to_bytes();
        let c = Container::from_bytes(&bytes, Some(MODEL_MAGIC)).unwrap();
        let m2 = ParametricModel::from_container(&c).unwrap();
        assert_eq!(m, m2);
        assert_eq!(bytes, m2.to_container().to_bytes());
    }

    #[test]
    fn truncated_model_file_is_an_integrity_error() {
        let m = make_toy_model(9, 42, 3, 2, 2);
        let bytes = m.to_container().to_bytes();
        let cut = Container::from_bytes(&bytes[..bytes.len() - 7], Some(MODEL_MAGIC));
        assert!(matches!(cut, Err(ContainerError::Truncated) | Err(ContainerError::Checksum { .. })));
    }

    #[test]
    fn bad_skin_weight_row_names_the_row() {
        let m = make_toy_model(9, 42, 3, 2, 2);
        let mut c = m.to_container();
        let (shape, mut data) = c.f64s("skin_weights").unwrap();
        data[5 * m.n_segments()] += 0.25; // corrupt row 5
        c.insert("skin_weights", Array::f32(shape, data.iter().map(|&x| x as f32).collect()));
        match ParametricModel::from_container(&c).unwrap_err() {
            ModelError::Invariant(msg) => assert!(msg.contains("row 5"), "message: {msg}"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn version_mismatch_detected() {
        let m = make_toy_model(9, 42, 3, 2, 2);
        let mut bytes = m.to_container().to_bytes();
        let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let json = String::from_utf8(bytes[8..8 + header_len].to_vec()).unwrap();
        let patched = json.replace("\"version\":1", "\"version\":9");
        assert_ne!(json, patched);
        bytes[8..8 + header_len].copy_from_slice(patched.as_bytes());
        assert!(matches!(
            Container::from_bytes(&bytes, Some(MODEL_MAGIC)),
            Err(ContainerError::UnsupportedVersion(9))
        ));
    }
}
