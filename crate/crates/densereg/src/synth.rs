//! Synthetic scene generation: ground-truth parameters, remeshed and
//! perturbed scans, pre-rendered scan maps and projected dense landmarks.
//! Scenes stand in for a capture rig plus a 2D landmark detector and are
//! fully determined by their seed.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{CameraRig, RigError};
use crate::container::{Array, Container, ContainerError};
use crate::losses::ViewLandmarks;
use crate::meshio::{self, MeshIoError};
use crate::metrics::{MetricsError, RegionMasks};
use crate::model::{Mesh, ModelError, ParametricModel, Params};
use crate::raster::{render, scale_camera, GeoMaps, RasterError};
use crate::Vec3;

pub const LANDMARKS_MAGIC: &str = "DREG-LANDMARKS";
pub const PARAMS_MAGIC: &str = "DREG-PARAMS";

/// A ground-truth vertex is flagged self-occluded when it sits more than
/// this many mm behind the scan render at its pixel.
pub const OCCLUSION_DEPTH_MM: f64 = 1.0;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("no camera in the rig sees the generated head")]
    HeadNotVisible,
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("checksum mismatch for scene file {0:?}")]
    Checksum(String),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Rig(#[from] RigError),
    #[error(transparent)]
    MeshIo(#[from] MeshIoError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

pub type Result<T> = std::result::Result<T, SynthError>;

/// Ground-truth parameter sampling ranges.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParamSpec {
    /// Std-dev of shape coefficients (clamped to ±2.5 σ).
    pub beta_sd: f64,
    pub psi_sd: f64,
    /// Std-dev of per-segment axis-angle components (rad).
    pub theta_sd: f64,
    /// Uniform global translation range (± mm per axis).
    pub trans_mm: f64,
}

impl Default for ParamSpec {
    fn default() -> Self {
        ParamSpec { beta_sd: 0.8, psi_sd: 0.8, theta_sd: 0.02, trans_mm: 10.0 }
    }
}

impl ParamSpec {
    pub fn rigid_only() -> ParamSpec {
        ParamSpec { beta_sd: 0.0, psi_sd: 0.0, theta_sd: 0.0, trans_mm: 10.0 }
    }
}

/// Scan and landmark corruption knobs; all zero reproduces the ground
/// truth exactly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    /// Gaussian jitter of scan vertices (mm, per coordinate).
    pub scan_jitter_mm: f64,
    /// Gaussian jitter of landmark pixels.
    pub landmark_px: f64,
    /// Fraction of scan faces removed by hole punching, in [0, 1).
    pub hole_fraction: f64,
}

/// A complete synthetic capture: ground truth, scan, pre-rendered scan
/// maps, landmarks, rig and evaluation masks.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub seed: u64,
    pub param_spec: ParamSpec,
    pub noise: NoiseSpec,
    pub resolution: (usize, usize),
    pub gt_params: Params,
    pub gt_mesh: Mesh,
    pub scan_vertices: Vec<Vec3>,
    pub scan_faces: Vec<[u32; 3]>,
    /// Scan renders per view, in rig order.
    pub gt_maps: Vec<GeoMaps>,
    pub landmarks: Vec<ViewLandmarks>,
    pub rig: CameraRig,
    pub eye_mask: Vec<bool>,
    pub masks: RegionMasks,
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; the second value is discarded for simplicity.
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn clamped_normal(rng: &mut ChaCha8Rng, sd: f64) -> f64 {
    (gaussian(rng) * sd).clamp(-2.5 * sd, 2.5 * sd)
}

/// One level of midpoint subdivision (no smoothing): every triangle is
/// split into four; new vertices sit exactly on the old surface.
pub fn subdivide_midpoint(vertices: &[Vec3], faces: &[[u32; 3]]) -> (Vec<Vec3>, Vec<[u32; 3]>) {
    let mut verts = vertices.to_vec();
    let mut midpoint: BTreeMap<(u32, u32), u32> = BTreeMap::new();
    let mut out_faces = Vec::with_capacity(faces.len() * 4);
    for f in faces {
        let mut mid = [0u32; 3];
        for k in 0..3 {
            let (a, b) = (f[k], f[(k + 1) % 3]);
            let key = (a.min(b), a.max(b));
            mid[k] = *midpoint.entry(key).or_insert_with(|| {
                verts.push((vertices[a as usize] + vertices[b as usize]) / 2.0);
                (verts.len() - 1) as u32
            });
        }
        out_faces.push([f[0], mid[0], mid[2]]);
        out_faces.push([f[1], mid[1], mid[0]]);
        out_faces.push([f[2], mid[2], mid[1]]);
        out_faces.push([mid[0], mid[1], mid[2]]);
    }
    (verts, out_faces)
}

/// Removes exactly `round(fraction · n_faces)` faces by growing patches
/// from random seed faces across shared edges.
fn punch_holes(faces: &[[u32; 3]], fraction: f64, rng: &mut ChaCha8Rng) -> Vec<[u32; 3]> {
    let target = ((faces.len() as f64) * fraction).round() as usize;
    if target == 0 {
        return faces.to_vec();
    }
    // Edge-to-face adjacency.
    let mut edge_faces: BTreeMap<(u32, u32), Vec<u32>> = BTreeMap::new();
    for (fi, f) in faces.iter().enumerate() {
        for k in 0..3 {
            let (a, b) = (f[k], f[(k + 1) % 3]);
            edge_faces.entry((a.min(b), a.max(b))).or_default().push(fi as u32);
        }
    }
    let mut removed = vec![false; faces.len()];
    let mut n_removed = 0usize;
    while n_removed < target {
        let seed = rng.random_range(0..faces.len());
        let mut queue = std::collections::VecDeque::from([seed as u32]);
        while n_removed < target {
            let Some(fi) = queue.pop_front() else { break };
            if removed[fi as usize] {
                continue;
            }
            removed[fi as usize] = true;
            n_removed += 1;
            let f = &faces[fi as usize];
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                for &nf in &edge_faces[&(a.min(b), a.max(b))] {
                    if !removed[nf as usize] {
                        queue.push_back(nf);
                    }
                }
            }
        }
    }
    faces
        .iter()
        .zip(&removed)
        .filter(|(_, &r)| !r)
        .map(|(f, _)| *f)
        .collect()
}

/// Region masks for toy heads, defined by the template's unit directions:
/// scalp (top, excluded), boundary (bottom cap, excluded), neck, face,
/// lips and eyes.
pub fn toy_region_masks(template: &[Vec3]) -> (RegionMasks, Vec<bool>) {
    let centroid = template.iter().sum::<Vec3>() / template.len() as f64;
    let eye_dirs =
        [Vec3::new(-0.38, 0.18, 0.91).normalize(), Vec3::new(0.38, 0.18, 0.91).normalize()];
    let mut regions: BTreeMap<String, Vec<u32>> = BTreeMap::new();
    for name in ["scalp", "boundary", "neck", "face", "lips", "eyes"] {
        regions.insert(name.to_string(), Vec::new());
    }
    let mut eye_mask = vec![false; template.len()];
    for (v, p) in template.iter().enumerate() {
        let d = (p - centroid).normalize();
        let vi = v as u32;
        if d.y > 0.55 {
            regions.get_mut("scalp").unwrap().push(vi);
        } else if d.y < -0.8 {
            regions.get_mut("boundary").unwrap().push(vi);
        } else if d.y < -0.45 {
            regions.get_mut("neck").unwrap().push(vi);
        }
        if d.z > 0.35 && (-0.5..=0.6).contains(&d.y) {
            regions.get_mut("face").unwrap().push(vi);
            if (-0.45..=-0.1).contains(&d.y) && d.x.abs() < 0.35 && d.z > 0.55 {
                regions.get_mut("lips").unwrap().push(vi);
            }
        }
        if eye_dirs.iter().any(|e| d.dot(e) > 0.975) {
            regions.get_mut("eyes").unwrap().push(vi);
            eye_mask[v] = true;
        }
    }
    let masks = RegionMasks {
        regions,
        excluded: vec!["boundary".to_string(), "scalp".to_string()],
    };
    (masks, eye_mask)
}

/// Generates a complete scene. Deterministic per seed: parameters, scan
/// remeshing, jitter, holes and landmark noise all come from one seeded
/// stream.
pub fn make_scene(
    model: &ParametricModel,
    rig: &CameraRig,
    seed: u64,
    param_spec: &ParamSpec,
    noise: &NoiseSpec,
    resolution: (usize, usize),
) -> Result<Scene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut params = Params::zeros(model);
    params.beta = DVector::from_fn(model.n_beta(), |_, _| clamped_normal(&mut rng, param_spec.beta_sd));
    params.psi = DVector::from_fn(model.n_psi(), |_, _| clamped_normal(&mut rng, param_spec.psi_sd));
    for t in &mut params.theta {
        *t = Vec3::new(
            clamped_normal(&mut rng, param_spec.theta_sd),
            clamped_normal(&mut rng, param_spec.theta_sd),
            clamped_normal(&mut rng, param_spec.theta_sd),
        );
    }
    params.trans = Vec3::new(
        (rng.random::<f64>() * 2.0 - 1.0) * param_spec.trans_mm,
        (rng.random::<f64>() * 2.0 - 1.0) * param_spec.trans_mm,
        (rng.random::<f64>() * 2.0 - 1.0) * param_spec.trans_mm,
    );
    let gt_mesh = model.forward(&params)?;

    // Scan: remeshed (independent topology), jittered, hole-punched.
    let (mut scan_vertices, scan_faces_full) =
        subdivide_midpoint(&gt_mesh.vertices, &gt_mesh.faces);
    if noise.scan_jitter_mm > 0.0 {
        for p in &mut scan_vertices {
            *p += Vec3::new(
                gaussian(&mut rng) * noise.scan_jitter_mm,
                gaussian(&mut rng) * noise.scan_jitter_mm,
                gaussian(&mut rng) * noise.scan_jitter_mm,
            );
        }
    }
    let scan_faces = punch_holes(&scan_faces_full, noise.hole_fraction, &mut rng);

    // Scan must be visible from at least one camera.
    let visible = rig.cameras.iter().any(|cam| {
        gt_mesh.vertices.iter().any(|p| {
            let (uv, ok) = cam.project_point(p);
            ok && uv[0] >= 0.0
                && uv[1] >= 0.0
                && uv[0] <= (cam.width - 1) as f64
                && uv[1] <= (cam.height - 1) as f64
        })
    });
    if !visible {
        return Err(SynthError::HeadNotVisible);
    }

    let gt_maps: Vec<GeoMaps> = rig
        .cameras
        .iter()
        .map(|cam| render(&scan_vertices, &scan_faces, cam, resolution.0, resolution.1))
        .collect();

    // Landmarks: exact projections of the ground-truth mesh plus pixel
    // noise; confidence zero exactly where the vertex sits more than
    // OCCLUSION_DEPTH_MM behind the scan render at its pixel.
    let mut landmarks = Vec::with_capacity(rig.len());
    for (cam, maps) in rig.cameras.iter().zip(&gt_maps) {
        let scaled = scale_camera(cam, resolution.0, resolution.1);
        let mut points = Vec::with_capacity(gt_mesh.vertices.len());
        let mut confidence = Vec::with_capacity(gt_mesh.vertices.len());
        for p in &gt_mesh.vertices {
            let (uv, ok) = cam.project_point(p);
            let mut conf = 1.0;
            if ok {
                let (suv, sok) = scaled.project_point(p);
                if sok {
                    let (x, y) = (suv[0].round() as i64, suv[1].round() as i64);
                    if x >= 0 && y >= 0 && (x as usize) < maps.width && (y as usize) < maps.height {
                        let idx = y as usize * maps.width + x as usize;
                        if maps.mask[idx] {
                            let scan_z = scaled.to_camera_point(&maps.pointmap[idx]).z;
                            let vert_z = scaled.to_camera_point(p).z;
                            if vert_z > scan_z + OCCLUSION_DEPTH_MM {
                                conf = 0.0;
                            }
                        }
                    }
                }
            }
            let jitter = if noise.landmark_px > 0.0 {
                [gaussian(&mut rng) * noise.landmark_px, gaussian(&mut rng) * noise.landmark_px]
            } else {
                [0.0, 0.0]
            };
            points.push([uv[0] + jitter[0], uv[1] + jitter[1]]);
            confidence.push(conf);
        }
        landmarks.push(ViewLandmarks { points, confidence });
    }

    let (masks, eye_mask) = toy_region_masks(&model.template);

    Ok(Scene {
        seed,
        param_spec: *param_spec,
        noise: *noise,
        resolution,
        gt_params: params,
        gt_mesh,
        scan_vertices,
        scan_faces,
        gt_maps,
        landmarks,
        rig: rig.clone(),
        eye_mask,
        masks,
    })
}

/// Smooth low-frequency displacement field with an exact RMS plus a rigid
/// translation of the given norm; both zero reproduce the input.
pub fn perturb_init(
    vertices: &[Vec3],
    rigid_mm: f64,
    smooth_rms_mm: f64,
    seed: u64,
) -> Vec<Vec3> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xdead_beef);
    let centroid = vertices.iter().sum::<Vec3>() / vertices.len() as f64;
    let dir = loop {
        let d = Vec3::new(gaussian(&mut rng), gaussian(&mut rng), gaussian(&mut rng));
        if d.norm() > 1e-9 {
            break d.normalize();
        }
    };
    let shift = dir * rigid_mm;

    let mut field = vec![Vec3::zeros(); vertices.len()];
    if smooth_rms_mm > 0.0 {
        let mut waves = Vec::new();
        for _ in 0..4 {
            let w = Vec3::new(gaussian(&mut rng), gaussian(&mut rng), gaussian(&mut rng)).normalize();
            let amp = Vec3::new(gaussian(&mut rng), gaussian(&mut rng), gaussian(&mut rng));
            let freq = 1.0 + rng.random::<f64>();
            let phase = rng.random::<f64>() * std::f64::consts::TAU;
            waves.push((w, amp, freq, phase));
        }
        let scale_ref = vertices
            .iter()
            .map(|p| (p - centroid).norm())
            .fold(0.0f64, f64::max)
            .max(1e-9);
        for (v, p) in vertices.iter().enumerate() {
            let d = (p - centroid) / scale_ref;
            let mut acc = Vec3::zeros();
            for &(w, amp, freq, phase) in &waves {
                acc += amp * (freq * d.dot(&w) * std::f64::consts::PI + phase).sin();
            }
            field[v] = acc;
        }
        let rms = (field.iter().map(|f| f.norm_squared()).sum::<f64>()
            / vertices.len() as f64)
            .sqrt()
            .max(1e-12);
        let s = smooth_rms_mm / rms;
        for f in &mut field {
            *f *= s;
        }
    }
    vertices.iter().zip(&field).map(|(p, f)| p + f + shift).collect()
}

// ---------------------------------------------------------------------------
// Scene directory I/O

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct Manifest {
    seed: u64,
    resolution: [usize; 2],
    param_spec: ParamSpec,
    noise: NoiseSpec,
    views: Vec<String>,
    files: BTreeMap<String, FileEntry>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct FileEntry {
    path: String,
    crc32: u32,
}

fn landmarks_container(landmarks: &[ViewLandmarks]) -> Container {
    let k = landmarks.len();
    let n = landmarks.first().map_or(0, |l| l.points.len());
    let mut c = Container::new(LANDMARKS_MAGIC);
    c.set_dim("n_views", k as i64);
    c.set_dim("n_vertices", n as i64);
    let mut pts = Vec::with_capacity(k * n * 2);
    let mut conf = Vec::with_capacity(k * n);
    for lm in landmarks {
        for p in &lm.points {
            pts.extend_from_slice(p);
        }
        conf.extend_from_slice(&lm.confidence);
    }
    c.insert("points", Array::f64(vec![k, n, 2], pts));
    c.insert("confidence", Array::f64(vec![k, n], conf));
    c
}

fn landmarks_from_container(c: &Container) -> Result<Vec<ViewLandmarks>> {
    let k = c.dim("n_views")? as usize;
    let n = c.dim("n_vertices")? as usize;
    let (_, pts) = c.f64s("points")?;
    let (_, conf) = c.f64s("confidence")?;
    if pts.len() != k * n * 2 || conf.len() != k * n {
        return Err(SynthError::Manifest("landmark arrays have wrong sizes".into()));
    }
    Ok((0..k)
        .map(|v| ViewLandmarks {
            points: (0..n).map(|i| [pts[(v * n + i) * 2], pts[(v * n + i) * 2 + 1]]).collect(),
            confidence: conf[v * n..(v + 1) * n].to_vec(),
        })
        .collect())
}

fn params_container(p: &Params) -> Container {
    let mut c = Container::new(PARAMS_MAGIC);
    c.set_dim("n_beta", p.beta.len() as i64);
    c.set_dim("n_psi", p.psi.len() as i64);
    c.set_dim("n_segments", p.theta.len() as i64);
    c.insert("beta", Array::f64(vec![p.beta.len()], p.beta.iter().copied().collect()));
    c.insert("psi", Array::f64(vec![p.psi.len()], p.psi.iter().copied().collect()));
    c.insert(
        "theta",
        Array::f64(vec![p.theta.len(), 3], p.theta.iter().flat_map(|t| [t.x, t.y, t.z]).collect()),
    );
    c.insert("trans", Array::f64(vec![3], vec![p.trans.x, p.trans.y, p.trans.z]));
    c
}

fn params_from_container(c: &Container) -> Result<Params> {
    let (_, beta) = c.f64s("beta")?;
    let (_, psi) = c.f64s("psi")?;
    let (_, theta) = c.f64s("theta")?;
    let (_, trans) = c.f64s("trans")?;
    Ok(Params {
        beta: DVector::from_vec(beta),
        psi: DVector::from_vec(psi),
        theta: theta.chunks_exact(3).map(|t| Vec3::new(t[0], t[1], t[2])).collect(),
        trans: Vec3::new(trans[0], trans[1], trans[2]),
    })
}

impl Scene {
    /// Writes the scene directory: manifest, model container, rig JSON,
    /// ground-truth mesh (OBJ), scan (binary PLY), landmark and parameter
    /// blobs, masks JSON, and per-view scan maps. Deterministic output.
    pub fn save(&self, model: &ParametricModel, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::create_dir_all(dir.join("maps"))?;
        let mut files: BTreeMap<String, FileEntry> = BTreeMap::new();
        let mut write = |name: &str, rel: String, bytes: &[u8]| -> Result<()> {
            fs::write(dir.join(&rel), bytes)?;
            files.insert(name.to_string(), FileEntry { path: rel, crc32: crc32fast::hash(bytes) });
            Ok(())
        };

        write("model", "model.dregm".into(), &model.to_container().to_bytes())?;
        write("rig", "rig.json".into(), self.rig.to_json().as_bytes())?;
        write(
            "gt_mesh",
            "gt_mesh.obj".into(),
            meshio::format_obj(&self.gt_mesh.vertices, &self.gt_mesh.faces).as_bytes(),
        )?;
        write("scan", "scan.ply".into(), &meshio::format_ply(&self.scan_vertices, &self.scan_faces))?;
        write("landmarks", "landmarks.dregb".into(), &landmarks_container(&self.landmarks).to_bytes())?;
        write("gt_params", "gt_params.dregb".into(), &params_container(&self.gt_params).to_bytes())?;
        write("masks", "masks.json".into(), self.masks.to_json().as_bytes())?;
        for (name, maps) in self.rig.names.iter().zip(&self.gt_maps) {
            write(
                &format!("maps/{name}"),
                format!("maps/{name}.dregb"),
                &maps.to_container().to_bytes(),
            )?;
        }

        let manifest = Manifest {
            seed: self.seed,
            resolution: [self.resolution.0, self.resolution.1],
            param_spec: self.param_spec,
            noise: self.noise,
            views: self.rig.names.clone(),
            files,
        };
        fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
        )?;
        Ok(())
    }

    /// Loads a scene directory, verifying every file checksum against the
    /// manifest. Returns the scene and its model.
    pub fn load(dir: &Path) -> Result<(Scene, ParametricModel)> {
        let manifest: Manifest =
            serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)
                .map_err(|e| SynthError::Manifest(e.to_string()))?;
        let read = |name: &str| -> Result<Vec<u8>> {
            let entry = manifest
                .files
                .get(name)
                .ok_or_else(|| SynthError::Manifest(format!("missing file entry {name:?}")))?;
            let bytes = fs::read(dir.join(&entry.path))?;
            if crc32fast::hash(&bytes) != entry.crc32 {
                return Err(SynthError::Checksum(entry.path.clone()));
            }
            Ok(bytes)
        };

        let model = ParametricModel::from_container(&Container::from_bytes(
            &read("model")?,
            Some(crate::model::MODEL_MAGIC),
        )?)?;
        let rig = CameraRig::from_json(std::str::from_utf8(&read("rig")?).map_err(|e| {
            SynthError::Manifest(format!("rig json is not utf-8: {e}"))
        })?)?;
        let (gt_v, gt_f) = meshio::parse_obj(std::str::from_utf8(&read("gt_mesh")?).map_err(
            |e| SynthError::Manifest(format!("gt mesh is not utf-8: {e}")),
        )?)?;
        let (scan_vertices, scan_faces) = meshio::parse_ply(&read("scan")?)?;
        let landmarks = landmarks_from_container(&Container::from_bytes(
            &read("landmarks")?,
            Some(LANDMARKS_MAGIC),
        )?)?;
        let gt_params = params_from_container(&Container::from_bytes(
            &read("gt_params")?,
            Some(PARAMS_MAGIC),
        )?)?;
        let masks = RegionMasks::from_json(std::str::from_utf8(&read("masks")?).map_err(|e| {
            SynthError::Manifest(format!("masks json is not utf-8: {e}"))
        })?)?;
        let mut gt_maps = Vec::with_capacity(manifest.views.len());
        for name in &manifest.views {
            let bytes = read(&format!("maps/{name}"))?;
            gt_maps.push(GeoMaps::from_container(&Container::from_bytes(
                &bytes,
                Some(crate::raster::MAPS_MAGIC),
            )?)?);
        }
        let eye_mask = {
            let mut mask = vec![false; model.n_vertices()];
            if let Some(eyes) = masks.regions.get("eyes") {
                for &i in eyes {
                    mask[i as usize] = true;
                }
            }
            mask
        };

        Ok((
            Scene {
                seed: manifest.seed,
                param_spec: manifest.param_spec,
                noise: manifest.noise,
                resolution: (manifest.resolution[0], manifest.resolution[1]),
                gt_params,
                gt_mesh: Mesh { vertices: gt_v, faces: gt_f },
                scan_vertices,
                scan_faces,
                gt_maps,
                landmarks,
                rig,
                eye_mask,
                masks,
            },
            model,
        ))
    }
}

/// Renders the scan of a saved scene at an arbitrary resolution, caching
/// the result as container files next to the scene. Returns the per-view
/// paths and whether each was a cache hit (valid existing file).
pub fn prerender_scan(
    scene: &Scene,
    dir: &Path,
    resolution: (usize, usize),
) -> Result<Vec<(PathBuf, bool)>> {
    let sub = dir.join(format!("maps_{}x{}", resolution.0, resolution.1));
    fs::create_dir_all(&sub)?;
    let mut out = Vec::with_capacity(scene.rig.len());
    for (name, cam) in scene.rig.names.iter().zip(&scene.rig.cameras) {
        let path = sub.join(format!("{name}.dregb"));
        if path.exists() {
            if let Ok(c) = Container::read_file(&path, Some(crate::raster::MAPS_MAGIC)) {
                let h = c.dim("height").unwrap_or(-1);
                let w = c.dim("width").unwrap_or(-1);
                if h == resolution.1 as i64 && w == resolution.0 as i64 {
                    out.push((path, true));
                    continue;
                }
            }
        }
        let maps = render(&scene.scan_vertices, &scene.scan_faces, cam, resolution.0, resolution.1);
        maps.save(&path)?;
        out.push((path, false));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::ring_rig;
    use crate::metrics::point_to_surface;
    use crate::model::make_toy_model;

    fn toy_rig(res: u32) -> CameraRig {
        ring_rig(4, Vec3::zeros(), 600.0, res as f64 * 4.0, res, res)
    }

    #[test]
    fn zero_noise_scan_lies_on_ground_truth() {
        let model = make_toy_model(3, 162, 3, 2, 2);
        let rig = toy_rig(64);
        let scene = make_scene(
            &model,
            &rig,
            7,
            &ParamSpec::default(),
            &NoiseSpec::default(),
            (64, 64),
        )
        .unwrap();
        let d = point_to_surface(&scene.scan_vertices, &scene.gt_mesh.vertices, &scene.gt_mesh.faces)
            .unwrap();
        let max = d.iter().cloned().fold(0.0f64, f64::max);
        assert!(max < 1e-9, "scan departs from the surface by {max} mm");

        // Landmarks are exact projections wherever confident.
        for (cam, lm) in scene.rig.cameras.iter().zip(&scene.landmarks) {
            for (v, p) in scene.gt_mesh.vertices.iter().enumerate() {
                let (uv, _) = cam.project_point(p);
                assert_eq!(lm.points[v], uv);
            }
        }
    }

    #[test]
    fn scenes_are_deterministic_per_seed() {
        let model = make_toy_model(4, 162, 3, 2, 2);
        let rig = toy_rig(48);
        let spec = ParamSpec::default();
        let noise = NoiseSpec { scan_jitter_mm: 0.3, landmark_px: 0.5, hole_fraction: 0.1 };
        let a = make_scene(&model, &rig, 11, &spec, &noise, (48, 48)).unwrap();
        let b = make_scene(&model, &rig, 11, &spec, &noise, (48, 48)).unwrap();
        assert_eq!(a, b);
        let c = make_scene(&model, &rig, 12, &spec, &noise, (48, 48)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn hole_fraction_removes_expected_share() {
        let model = make_toy_model(5, 162, 3, 2, 2);
        let rig = toy_rig(48);
        let noise = NoiseSpec { hole_fraction: 0.2, ..NoiseSpec::default() };
        let scene =
            make_scene(&model, &rig, 13, &ParamSpec::default(), &noise, (48, 48)).unwrap();
        let full = model.n_faces() * 4;
        let kept = scene.scan_faces.len() as f64 / full as f64;
        assert!((kept - 0.8).abs() < 0.05 * 0.8, "kept fraction {kept}");
    }

    #[test]
    fn occlusion_rule_matches_confidences_exactly() {
        let model = make_toy_model(6, 162, 3, 2, 2);
        let rig = toy_rig(96);
        let scene =
            make_scene(&model, &rig, 17, &ParamSpec::default(), &NoiseSpec::default(), (96, 96))
                .unwrap();
        let mut zeros = 0usize;
        for ((cam, maps), lm) in scene.rig.cameras.iter().zip(&scene.gt_maps).zip(&scene.landmarks) {
            let scaled = scale_camera(cam, 96, 96);
            for (v, p) in scene.gt_mesh.vertices.iter().enumerate() {
                let mut expect_occluded = false;
                let (uv, ok) = scaled.project_point(p);
                if ok {
                    let (x, y) = (uv[0].round() as i64, uv[1].round() as i64);
                    if x >= 0 && y >= 0 && (x as usize) < 96 && (y as usize) < 96 {
                        let idx = y as usize * 96 + x as usize;
                        if maps.mask[idx] {
                            let scan_z = scaled.to_camera_point(&maps.pointmap[idx]).z;
                            expect_occluded =
                                scaled.to_camera_point(p).z > scan_z + OCCLUSION_DEPTH_MM;
                        }
                    }
                }
                assert_eq!(lm.confidence[v] == 0.0, expect_occluded, "view vertex {v}");
                if expect_occluded {
                    zeros += 1;
                }
            }
        }
        // Ring cameras must see the far side of the head as occluded.
        assert!(zeros > 100, "only {zeros} occluded landmarks across views");
    }

    #[test]
    fn perturb_init_properties() {
        let model = make_toy_model(7, 162, 3, 2, 2);
        let same = perturb_init(&model.template, 0.0, 0.0, 5);
        assert_eq!(same, model.template);

        let a = perturb_init(&model.template, 10.0, 5.0, 5);
        let b = perturb_init(&model.template, 10.0, 5.0, 5);
        assert_eq!(a, b);

        // The smooth field RMS is exact after removing the rigid shift.
        let only_field = perturb_init(&model.template, 0.0, 5.0, 5);
        let rms = (only_field
            .iter()
            .zip(&model.template)
            .map(|(x, p)| (x - p).norm_squared())
            .sum::<f64>()
            / model.n_vertices() as f64)
            .sqrt();
        assert!((rms - 5.0).abs() / 5.0 < 0.05, "field rms {rms}");

        let only_shift = perturb_init(&model.template, 10.0, 0.0, 5);
        let d0 = only_shift[0] - model.template[0];
        assert!((d0.norm() - 10.0).abs() < 1e-9);
        for (x, p) in only_shift.iter().zip(&model.template) {
            assert!(((x - p) - d0).norm() < 1e-12, "shift must be rigid");
        }
    }

    #[test]
    fn scene_directory_round_trip_with_checksums() {
        let model = make_toy_model(8, 162, 3, 2, 2);
        let rig = toy_rig(48);
        let noise = NoiseSpec { scan_jitter_mm: 0.2, landmark_px: 0.3, hole_fraction: 0.05 };
        let scene =
            make_scene(&model, &rig, 19, &ParamSpec::default(), &noise, (48, 48)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        scene.save(&model, dir.path()).unwrap();

        let (loaded, loaded_model) = Scene::load(dir.path()).unwrap();
        assert_eq!(loaded_model, model);
        assert_eq!(loaded, scene);

        // Same seed twice produces identical manifests.
        let dir2 = tempfile::tempdir().unwrap();
        scene.save(&model, dir2.path()).unwrap();
        assert_eq!(
            fs::read(dir.path().join("manifest.json")).unwrap(),
            fs::read(dir2.path().join("manifest.json")).unwrap()
        );

        // Corruption is caught by the checksum audit.
        let scan_path = dir.path().join("scan.ply");
        let mut bytes = fs::read(&scan_path).unwrap();
        let n = bytes.len();
        bytes[n - 1] ^= 0x40;
        fs::write(&scan_path, bytes).unwrap();
        assert!(matches!(Scene::load(dir.path()), Err(SynthError::Checksum(_))));
    }

    #[test]
    fn prerender_cache_hits_and_resolution_keys() {
        let model = make_toy_model(9, 162, 3, 2, 2);
        let rig = toy_rig(48);
        let scene =
            make_scene(&model, &rig, 23, &ParamSpec::default(), &NoiseSpec::default(), (48, 48))
                .unwrap();
        let dir = tempfile::tempdir().unwrap();

        let first = prerender_scan(&scene, dir.path(), (32, 32)).unwrap();
        assert!(first.iter().all(|(_, hit)| !hit));
        let first_bytes: Vec<Vec<u8>> =
            first.iter().map(|(p, _)| fs::read(p).unwrap()).collect();

        let second = prerender_scan(&scene, dir.path(), (32, 32)).unwrap();
        assert!(second.iter().all(|(_, hit)| *hit));
        for ((p, _), bytes) in second.iter().zip(&first_bytes) {
            assert_eq!(&fs::read(p).unwrap(), bytes, "cache must be bitwise stable");
        }

        let other = prerender_scan(&scene, dir.path(), (64, 64)).unwrap();
        assert!(other.iter().all(|(_, hit)| !hit));
        assert_ne!(other[0].0, second[0].0);

        // Cached maps equal fresh renders bitwise.
        let fresh = render(&scene.scan_vertices, &scene.scan_faces, &scene.rig.cameras[0], 32, 32);
        let cached = GeoMaps::load(&second[0].0).unwrap();
        assert_eq!(fresh, cached);
    }

    #[test]
    fn blind_rig_is_rejected() {
        let model = make_toy_model(10, 162, 3, 2, 2);
        // Cameras looking at a point 100 m away from the head.
        let rig = ring_rig(2, Vec3::new(100_000.0, 0.0, 0.0), 500.0, 200.0, 48, 48);
        let err = make_scene(&model, &rig, 29, &ParamSpec::default(), &NoiseSpec::default(), (48, 48))
            .unwrap_err();
        assert!(matches!(err, SynthError::HeadNotVisible));
    }

    #[test]
    fn toy_masks_cover_expected_regions() {
        let model = make_toy_model(11, 642, 3, 2, 3);
        let (masks, eye_mask) = toy_region_masks(&model.template);
        masks.validate(model.n_vertices()).unwrap();
        for name in ["scalp", "boundary", "neck", "face", "lips", "eyes"] {
            assert!(
                !masks.regions[name].is_empty(),
                "region {name} is empty on a 642-vertex head"
            );
        }
        assert_eq!(
            eye_mask.iter().filter(|&&m| m).count(),
            masks.regions["eyes"].len()
        );
        assert!(masks.excluded.contains(&"scalp".to_string()));
    }
}
