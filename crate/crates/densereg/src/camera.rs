//! Calibrated pinhole multi-view rig: world-to-camera transforms,
//! perspective projection and rig file I/O.

use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::{Mat3, Vec3};

/// Points closer than this (camera-space z, mm) project as invalid.
pub const Z_NEAR_MM: f64 = 1.0;

const ORTHO_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum RigError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("rig schema violation: {0}")]
    Schema(String),
    #[error("camera {name:?}: rotation is not orthonormal with det=+1 (deviation {deviation:.3e})")]
    NonOrthonormal { name: String, deviation: f64 },
    #[error("camera {name:?}: {reason}")]
    Invalid { name: String, reason: String },
    #[error("duplicate camera name {0:?}")]
    DuplicateName(String),
    #[error("rig has no cameras")]
    Empty,
}

pub type Result<T> = std::result::Result<T, RigError>;

/// A calibrated pinhole camera. `rotation`/`translation` map world to
/// camera space; intrinsics are in pixels with (0,0) at the center of
/// the top-left pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub rotation: Mat3,
    pub translation: Vec3,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Camera {
    /// Validates orthonormality (det = +1) and intrinsic sanity.
    pub fn validate(&self, name: &str) -> Result<()> {
        let r = &self.rotation;
        let deviation = (r.transpose() * r - Mat3::identity()).norm();
        let det = r.determinant();
        if deviation > ORTHO_TOL || (det - 1.0).abs() > ORTHO_TOL {
            return Err(RigError::NonOrthonormal {
                name: name.to_string(),
                deviation: deviation.max((det - 1.0).abs()),
            });
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(RigError::Invalid {
                name: name.to_string(),
                reason: format!("focal lengths must be positive (fx={}, fy={})", self.fx, self.fy),
            });
        }
        if self.width < 8 || self.height < 8 {
            return Err(RigError::Invalid {
                name: name.to_string(),
                reason: format!("resolution {}x{} below 8x8", self.width, self.height),
            });
        }
        if !(self.cx.is_finite() && self.cy.is_finite() && self.translation.iter().all(|v| v.is_finite())) {
            return Err(RigError::Invalid { name: name.to_string(), reason: "non-finite parameters".into() });
        }
        Ok(())
    }

    pub fn to_camera_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// World points to camera space, `R p + t` per point.
    pub fn to_camera(&self, points: &[Vec3]) -> Vec<Vec3> {
        points.iter().map(|p| self.to_camera_point(p)).collect()
    }

    /// World-space camera center, `-Rᵀ t`.
    pub fn center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    /// Projects one world point; `None` marks z ≤ [`Z_NEAR_MM`].
    pub fn project_point(&self, p: &Vec3) -> ([f64; 2], bool) {
        let q = self.to_camera_point(p);
        if q.z <= Z_NEAR_MM {
            return ([0.0, 0.0], false);
        }
        ([self.fx * q.x / q.z + self.cx, self.fy * q.y / q.z + self.cy], true)
    }

    /// Projects world points to pixel coordinates with per-point validity.
    pub fn project(&self, points: &[Vec3]) -> Vec<([f64; 2], bool)> {
        points.iter().map(|p| self.project_point(p)).collect()
    }
}

/// Ordered list of named cameras.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraRig {
    pub cameras: Vec<Camera>,
    pub names: Vec<String>,
}

impl CameraRig {
    pub fn new(cameras: Vec<Camera>, names: Vec<String>) -> Result<CameraRig> {
        assert_eq!(cameras.len(), names.len());
        if cameras.is_empty() {
            return Err(RigError::Empty);
        }
        for (cam, name) in cameras.iter().zip(&names) {
            cam.validate(name)?;
        }
        for (i, name) in names.iter().enumerate() {
            if names[..i].contains(name) {
                return Err(RigError::DuplicateName(name.clone()));
            }
        }
        Ok(CameraRig { cameras, names })
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    /// View indices sorted by camera name. Loss reductions iterate in this
    /// order so reordering the rig file cannot change a fit trajectory.
    pub fn canonical_order(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.names.len()).collect();
        idx.sort_by(|&a, &b| self.names[a].cmp(&self.names[b]));
        idx
    }

    pub fn from_json(text: &str) -> Result<CameraRig> {
        let file: RigFile =
            serde_json::from_str(text).map_err(|e| RigError::Schema(e.to_string()))?;
        let mut cameras = Vec::with_capacity(file.cameras.len());
        let mut names = Vec::with_capacity(file.cameras.len());
        for c in file.cameras {
            let rotation = Mat3::from_row_slice(&c.r);
            cameras.push(Camera {
                rotation,
                translation: Vec3::new(c.t[0], c.t[1], c.t[2]),
                fx: c.fx,
                fy: c.fy,
                cx: c.cx,
                cy: c.cy,
                width: c.width,
                height: c.height,
            });
            names.push(c.name);
        }
        CameraRig::new(cameras, names)
    }

    pub fn to_json(&self) -> String {
        let file = RigFile {
            cameras: self
                .cameras
                .iter()
                .zip(&self.names)
                .map(|(cam, name)| RigCamera {
                    name: name.clone(),
                    r: cam.rotation.transpose().as_slice().to_vec(), // row-major
                    t: [cam.translation.x, cam.translation.y, cam.translation.z],
                    fx: cam.fx,
                    fy: cam.fy,
                    cx: cam.cx,
                    cy: cam.cy,
                    width: cam.width,
                    height: cam.height,
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("rig serialization cannot fail")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(fs::write(path, self.to_json())?)
    }

    pub fn load(path: &Path) -> Result<CameraRig> {
        CameraRig::from_json(&fs::read_to_string(path)?)
    }
}

#[derive(Serialize)]
struct RigFile {
    cameras: Vec<RigCamera>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RigCamera {
    name: String,
    /// Row-major 3x3 world-to-camera rotation.
    #[serde(rename = "R")]
    r: Vec<f64>,
    t: [f64; 3],
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: u32,
    height: u32,
}

impl RigCamera {
    fn check(&self) -> std::result::Result<(), String> {
        if self.r.len() != 9 {
            return Err(format!("camera {:?}: R must have 9 entries", self.name));
        }
        Ok(())
    }
}

// serde can't easily validate Vec length inline; hook it in deserialization.
impl<'de> Deserialize<'de> for RigFile {
    fn deserialize<D>(deserializer: D) -> std::result::Result<RigFile, D::Error>
    where
        D: serde::Deserializer<'de>,
    {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Raw {
            cameras: Vec<RigCamera>,
        }
        let raw = Raw::deserialize(deserializer)?;
        for c in &raw.cameras {
            c.check().map_err(serde::de::Error::custom)?;
        }
        Ok(RigFile { cameras: raw.cameras })
    }
}

/// Builds a ring of `k` inward-looking cameras around `center` at the given
/// radius (mm). Cameras are named `cam0..cam{k-1}` counter-clockwise in the
/// world xz-plane.
pub fn ring_rig(
    k: usize,
    center: Vec3,
    radius_mm: f64,
    focal_px: f64,
    width: u32,
    height: u32,
) -> CameraRig {
    assert!(k >= 1);
    let mut cameras = Vec::with_capacity(k);
    let mut names = Vec::with_capacity(k);
    for i in 0..k {
        let angle = 2.0 * std::f64::consts::PI * i as f64 / k as f64;
        let pos = center + Vec3::new(radius_mm * angle.sin(), 0.0, radius_mm * angle.cos());
        cameras.push(look_at(pos, center, focal_px, width, height));
        names.push(format!("cam{i}"));
    }
    CameraRig::new(cameras, names).expect("ring rig construction is valid")
}

/// Camera at `eye` looking at `target`, +z forward, y down-ish (image y
/// grows toward world -y).
fn look_at(eye: Vec3, target: Vec3, focal_px: f64, width: u32, height: u32) -> Camera {
    let forward = (target - eye).normalize();
    let world_up = if forward.y.abs() > 0.99 { Vec3::new(1.0, 0.0, 0.0) } else { Vec3::new(0.0, 1.0, 0.0) };
    let right = forward.cross(&world_up).normalize();
    let down = forward.cross(&right).normalize();
    // Rows of R are the camera axes expressed in world coordinates.
    let rotation = Mat3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
    let translation = -(rotation * eye);
    Camera {
        rotation,
        translation,
        fx: focal_px,
        fy: focal_px,
        cx: (width as f64 - 1.0) / 2.0,
        cy: (height as f64 - 1.0) / 2.0,
        width,
        height,
    }
}
