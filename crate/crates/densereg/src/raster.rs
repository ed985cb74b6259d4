//! Deterministic software rasterizer producing per-view pointmaps and
//! normal maps with analytic gradients with respect to mesh vertices.
//!
//! Rasterization is hard z-buffered with perspective-correct barycentric
//! interpolation, so every covered pixel's world-space point lies exactly
//! on the winning triangle along that pixel's viewing ray. Gradients flow
//! through the interpolation weights' dependence on the projected vertices
//! and through the face normal; pixel-to-face assignment is frozen, so
//! occlusion and coverage changes carry zero gradient. Back faces are not
//! culled. Output is bitwise deterministic regardless of thread count:
//! triangles are binned to fixed tiles and each tile is rasterized
//! sequentially in face order.

use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::camera::{Camera, Z_NEAR_MM};
use crate::container::{Array, Container, ContainerError};
use crate::model::DEGENERATE_AREA_MM2;
use crate::Vec3;

pub const MAPS_MAGIC: &str = "DREG-MAPS";

/// Minimum projected triangle area (px²) for rasterization.
const MIN_PROJECTED_AREA_PX2: f64 = 1e-12;

/// Depth ties within this many mm resolve to the lower face index.
const DEPTH_TIE_MM: f64 = 1e-9;

const TILE: usize = 32;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Container(#[from] ContainerError),
}

pub type Result<T> = std::result::Result<T, RasterError>;

/// Per-view rendered geometry maps, row-major `h × w`.
#[derive(Debug, Clone, PartialEq)]
pub struct GeoMaps {
    pub width: usize,
    pub height: usize,
    /// World-space surface point per covered pixel (mm).
    pub pointmap: Vec<Vec3>,
    /// World-space unit face normal per covered pixel.
    pub normalmap: Vec<Vec3>,
    pub mask: Vec<bool>,
    /// Winning triangle index, −1 where empty.
    pub face_id: Vec<i32>,
    /// Perspective-correct barycentric weights of the winning triangle.
    pub bary: Vec<[f64; 3]>,
}

impl GeoMaps {
    pub fn empty(width: usize, height: usize) -> GeoMaps {
        let n = width * height;
        GeoMaps {
            width,
            height,
            pointmap: vec![Vec3::zeros(); n],
            normalmap: vec![Vec3::zeros(); n],
            mask: vec![false; n],
            face_id: vec![-1; n],
            bary: vec![[0.0; 3]; n],
        }
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn covered(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(MAPS_MAGIC);
        c.set_dim("height", self.height as i64);
        c.set_dim("width", self.width as i64);
        let (h, w) = (self.height, self.width);
        c.insert("pointmap", Array::f64(vec![h, w, 3], flatten(&self.pointmap)));
        c.insert("normalmap", Array::f64(vec![h, w, 3], flatten(&self.normalmap)));
        c.insert("mask", Array::u8(vec![h, w], self.mask.iter().map(|&m| m as u8).collect()));
        c.insert("face_id", Array::i32(vec![h, w], self.face_id.clone()));
        c.insert(
            "bary",
            Array::f64(vec![h, w, 3], self.bary.iter().flat_map(|b| b.iter().copied()).collect()),
        );
        c
    }

    pub fn from_container(c: &Container) -> Result<GeoMaps> {
        let h = c.dim("height")? as usize;
        let w = c.dim("width")? as usize;
        let n = h * w;
        let (pshape, pts) = c.f64s("pointmap")?;
        let (nshape, nrm) = c.f64s("normalmap")?;
        let (_, mask) = c.u8s("mask")?;
        let (_, face_id) = c.i32s("face_id")?;
        let (_, bary) = c.f64s("bary")?;
        if pshape != [h, w, 3]
            || nshape != [h, w, 3]
            || mask.len() != n
            || face_id.len() != n
            || bary.len() != 3 * n
        {
            return Err(RasterError::ShapeMismatch("geometry map arrays".into()));
        }
        Ok(GeoMaps {
            width: w,
            height: h,
            pointmap: unflatten(&pts),
            normalmap: unflatten(&nrm),
            mask: mask.iter().map(|&m| m != 0).collect(),
            face_id,
            bary: bary.chunks_exact(3).map(|b| [b[0], b[1], b[2]]).collect(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(self.to_container().write_file(path)?)
    }

    pub fn load(path: &Path) -> Result<GeoMaps> {
        GeoMaps::from_container(&Container::read_file(path, Some(MAPS_MAGIC))?)
    }
}

fn flatten(v: &[Vec3]) -> Vec<f64> {
    v.iter().flat_map(|p| [p.x, p.y, p.z]).collect()
}

fn unflatten(v: &[f64]) -> Vec<Vec3> {
    v.chunks_exact(3).map(|p| Vec3::new(p[0], p[1], p[2])).collect()
}

/// Scales camera intrinsics from the native resolution to a render target,
/// keeping the pixel-center convention.
pub fn scale_camera(cam: &Camera, width: usize, height: usize) -> Camera {
    let sx = width as f64 / cam.width as f64;
    let sy = height as f64 / cam.height as f64;
    Camera {
        fx: cam.fx * sx,
        fy: cam.fy * sy,
        cx: (cam.cx + 0.5) * sx - 0.5,
        cy: (cam.cy + 0.5) * sy - 0.5,
        width: width as u32,
        height: height as u32,
        ..cam.clone()
    }
}

struct ProjectedVertex {
    u: f64,
    v: f64,
    z: f64,
    visible: bool,
}

fn project_vertices(cam: &Camera, vertices: &[Vec3]) -> Vec<ProjectedVertex> {
    vertices
        .iter()
        .map(|p| {
            let q = cam.to_camera_point(p);
            if q.z <= Z_NEAR_MM {
                ProjectedVertex { u: 0.0, v: 0.0, z: q.z, visible: false }
            } else {
                ProjectedVertex {
                    u: cam.fx * q.x / q.z + cam.cx,
                    v: cam.fy * q.y / q.z + cam.cy,
                    z: q.z,
                    visible: true,
                }
            }
        })
        .collect()
}

fn world_face_normal(vertices: &[Vec3], f: &[u32; 3]) -> Option<Vec3> {
    let (a, b, c) = (vertices[f[0] as usize], vertices[f[1] as usize], vertices[f[2] as usize]);
    let cross = (b - a).cross(&(c - a));
    let norm = cross.norm();
    if norm * 0.5 < DEGENERATE_AREA_MM2 {
        None
    } else {
        Some(cross / norm)
    }
}

/// Renders world-space point and normal maps at `width × height`. The
/// camera's intrinsics are rescaled to the target resolution. Triangles
/// with a vertex at or behind the near plane are skipped (no clipping);
/// degenerate faces are excluded rather than erroring.
pub fn render(
    vertices: &[Vec3],
    faces: &[[u32; 3]],
    cam: &Camera,
    width: usize,
    height: usize,
) -> GeoMaps {
    let cam = scale_camera(cam, width, height);
    let proj = project_vertices(&cam, vertices);

    let tiles_x = width.div_ceil(TILE);
    let tiles_y = height.div_ceil(TILE);
    let mut bins: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
    let mut face_normals: Vec<Vec3> = vec![Vec3::zeros(); faces.len()];

    for (fi, f) in faces.iter().enumerate() {
        let (p0, p1, p2) = (&proj[f[0] as usize], &proj[f[1] as usize], &proj[f[2] as usize]);
        if !(p0.visible && p1.visible && p2.visible) {
            continue;
        }
        let area2 = (p1.u - p0.u) * (p2.v - p0.v) - (p2.u - p0.u) * (p1.v - p0.v);
        if area2.abs() * 0.5 <= MIN_PROJECTED_AREA_PX2 {
            continue;
        }
        let Some(n) = world_face_normal(vertices, f) else { continue };
        face_normals[fi] = n;

        let lo_x = p0.u.min(p1.u).min(p2.u).ceil();
        let hi_x = p0.u.max(p1.u).max(p2.u).floor().min(width as f64 - 1.0);
        let lo_y = p0.v.min(p1.v).min(p2.v).ceil();
        let hi_y = p0.v.max(p1.v).max(p2.v).floor().min(height as f64 - 1.0);
        if hi_x < 0.0 || hi_y < 0.0 || lo_x > hi_x || lo_y > hi_y {
            continue;
        }
        let (min_x, max_x) = (lo_x.max(0.0) as usize, hi_x as usize);
        let (min_y, max_y) = (lo_y.max(0.0) as usize, hi_y as usize);
        for ty in min_y / TILE..=max_y / TILE {
            for tx in min_x / TILE..=max_x / TILE {
                bins[ty * tiles_x + tx].push(fi as u32);
            }
        }
    }

    let mut maps = GeoMaps::empty(width, height);
    // Tiles own disjoint pixel rectangles, so parallel rasterization with a
    // per-tile sequential face loop is deterministic for any thread count.
    let tile_results: Vec<(usize, TileOutput)> = bins
        .par_iter()
        .enumerate()
        .filter(|(_, bin)| !bin.is_empty())
        .map(|(tile_idx, bin)| {
            let tx = tile_idx % tiles_x;
            let ty = tile_idx / tiles_x;
            (tile_idx, rasterize_tile(bin, faces, vertices, &proj, &face_normals, tx, ty, width, height))
        })
        .collect();

    for (tile_idx, out) in tile_results {
        let tx = tile_idx % tiles_x;
        let ty = tile_idx / tiles_x;
        let x0 = tx * TILE;
        let y0 = ty * TILE;
        let tw = TILE.min(width - x0);
        for (row, y) in (y0..(y0 + TILE).min(height)).enumerate() {
            for col in 0..tw {
                let src = row * tw + col;
                if out.face_id[src] < 0 {
                    continue;
                }
                let dst = y * width + x0 + col;
                maps.mask[dst] = true;
                maps.face_id[dst] = out.face_id[src];
                maps.bary[dst] = out.bary[src];
                maps.pointmap[dst] = out.point[src];
                maps.normalmap[dst] = out.normal[src];
            }
        }
    }
    maps
}

struct TileOutput {
    face_id: Vec<i32>,
    bary: Vec<[f64; 3]>,
    point: Vec<Vec3>,
    normal: Vec<Vec3>,
}

#[allow(clippy::too_many_arguments)]
fn rasterize_tile(
    bin: &[u32],
    faces: &[[u32; 3]],
    vertices: &[Vec3],
    proj: &[ProjectedVertex],
    face_normals: &[Vec3],
    tx: usize,
    ty: usize,
    width: usize,
    height: usize,
) -> TileOutput {
    let x0 = tx * TILE;
    let y0 = ty * TILE;
    let tw = TILE.min(width - x0);
    let th = TILE.min(height - y0);
    let n = tw * th;
    let mut out = TileOutput {
        face_id: vec![-1; n],
        bary: vec![[0.0; 3]; n],
        point: vec![Vec3::zeros(); n],
        normal: vec![Vec3::zeros(); n],
    };
    let mut depth = vec![f64::INFINITY; n];

    for &fi in bin {
        let f = &faces[fi as usize];
        let (p0, p1, p2) = (&proj[f[0] as usize], &proj[f[1] as usize], &proj[f[2] as usize]);
        let area2 = (p1.u - p0.u) * (p2.v - p0.v) - (p2.u - p0.u) * (p1.v - p0.v);

        let lo_x = p0.u.min(p1.u).min(p2.u).ceil().max(x0 as f64);
        let hi_x = p0.u.max(p1.u).max(p2.u).floor().min((x0 + tw - 1) as f64);
        let lo_y = p0.v.min(p1.v).min(p2.v).ceil().max(y0 as f64);
        let hi_y = p0.v.max(p1.v).max(p2.v).floor().min((y0 + th - 1) as f64);
        if lo_x > hi_x || lo_y > hi_y {
            continue;
        }
        let (fx0, fx1) = (lo_x as usize, hi_x as usize);
        let (fy0, fy1) = (lo_y as usize, hi_y as usize);

        for y in fy0..=fy1 {
            for x in fx0..=fx1 {
                let (xf, yf) = (x as f64, y as f64);
                let w0 = (p1.u - xf) * (p2.v - yf) - (p2.u - xf) * (p1.v - yf);
                let w1 = (p2.u - xf) * (p0.v - yf) - (p0.u - xf) * (p2.v - yf);
                let w2 = (p0.u - xf) * (p1.v - yf) - (p1.u - xf) * (p0.v - yf);
                let (l0, l1, l2) = (w0 / area2, w1 / area2, w2 / area2);
                if l0 < 0.0 || l1 < 0.0 || l2 < 0.0 {
                    continue;
                }
                // Perspective-correct weights and depth.
                let t0 = l0 / p0.z;
                let t1 = l1 / p1.z;
                let t2 = l2 / p2.z;
                let t_sum = t0 + t1 + t2;
                let z = 1.0 / t_sum;

                let idx = (y - y0) * tw + (x - x0);
                if z < depth[idx] - DEPTH_TIE_MM {
                    // Bins are scanned in ascending face order, so on a tie
                    // the incumbent already has the lower index.
                    depth[idx] = z;
                    let b = [t0 / t_sum, t1 / t_sum, t2 / t_sum];
                    out.face_id[idx] = fi as i32;
                    out.bary[idx] = b;
                    out.point[idx] = vertices[f[0] as usize] * b[0]
                        + vertices[f[1] as usize] * b[1]
                        + vertices[f[2] as usize] * b[2];
                    out.normal[idx] = face_normals[fi as usize];
                }
            }
        }
    }
    out
}

/// Pulls upstream per-pixel gradients back to the mesh vertices. Pixel
/// assignment comes from `maps`; unmasked pixels are ignored, so upstream
/// gradients there never contribute.
pub fn render_backward(
    maps: &GeoMaps,
    d_pointmap: &[Vec3],
    d_normalmap: &[Vec3],
    vertices: &[Vec3],
    faces: &[[u32; 3]],
    cam: &Camera,
) -> Result<Vec<Vec3>> {
    if d_pointmap.len() != maps.len() || d_normalmap.len() != maps.len() {
        return Err(RasterError::ShapeMismatch(format!(
            "upstream gradients have {} / {} entries, maps have {}",
            d_pointmap.len(),
            d_normalmap.len(),
            maps.len()
        )));
    }
    let cam = scale_camera(cam, maps.width, maps.height);
    let proj = project_vertices(&cam, vertices);
    let rt = cam.rotation.transpose();
    let mut grad = vec![Vec3::zeros(); vertices.len()];

    for y in 0..maps.height {
        for x in 0..maps.width {
            let idx = y * maps.width + x;
            if !maps.mask[idx] {
                continue;
            }
            let g_p = d_pointmap[idx];
            let g_n = d_normalmap[idx];
            if g_p == Vec3::zeros() && g_n == Vec3::zeros() {
                continue;
            }
            let f = &faces[maps.face_id[idx] as usize];
            let vid = [f[0] as usize, f[1] as usize, f[2] as usize];
            let pw = [vertices[vid[0]], vertices[vid[1]], vertices[vid[2]]];

            if g_p != Vec3::zeros() {
                let pr = [&proj[vid[0]], &proj[vid[1]], &proj[vid[2]]];
                let (xf, yf) = (x as f64, y as f64);
                let u = [pr[0].u, pr[1].u, pr[2].u];
                let v = [pr[0].v, pr[1].v, pr[2].v];
                let z = [pr[0].z, pr[1].z, pr[2].z];
                let w = [
                    (u[1] - xf) * (v[2] - yf) - (u[2] - xf) * (v[1] - yf),
                    (u[2] - xf) * (v[0] - yf) - (u[0] - xf) * (v[2] - yf),
                    (u[0] - xf) * (v[1] - yf) - (u[1] - xf) * (v[0] - yf),
                ];
                let area2 = w[0] + w[1] + w[2];
                let l = [w[0] / area2, w[1] / area2, w[2] / area2];
                let t = [l[0] / z[0], l[1] / z[1], l[2] / z[2]];
                let t_sum = t[0] + t[1] + t[2];
                let b = [t[0] / t_sum, t[1] / t_sum, t[2] / t_sum];

                // p = Σ b_i P_i: direct term, then back through b → t → λ → w.
                let gb = [g_p.dot(&pw[0]), g_p.dot(&pw[1]), g_p.dot(&pw[2])];
                let dot_bb: f64 = (0..3).map(|i| b[i] * gb[i]).sum();
                let gt = [(gb[0] - dot_bb) / t_sum, (gb[1] - dot_bb) / t_sum, (gb[2] - dot_bb) / t_sum];
                let gl = [gt[0] / z[0], gt[1] / z[1], gt[2] / z[2]];
                let gz = [
                    -gt[0] * l[0] / (z[0] * z[0]),
                    -gt[1] * l[1] / (z[1] * z[1]),
                    -gt[2] * l[2] / (z[2] * z[2]),
                ];
                let dot_ll: f64 = (0..3).map(|i| l[i] * gl[i]).sum();
                let gw = [(gl[0] - dot_ll) / area2, (gl[1] - dot_ll) / area2, (gl[2] - dot_ll) / area2];

                let du = [
                    gw[1] * -(v[2] - yf) + gw[2] * (v[1] - yf),
                    gw[0] * (v[2] - yf) + gw[2] * -(v[0] - yf),
                    gw[0] * -(v[1] - yf) + gw[1] * (v[0] - yf),
                ];
                let dv = [
                    gw[1] * (u[2] - xf) + gw[2] * -(u[1] - xf),
                    gw[0] * -(u[2] - xf) + gw[2] * (u[0] - xf),
                    gw[0] * (u[1] - xf) + gw[1] * -(u[0] - xf),
                ];

                for i in 0..3 {
                    grad[vid[i]] += g_p * b[i];
                    let q = cam.to_camera_point(&pw[i]);
                    let gq = Vec3::new(
                        du[i] * cam.fx / z[i],
                        dv[i] * cam.fy / z[i],
                        -du[i] * cam.fx * q.x / (z[i] * z[i]) - dv[i] * cam.fy * q.y / (z[i] * z[i])
                            + gz[i],
                    );
                    grad[vid[i]] += rt * gq;
                }
            }

            if g_n != Vec3::zeros() {
                let a = pw[1] - pw[0];
                let bb = pw[2] - pw[0];
                let cross = a.cross(&bb);
                let norm = cross.norm();
                if norm * 0.5 >= DEGENERATE_AREA_MM2 {
                    let nrm = cross / norm;
                    let gc = (g_n - nrm * nrm.dot(&g_n)) / norm;
                    let ga = bb.cross(&gc);
                    let gb2 = gc.cross(&a);
                    grad[vid[1]] += ga;
                    grad[vid[2]] += gb2;
                    grad[vid[0]] -= ga + gb2;
                }
            }
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::ring_rig;
    use crate::model::icosphere;
    use crate::Mat3;
    use approx::assert_relative_eq;

    fn frontal_camera() -> Camera {
        Camera {
            rotation: Mat3::identity(),
            translation: Vec3::new(0.0, 0.0, 500.0),
            fx: 400.0,
            fy: 400.0,
            cx: 31.5,
            cy: 31.5,
            width: 64,
            height: 64,
        }
    }

    fn screen_parallel_triangle() -> Vec<Vec3> {
        vec![Vec3::new(-40.0, -40.0, 0.0), Vec3::new(40.0, -40.0, 0.0), Vec3::new(0.0, 50.0, 0.0)]
    }

    #[test]
    fn single_triangle_pointmap_lies_on_plane() {
        let verts = screen_parallel_triangle();
        let maps = render(&verts, &[[0, 1, 2]], &frontal_camera(), 64, 64);
        assert!(maps.covered() > 100);
        for idx in 0..maps.len() {
            if maps.mask[idx] {
                assert!(maps.pointmap[idx].z.abs() < 1e-9, "point off plane: {:?}", maps.pointmap[idx]);
                let b = maps.bary[idx];
                assert!((b[0] + b[1] + b[2] - 1.0).abs() < 1e-12);
                assert!(b.iter().all(|&x| x >= -1e-6));
                assert_relative_eq!(maps.normalmap[idx].norm(), 1.0, epsilon = 1e-12);
            } else {
                assert_eq!(maps.face_id[idx], -1);
            }
        }
    }

    #[test]
    fn nearer_triangle_wins_z_buffer() {
        let mut verts = screen_parallel_triangle();
        verts.extend(screen_parallel_triangle().iter().map(|p| p + Vec3::new(0.0, 0.0, -100.0)));
        let faces = [[0u32, 1, 2], [3, 4, 5]];
        let maps = render(&verts, &faces, &frontal_camera(), 64, 64);
        assert!(maps.covered() > 100);
        // The camera sits at world z = -500 looking toward +z, so the
        // triangle shifted to z = -100 is closer and must win everywhere.
        for idx in 0..maps.len() {
            if maps.mask[idx] {
                assert_eq!(maps.face_id[idx], 1);
            }
        }
    }

    #[test]
    fn stacked_equal_depth_resolves_to_lower_face() {
        let verts = screen_parallel_triangle();
        let faces = [[0u32, 1, 2], [0, 1, 2]];
        let maps = render(&verts, &faces, &frontal_camera(), 64, 64);
        assert!(maps.covered() > 100);
        for idx in 0..maps.len() {
            if maps.mask[idx] {
                assert_eq!(maps.face_id[idx], 0);
            }
        }
    }

    #[test]
    fn masked_pixels_reproject_into_their_pixel() {
        let (unit, faces) = icosphere(2);
        let verts: Vec<Vec3> = unit.iter().map(|p| p * 100.0).collect();
        let rig = ring_rig(3, Vec3::zeros(), 600.0, 500.0, 128, 128);
        for cam in &rig.cameras {
            let maps = render(&verts, &faces, cam, 128, 128);
            let scaled = scale_camera(cam, 128, 128);
            assert!(maps.covered() > 500);
            for y in 0..128usize {
                for x in 0..128usize {
                    let idx = y * 128 + x;
                    if !maps.mask[idx] {
                        continue;
                    }
                    let (uv, ok) = scaled.project_point(&maps.pointmap[idx]);
                    assert!(ok);
                    assert!(
                        (uv[0] - x as f64).abs() <= 0.5 && (uv[1] - y as f64).abs() <= 0.5,
                        "pixel ({x},{y}) reprojected to {uv:?}"
                    );
                }
            }
        }
    }

    #[test]
    fn icosphere_pointmap_radii_match_sphere() {
        let (unit, faces) = icosphere(3);
        let radius = 100.0;
        let verts: Vec<Vec3> = unit.iter().map(|p| p * radius).collect();
        let cam = Camera {
            rotation: Mat3::identity(),
            translation: Vec3::new(0.0, 0.0, 400.0),
            fx: 300.0,
            fy: 300.0,
            cx: 63.5,
            cy: 63.5,
            width: 128,
            height: 128,
        };
        let maps = render(&verts, &faces, &cam, 128, 128);
        assert!(maps.covered() > 2000);
        let mut rel_err_sum = 0.0;
        let mut count = 0usize;
        for idx in 0..maps.len() {
            if maps.mask[idx] {
                rel_err_sum += (maps.pointmap[idx].norm() - radius).abs() / radius;
                count += 1;
            }
        }
        let mean_rel = rel_err_sum / count as f64;
        assert!(mean_rel < 0.005, "mean relative radius error {mean_rel}");
    }

    #[test]
    fn render_is_deterministic_across_thread_counts() {
        let (unit, faces) = icosphere(3);
        let verts: Vec<Vec3> = unit.iter().map(|p| p * 90.0).collect();
        let cam = frontal_camera();
        let reference = render(&verts, &faces, &cam, 96, 96);
        for threads in [1usize, 2, 4, 8] {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            let maps = pool.install(|| render(&verts, &faces, &cam, 96, 96));
            assert!(maps == reference, "thread count {threads} changed output");
        }
    }

    #[test]
    fn empty_render_has_all_false_mask() {
        let maps = render(&[], &[], &frontal_camera(), 32, 32);
        assert_eq!(maps.covered(), 0);
        // A mesh entirely behind the camera renders empty too.
        let verts: Vec<Vec3> =
            screen_parallel_triangle().iter().map(|p| p + Vec3::new(0.0, 0.0, -2000.0)).collect();
        let maps = render(&verts, &[[0, 1, 2]], &frontal_camera(), 32, 32);
        assert_eq!(maps.covered(), 0);
    }

    #[test]
    fn maps_container_round_trip() {
        let verts = screen_parallel_triangle();
        let maps = render(&verts, &[[0, 1, 2]], &frontal_camera(), 48, 48);
        let bytes = maps.to_container().to_bytes();
        let maps2 =
            GeoMaps::from_container(&Container::from_bytes(&bytes, Some(MAPS_MAGIC)).unwrap()).unwrap();
        assert_eq!(maps, maps2);
        assert_eq!(bytes, maps2.to_container().to_bytes());
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_vertex_gradient() {
        let verts = screen_parallel_triangle();
        let maps = render(&verts, &[[0, 1, 2]], &frontal_camera(), 48, 48);
        let zeros = vec![Vec3::zeros(); maps.len()];
        let grad =
            render_backward(&maps, &zeros, &zeros, &verts, &[[0, 1, 2]], &frontal_camera()).unwrap();
        assert!(grad.iter().all(|g| *g == Vec3::zeros()));
    }

    #[test]
    fn backward_rejects_wrong_shapes() {
        let verts = screen_parallel_triangle();
        let maps = render(&verts, &[[0, 1, 2]], &frontal_camera(), 48, 48);
        let short = vec![Vec3::zeros(); 5];
        let ok = vec![Vec3::zeros(); maps.len()];
        assert!(matches!(
            render_backward(&maps, &short, &ok, &verts, &[[0, 1, 2]], &frontal_camera()),
            Err(RasterError::ShapeMismatch(_))
        ));
    }

    /// Central finite differences on `L = Σ_masked (P·wp + N·wn)` with the
    /// pixel set and assignment locked to the base render; coordinates that
    /// change any pixel's face assignment are skipped.
    fn fd_check(verts: &[Vec3], faces: &[[u32; 3]], cam: &Camera, wp: Vec3, wn: Vec3, res: usize) {
        let base = render(verts, faces, cam, res, res);
        assert!(base.covered() > 0);
        let d_point = vec![wp; base.len()];
        let d_norm = vec![wn; base.len()];
        let grad = render_backward(&base, &d_point, &d_norm, verts, faces, cam).unwrap();

        let loss = |vs: &[Vec3]| -> Option<f64> {
            let m = render(vs, faces, cam, res, res);
            if m.face_id != base.face_id {
                return None; // assignment changed; finite differences invalid
            }
            let mut acc = 0.0;
            for idx in 0..m.len() {
                if m.mask[idx] {
                    acc += m.pointmap[idx].dot(&wp) + m.normalmap[idx].dot(&wn);
                }
            }
            Some(acc)
        };

        let h = 1e-3;
        let mut checked = 0;
        for vi in 0..verts.len() {
            for axis in 0..3 {
                let mut plus = verts.to_vec();
                plus[vi][axis] += h;
                let mut minus = verts.to_vec();
                minus[vi][axis] -= h;
                let (Some(lp), Some(lm)) = (loss(&plus), loss(&minus)) else { continue };
                let fd = (lp - lm) / (2.0 * h);
                let an = grad[vi][axis];
                let denom = fd.abs().max(an.abs()).max(1e-6);
                assert!(
                    (fd - an).abs() / denom < 1e-4,
                    "vertex {vi} axis {axis}: fd {fd} vs analytic {an}"
                );
                checked += 1;
            }
        }
        assert!(checked >= verts.len() * 2, "too few stable coordinates checked: {checked}");
    }

    #[test]
    fn pointmap_gradient_matches_finite_differences() {
        let verts =
            vec![Vec3::new(-35.0, -30.0, 5.0), Vec3::new(38.0, -32.0, -12.0), Vec3::new(2.0, 45.0, 20.0)];
        fd_check(&verts, &[[0, 1, 2]], &frontal_camera(), Vec3::new(1.0, -0.5, 0.25), Vec3::zeros(), 48);
    }

    #[test]
    fn normalmap_gradient_matches_finite_differences() {
        let verts =
            vec![Vec3::new(-35.0, -30.0, 5.0), Vec3::new(38.0, -32.0, -12.0), Vec3::new(2.0, 45.0, 20.0)];
        fd_check(&verts, &[[0, 1, 2]], &frontal_camera(), Vec3::zeros(), Vec3::new(0.7, 0.3, -0.4), 48);
    }

    #[test]
    fn combined_gradient_on_two_triangles() {
        let verts = vec![
            Vec3::new(-40.0, -35.0, 0.0),
            Vec3::new(40.0, -35.0, 10.0),
            Vec3::new(0.0, 45.0, -5.0),
            Vec3::new(55.0, 40.0, 25.0),
        ];
        let faces = [[0u32, 1, 2], [1, 3, 2]];
        fd_check(&verts, &faces, &frontal_camera(), Vec3::new(0.5, 0.8, -0.3), Vec3::new(-0.2, 0.4, 0.6), 48);
    }
}
