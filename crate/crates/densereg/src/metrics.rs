//! Evaluation: exact point-to-surface distances (BVH-accelerated),
//! regional statistics, mesh-quality counters and error heatmaps.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::Camera;
use crate::raster::scale_camera;
use crate::Vec3;

/// Name of the synthetic pooled region: every non-excluded region minus
/// every excluded vertex set.
pub const FULL_REGION: &str = "full_no_scalp";

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("mesh has no faces")]
    EmptyMesh,
    #[error("unknown region name {0:?}")]
    UnknownRegion(String),
    #[error("region {region:?} references vertex {index} but the mesh has {n_vertices}")]
    BadIndex { region: String, index: u32, n_vertices: usize },
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("mask schema violation: {0}")]
    Schema(String),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

// ---------------------------------------------------------------------------
// Closest point on triangle

/// Closest point to `p` on triangle `(a, b, c)` with its barycentric
/// coordinates. Voronoi-region walk; degenerate triangles fall back to the
/// closest edge point.
pub fn closest_point_on_triangle(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> (Vec3, [f64; 3]) {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return (*a, [1.0, 0.0, 0.0]);
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return (*b, [0.0, 1.0, 0.0]);
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let denom = d1 - d3;
        if denom <= f64::MIN_POSITIVE {
            return closest_point_degenerate(p, a, b, c);
        }
        let v = d1 / denom;
        return (a + ab * v, [1.0 - v, v, 0.0]);
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return (*c, [0.0, 0.0, 1.0]);
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let denom = d2 - d6;
        if denom <= f64::MIN_POSITIVE {
            return closest_point_degenerate(p, a, b, c);
        }
        let w = d2 / denom;
        return (a + ac * w, [1.0 - w, 0.0, w]);
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let denom = (d4 - d3) + (d5 - d6);
        if denom <= f64::MIN_POSITIVE {
            return closest_point_degenerate(p, a, b, c);
        }
        let w = (d4 - d3) / denom;
        return (b + (c - b) * w, [0.0, 1.0 - w, w]);
    }
    let sum = va + vb + vc;
    if !(sum > f64::MIN_POSITIVE) || !sum.is_finite() {
        return closest_point_degenerate(p, a, b, c);
    }
    let denom = 1.0 / sum;
    let v = vb * denom;
    let w = vc * denom;
    (a + ab * v + ac * w, [1.0 - v - w, v, w])
}

fn closest_point_segment(p: &Vec3, a: &Vec3, b: &Vec3) -> (Vec3, f64) {
    let ab = b - a;
    let len2 = ab.norm_squared();
    if len2 <= f64::MIN_POSITIVE {
        return (*a, 0.0);
    }
    let t = ((p - a).dot(&ab) / len2).clamp(0.0, 1.0);
    (a + ab * t, t)
}

fn closest_point_degenerate(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> (Vec3, [f64; 3]) {
    let (pa, ta) = closest_point_segment(p, a, b);
    let (pb, tb) = closest_point_segment(p, b, c);
    let (pc, tc) = closest_point_segment(p, c, a);
    let da = (p - pa).norm_squared();
    let db = (p - pb).norm_squared();
    let dc = (p - pc).norm_squared();
    if da <= db && da <= dc {
        (pa, [1.0 - ta, ta, 0.0])
    } else if db <= dc {
        (pb, [0.0, 1.0 - tb, tb])
    } else {
        (pc, [tc, 0.0, 1.0 - tc])
    }
}

// ---------------------------------------------------------------------------
// BVH

#[derive(Debug, Clone, Copy)]
pub struct ClosestHit {
    pub distance2: f64,
    /// Original face index.
    pub face: u32,
    pub point: Vec3,
    pub bary: [f64; 3],
}

#[derive(Debug, Clone)]
struct BvhNode {
    min: Vec3,
    max: Vec3,
    /// Inner node: children at `left` and `left + 1`, `count == 0`.
    /// Leaf: triangle range `start..start + count` into `order`.
    left: u32,
    start: u32,
    count: u32,
}

/// Median-split AABB tree over triangles for exact closest-point queries.
#[derive(Debug, Clone)]
pub struct TriangleBvh {
    nodes: Vec<BvhNode>,
    order: Vec<u32>,
    tris: Vec<[Vec3; 3]>,
}

const LEAF_SIZE: usize = 8;

impl TriangleBvh {
    pub fn build(vertices: &[Vec3], faces: &[[u32; 3]]) -> Result<TriangleBvh> {
        if faces.is_empty() {
            return Err(MetricsError::EmptyMesh);
        }
        let tris: Vec<[Vec3; 3]> = faces
            .iter()
            .map(|f| [vertices[f[0] as usize], vertices[f[1] as usize], vertices[f[2] as usize]])
            .collect();
        let centroids: Vec<Vec3> = tris.iter().map(|t| (t[0] + t[1] + t[2]) / 3.0).collect();
        let mut order: Vec<u32> = (0..faces.len() as u32).collect();
        let mut bvh = TriangleBvh { nodes: Vec::new(), order: Vec::new(), tris };
        bvh.nodes.push(BvhNode { min: Vec3::zeros(), max: Vec3::zeros(), left: 0, start: 0, count: 0 });
        bvh.split(0, &mut order, 0, faces.len(), &centroids);
        bvh.order = order;
        Ok(bvh)
    }

    fn bounds(&self, order: &[u32], start: usize, end: usize) -> (Vec3, Vec3) {
        let mut min = Vec3::repeat(f64::INFINITY);
        let mut max = Vec3::repeat(f64::NEG_INFINITY);
        for &fi in &order[start..end] {
            for p in &self.tris[fi as usize] {
                min = min.inf(p);
                max = max.sup(p);
            }
        }
        (min, max)
    }

    fn split(&mut self, node: usize, order: &mut [u32], start: usize, end: usize, centroids: &[Vec3]) {
        let (min, max) = self.bounds(order, start, end);
        self.nodes[node].min = min;
        self.nodes[node].max = max;
        let n = end - start;
        if n <= LEAF_SIZE {
            self.nodes[node].start = start as u32;
            self.nodes[node].count = n as u32;
            return;
        }
        let extent = max - min;
        let axis = if extent.x >= extent.y && extent.x >= extent.z {
            0
        } else if extent.y >= extent.z {
            1
        } else {
            2
        };
        let mid = start + n / 2;
        order[start..end].select_nth_unstable_by(n / 2, |&a, &b| {
            centroids[a as usize][axis].total_cmp(&centroids[b as usize][axis]).then(a.cmp(&b))
        });

        let left = self.nodes.len() as u32;
        self.nodes[node].left = left;
        self.nodes[node].count = 0;
        self.nodes.push(BvhNode { min: Vec3::zeros(), max: Vec3::zeros(), left: 0, start: 0, count: 0 });
        self.nodes.push(BvhNode { min: Vec3::zeros(), max: Vec3::zeros(), left: 0, start: 0, count: 0 });
        self.split(left as usize, order, start, mid, centroids);
        self.split(left as usize + 1, order, mid, end, centroids);
    }

    fn aabb_distance2(&self, node: &BvhNode, p: &Vec3) -> f64 {
        let mut d2 = 0.0;
        for axis in 0..3 {
            let v = p[axis];
            let lo = node.min[axis];
            let hi = node.max[axis];
            let d = if v < lo {
                lo - v
            } else if v > hi {
                v - hi
            } else {
                0.0
            };
            d2 += d * d;
        }
        d2
    }

    /// Exact closest point over all triangles. Distance ties resolve to the
    /// lowest face index, matching an ascending brute-force scan.
    pub fn closest(&self, p: &Vec3) -> ClosestHit {
        let mut best = ClosestHit {
            distance2: f64::INFINITY,
            face: u32::MAX,
            point: Vec3::zeros(),
            bary: [0.0; 3],
        };
        let mut stack: Vec<u32> = vec![0];
        while let Some(ni) = stack.pop() {
            let node = &self.nodes[ni as usize];
            if self.aabb_distance2(node, p) > best.distance2 {
                continue;
            }
            if node.count > 0 {
                for &fi in &self.order[node.start as usize..(node.start + node.count) as usize] {
                    let t = &self.tris[fi as usize];
                    let (cp, bary) = closest_point_on_triangle(p, &t[0], &t[1], &t[2]);
                    let d2 = (p - cp).norm_squared();
                    if d2 < best.distance2 || (d2 == best.distance2 && fi < best.face) {
                        best = ClosestHit { distance2: d2, face: fi, point: cp, bary };
                    }
                }
            } else {
                let l = node.left as usize;
                let dl = self.aabb_distance2(&self.nodes[l], p);
                let dr = self.aabb_distance2(&self.nodes[l + 1], p);
                // Nearer child goes on top of the stack.
                if dl <= dr {
                    stack.push(node.left + 1);
                    stack.push(node.left);
                } else {
                    stack.push(node.left);
                    stack.push(node.left + 1);
                }
            }
        }
        best
    }
}

/// Point-to-surface distance (mm) from each point to the mesh.
pub fn point_to_surface(points: &[Vec3], vertices: &[Vec3], faces: &[[u32; 3]]) -> Result<Vec<f64>> {
    let bvh = TriangleBvh::build(vertices, faces)?;
    Ok(points.par_iter().map(|p| bvh.closest(p).distance2.sqrt()).collect())
}

/// Closest-point hits for each query point (used by losses needing the
/// triangle assignment and barycentric foot point).
pub fn closest_hits(points: &[Vec3], vertices: &[Vec3], faces: &[[u32; 3]]) -> Result<Vec<ClosestHit>> {
    let bvh = TriangleBvh::build(vertices, faces)?;
    Ok(points.par_iter().map(|p| bvh.closest(p)).collect())
}

// ---------------------------------------------------------------------------
// Regions

/// Named vertex-index sets over the canonical topology plus the region
/// names excluded from pooled statistics.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RegionMasks {
    pub regions: BTreeMap<String, Vec<u32>>,
    pub excluded: Vec<String>,
}

impl RegionMasks {
    pub fn validate(&self, n_vertices: usize) -> Result<()> {
        for (name, indices) in &self.regions {
            for &i in indices {
                if i as usize >= n_vertices {
                    return Err(MetricsError::BadIndex { region: name.clone(), index: i, n_vertices });
                }
            }
        }
        for name in &self.excluded {
            if !self.regions.contains_key(name) {
                return Err(MetricsError::UnknownRegion(name.clone()));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("mask serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<RegionMasks> {
        serde_json::from_str(text).map_err(|e| MetricsError::Schema(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(fs::write(path, self.to_json())?)
    }

    pub fn load(path: &Path) -> Result<RegionMasks> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub median: f64,
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl Stats {
    pub fn empty() -> Stats {
        Stats { median: 0.0, mean: 0.0, std: 0.0, count: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionStats {
    pub per_region: BTreeMap<String, Stats>,
}

/// Median / mean / population standard deviation.
pub fn summarize(distances: &[f64]) -> Stats {
    if distances.is_empty() {
        return Stats::empty();
    }
    let mut sorted = distances.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = if n % 2 == 1 { sorted[n / 2] } else { (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0 };
    let mean = sorted.iter().sum::<f64>() / n as f64;
    let var = sorted.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n as f64;
    Stats { median, mean, std: var.sqrt(), count: n }
}

/// Index of the nearest predicted vertex for each scan point.
pub fn nearest_vertex(points: &[Vec3], vertices: &[Vec3]) -> Vec<u32> {
    points
        .par_iter()
        .map(|p| {
            let mut best = (f64::INFINITY, 0u32);
            for (vi, v) in vertices.iter().enumerate() {
                let d2 = (p - v).norm_squared();
                if d2 < best.0 {
                    best = (d2, vi as u32);
                }
            }
            best.1
        })
        .collect()
}

/// Pools point-to-surface distances per region. A scan point belongs to a
/// region when its nearest predicted vertex lies in the region's vertex
/// set; [`FULL_REGION`] pools all non-excluded regions with excluded
/// vertex sets removed. Absolute distances, no outlier filtering.
pub fn region_stats(
    scan_points: &[Vec3],
    pred_vertices: &[Vec3],
    pred_faces: &[[u32; 3]],
    masks: &RegionMasks,
) -> Result<RegionStats> {
    masks.validate(pred_vertices.len())?;
    let distances = point_to_surface(scan_points, pred_vertices, pred_faces)?;
    let nearest = nearest_vertex(scan_points, pred_vertices);
    Ok(pool_stats(&distances, &nearest, pred_vertices.len(), masks))
}

/// Same pooling on precomputed distances and nearest-vertex assignment.
pub fn pool_stats(
    distances: &[f64],
    nearest: &[u32],
    n_vertices: usize,
    masks: &RegionMasks,
) -> RegionStats {
    let mut vertex_regions: Vec<Vec<&str>> = vec![Vec::new(); n_vertices];
    for (name, indices) in &masks.regions {
        for &i in indices {
            vertex_regions[i as usize].push(name.as_str());
        }
    }
    let mut excluded_vertex = vec![false; n_vertices];
    for name in &masks.excluded {
        for &i in &masks.regions[name] {
            excluded_vertex[i as usize] = true;
        }
    }

    let mut pools: BTreeMap<&str, Vec<f64>> =
        masks.regions.keys().map(|k| (k.as_str(), Vec::new())).collect();
    let mut full: Vec<f64> = Vec::new();
    for (pi, &vi) in nearest.iter().enumerate() {
        let d = distances[pi];
        for &r in &vertex_regions[vi as usize] {
            pools.get_mut(r).unwrap().push(d);
        }
        if !vertex_regions[vi as usize].is_empty() && !excluded_vertex[vi as usize] {
            full.push(d);
        }
    }

    let mut per_region = BTreeMap::new();
    for (name, pool) in pools {
        per_region.insert(name.to_string(), summarize(&pool));
    }
    per_region.insert(FULL_REGION.to_string(), summarize(&full));
    RegionStats { per_region }
}

// ---------------------------------------------------------------------------
// Mesh quality

/// Number of faces whose orientation flipped relative to a reference mesh
/// with the same topology (face-normal dot product < 0).
pub fn flipped_faces(vertices: &[Vec3], reference_vertices: &[Vec3], faces: &[[u32; 3]]) -> usize {
    faces
        .iter()
        .filter(|f| face_cross(vertices, f).dot(&face_cross(reference_vertices, f)) < 0.0)
        .count()
}

fn face_cross(vertices: &[Vec3], f: &[u32; 3]) -> Vec3 {
    let (a, b, c) = (vertices[f[0] as usize], vertices[f[1] as usize], vertices[f[2] as usize]);
    (b - a).cross(&(c - a))
}

// ---------------------------------------------------------------------------
// Heatmaps

/// Normalized colormap position for a distance at a clamp threshold.
pub fn heat_t(distance_mm: f64, threshold_mm: f64) -> f64 {
    (distance_mm / threshold_mm).clamp(0.0, 1.0)
}

/// Linear blue-to-red ramp.
pub fn heat_color(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    [(255.0 * t).round() as u8, 0, (255.0 * (1.0 - t)).round() as u8]
}

/// Splat-renders the scan colored by point-to-surface distance, clamped at
/// `threshold_mm` (full red at or above it). Nearest point wins per pixel.
pub fn heatmap(
    points: &[Vec3],
    distances: &[f64],
    cam: &Camera,
    width: usize,
    height: usize,
    threshold_mm: f64,
) -> image::RgbImage {
    assert_eq!(points.len(), distances.len());
    let cam = scale_camera(cam, width, height);
    let mut depth = vec![f64::INFINITY; width * height];
    let mut img = image::RgbImage::from_pixel(width as u32, height as u32, image::Rgb([0, 0, 0]));
    let radius = 1i64;
    for (p, &d) in points.iter().zip(distances) {
        let q = cam.to_camera_point(p);
        let (uv, ok) = cam.project_point(p);
        if !ok {
            continue;
        }
        let (uc, vc) = (uv[0].round() as i64, uv[1].round() as i64);
        let color = heat_color(heat_t(d, threshold_mm));
        for dy in -radius..=radius {
            for dx in -radius..=radius {
                let (x, y) = (uc + dx, vc + dy);
                if x < 0 || y < 0 || x >= width as i64 || y >= height as i64 {
                    continue;
                }
                let idx = y as usize * width + x as usize;
                if q.z < depth[idx] {
                    depth[idx] = q.z;
                    img.put_pixel(x as u32, y as u32, image::Rgb(color));
                }
            }
        }
    }
    img
}
