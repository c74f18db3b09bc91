//! Drill-waste cone extraction from a levelled (shadow-frame) cloud.
//!
//! Steps: corridor crop and robot-body removal, height split against the flat
//! bench, radius-outlier denoise, occupancy-grid clustering, height-weighted
//! centroid, and convex-hull backfill of low points so sampling pits on the
//! cone face do not project as voids.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::hull::{self, Point2};

/// Axis-aligned box in the body/shadow frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxFilter {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl BoxFilter {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Result<Self> {
        if (0..3).any(|i| !(min[i] < max[i])) {
            return Err(Error::Config(format!("box min {min:?} not below max {max:?}")));
        }
        Ok(BoxFilter { min, max })
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }
}

/// Region kept in front of the robot, minus the robot's own body boxes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorridorSpec {
    /// Forward extent (m).
    pub length: f64,
    /// Extent kept behind the sensor (m); the robot straddles cones at close range.
    pub rear: f64,
    pub width: f64,
    pub boxes: Vec<BoxFilter>,
}

impl Default for CorridorSpec {
    fn default() -> Self {
        CorridorSpec {
            length: 6.0,
            rear: 1.5,
            width: 4.0,
            boxes: Vec::new(),
        }
    }
}

impl CorridorSpec {
    pub fn unbounded() -> Self {
        CorridorSpec {
            length: f64::INFINITY,
            rear: f64::INFINITY,
            width: f64::INFINITY,
            boxes: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.length > 0.0 && self.width > 0.0 && self.rear >= 0.0) {
            return Err(Error::Config("corridor extents must be positive".into()));
        }
        for b in &self.boxes {
            BoxFilter::new(b.min, b.max)?;
        }
        Ok(())
    }
}

pub fn crop_and_clean(cloud: &PointCloud, spec: &CorridorSpec) -> PointCloud {
    let half = spec.width / 2.0;
    cloud.filtered(|p| {
        p.x <= spec.length
            && p.x >= -spec.rear
            && p.y.abs() <= half
            && !spec.boxes.iter().any(|b| b.contains(p))
    })
}

/// Partitions into `(ground, above)` with `above` holding `z >= z_threshold`.
pub fn split_ground(cloud: &PointCloud, z_threshold: f64) -> (PointCloud, PointCloud) {
    let (above, ground): (Vec<Vec3>, Vec<Vec3>) =
        cloud.points.iter().partition(|p| p.z >= z_threshold);
    (
        PointCloud::new(ground, cloud.frame),
        PointCloud::new(above, cloud.frame),
    )
}

type Cell3 = (i64, i64, i64);

fn cell3(p: &Vec3, size: f64) -> Cell3 {
    (
        (p.x / size).floor() as i64,
        (p.y / size).floor() as i64,
        (p.z / size).floor() as i64,
    )
}

/// Drops points with fewer than `min_neighbors` other points within `radius`.
pub fn denoise(cloud: &PointCloud, radius: f64, min_neighbors: usize) -> PointCloud {
    if min_neighbors == 0 || cloud.is_empty() {
        return cloud.clone();
    }
    let mut grid: HashMap<Cell3, Vec<usize>> = HashMap::new();
    for (i, p) in cloud.points.iter().enumerate() {
        grid.entry(cell3(p, radius)).or_default().push(i);
    }
    // Any two points sharing a cell of side r/√3 are within r of each other.
    let fine = radius / 3f64.sqrt() * (1.0 - 1e-9);
    let mut fine_count: HashMap<Cell3, usize> = HashMap::new();
    for p in &cloud.points {
        *fine_count.entry(cell3(p, fine)).or_default() += 1;
    }
    let r2 = radius * radius;
    let keep: Vec<bool> = cloud
        .points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            if fine_count[&cell3(p, fine)] > min_neighbors {
                return true;
            }
            let (cx, cy, cz) = cell3(p, radius);
            let mut count = 0;
            for dx in -1..=1 {
                for dy in -1..=1 {
                    for dz in -1..=1 {
                        let Some(members) = grid.get(&(cx + dx, cy + dy, cz + dz)) else {
                            continue;
                        };
                        for &j in members {
                            if j != i && (cloud.points[j] - p).norm_squared() <= r2 {
                                count += 1;
                                if count >= min_neighbors {
                                    return true;
                                }
                            }
                        }
                    }
                }
            }
            false
        })
        .collect();
    let mut k = keep.iter();
    cloud.filtered(|_| *k.next().unwrap())
}

/// Removes points lying more than `drop` below any point within horizontal
/// distance `radius`: returns from the hole wall under the collar.
pub fn remove_cavity_points(cloud: &PointCloud, radius: f64, drop: f64) -> PointCloud {
    if cloud.is_empty() {
        return cloud.clone();
    }
    let grid = Grid2::new(&cloud.points, radius);
    let top: Vec<f64> = (0..grid.cells())
        .map(|c| grid.members(c).iter().map(|&i| cloud.points[i].z).fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let r2 = radius * radius;
    let keep: Vec<bool> = cloud
        .points
        .iter()
        .map(|p| {
            let near = grid.neighbourhood(p);
            let highest = near.iter().map(|&c| top[c]).fold(f64::NEG_INFINITY, f64::max);
            if highest - p.z <= drop {
                return true;
            }
            !near.iter().flat_map(|&c| grid.members(c)).any(|&j| {
                let q = &cloud.points[j];
                (q.x - p.x).powi(2) + (q.y - p.y).powi(2) <= r2 && q.z - p.z > drop
            })
        })
        .collect();
    let mut k = keep.iter();
    cloud.filtered(|_| *k.next().unwrap())
}

/// Dense XY bucket grid with members stored contiguously per cell.
struct Grid2 {
    origin: (f64, f64),
    cell: f64,
    dims: (usize, usize),
    start: Vec<usize>,
    index: Vec<usize>,
}

impl Grid2 {
    fn new(points: &[Vec3], cell: f64) -> Self {
        let x0 = points.iter().map(|p| p.x).fold(f64::INFINITY, f64::min);
        let y0 = points.iter().map(|p| p.y).fold(f64::INFINITY, f64::min);
        let x1 = points.iter().map(|p| p.x).fold(f64::NEG_INFINITY, f64::max);
        let y1 = points.iter().map(|p| p.y).fold(f64::NEG_INFINITY, f64::max);
        let dims = (((x1 - x0) / cell) as usize + 1, ((y1 - y0) / cell) as usize + 1);
        let mut g = Grid2 { origin: (x0, y0), cell, dims, start: vec![0; dims.0 * dims.1 + 1], index: vec![0; points.len()] };
        let ids: Vec<usize> = points.iter().map(|p| g.cell_of(p)).collect();
        for &c in &ids {
            g.start[c + 1] += 1;
        }
        for c in 0..g.cells() {
            g.start[c + 1] += g.start[c];
        }
        let mut fill = g.start.clone();
        for (i, &c) in ids.iter().enumerate() {
            g.index[fill[c]] = i;
            fill[c] += 1;
        }
        g
    }

    fn cells(&self) -> usize {
        self.dims.0 * self.dims.1
    }

    fn coords(&self, p: &Vec3) -> (usize, usize) {
        let cx = (((p.x - self.origin.0) / self.cell) as usize).min(self.dims.0 - 1);
        let cy = (((p.y - self.origin.1) / self.cell) as usize).min(self.dims.1 - 1);
        (cx, cy)
    }

    fn cell_of(&self, p: &Vec3) -> usize {
        let (cx, cy) = self.coords(p);
        cy * self.dims.0 + cx
    }

    fn members(&self, c: usize) -> &[usize] {
        &self.index[self.start[c]..self.start[c + 1]]
    }

    /// The 3×3 block of cells around `p`'s cell.
    fn neighbourhood(&self, p: &Vec3) -> Vec<usize> {
        let (cx, cy) = self.coords(p);
        let mut out = Vec::with_capacity(9);
        for y in cy.saturating_sub(1)..=(cy + 1).min(self.dims.1 - 1) {
            for x in cx.saturating_sub(1)..=(cx + 1).min(self.dims.0 - 1) {
                out.push(y * self.dims.0 + x);
            }
        }
        out
    }
}

/// Connected components of the XY occupancy grid (8-neighbour), largest first.
///
/// Components with fewer than `min_points` points are discarded.
pub fn cluster_cone(above: &PointCloud, min_points: usize, cell: f64) -> Vec<PointCloud> {
    let key = |p: &Vec3| ((p.x / cell).floor() as i64, (p.y / cell).floor() as i64);
    let mut cells: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    // First-seen order keeps the labelling deterministic.
    let mut order: Vec<(i64, i64)> = Vec::new();
    for (i, p) in above.points.iter().enumerate() {
        let k = key(p);
        let e = cells.entry(k).or_default();
        if e.is_empty() {
            order.push(k);
        }
        e.push(i);
    }
    let mut label: HashMap<(i64, i64), usize> = HashMap::with_capacity(cells.len());
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    for &seed in &order {
        if label.contains_key(&seed) {
            continue;
        }
        let id = clusters.len();
        let mut members = Vec::new();
        let mut stack = vec![seed];
        label.insert(seed, id);
        while let Some(c) = stack.pop() {
            members.extend_from_slice(&cells[&c]);
            for dx in -1..=1 {
                for dy in -1..=1 {
                    let n = (c.0 + dx, c.1 + dy);
                    if cells.contains_key(&n) && !label.contains_key(&n) {
                        label.insert(n, id);
                        stack.push(n);
                    }
                }
            }
        }
        members.sort_unstable();
        clusters.push(members);
    }
    let mut out: Vec<Vec<usize>> = clusters
        .into_iter()
        .filter(|m| m.len() >= min_points)
        .collect();
    out.sort_by(|a, b| b.len().cmp(&a.len()).then(a[0].cmp(&b[0])));
    out.into_iter()
        .map(|m| PointCloud::new(m.iter().map(|&i| above.points[i]).collect(), above.frame))
        .collect()
}

/// Height-weighted centroid over a 2D voxel grid.
///
/// Each occupied XY voxel contributes its centre weighted by the maximum z
/// of its members; the returned z is the plain mean z of the cone points.
pub fn weighted_centroid(cone: &PointCloud, voxel_xy: f64) -> Result<Vec3> {
    if cone.is_empty() {
        return Err(Error::InvalidInput("empty cone cloud".into()));
    }
    if !(voxel_xy > 0.0) {
        return Err(Error::InvalidInput("voxel size must be positive".into()));
    }
    let mut voxels: HashMap<(i64, i64), f64> = HashMap::new();
    for p in &cone.points {
        let k = ((p.x / voxel_xy).floor() as i64, (p.y / voxel_xy).floor() as i64);
        voxels
            .entry(k)
            .and_modify(|h| *h = h.max(p.z))
            .or_insert(p.z);
    }
    let mut keys: Vec<_> = voxels.keys().copied().collect();
    keys.sort_unstable();
    let centre = |k: &(i64, i64)| {
        (
            (k.0 as f64 + 0.5) * voxel_xy,
            (k.1 as f64 + 0.5) * voxel_xy,
        )
    };
    let total: f64 = keys.iter().map(|k| voxels[k].max(0.0)).sum();
    let (sx, sy, sw) = keys.iter().fold((0.0, 0.0, 0.0), |(sx, sy, sw), k| {
        let w = if total > 0.0 { voxels[k].max(0.0) } else { 1.0 };
        let (cx, cy) = centre(k);
        (sx + w * cx, sy + w * cy, sw + w)
    });
    let mean_z = cone.points.iter().map(|p| p.z).sum::<f64>() / cone.len() as f64;
    Ok(Vec3::new(sx / sw, sy / sw, mean_z))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConeDetection {
    pub centroid: Vec3,
    pub height: f64,
    pub points: PointCloud,
    /// Counter-clockwise footprint polygon.
    pub hull_xy: Vec<Point2>,
}

impl ConeDetection {
    /// Horizontal distance from the frame origin to the centroid.
    pub fn distance(&self) -> f64 {
        self.centroid.xy().norm()
    }
}

/// Convex-hull backfill.
///
/// Keeps the cone points plus every ground point strictly inside the hull of
/// the cone's XY footprint, so pits dug into the cone face are filled from
/// their shallow base instead of projecting as voids.
pub fn hull_filter(cone: &PointCloud, ground: &PointCloud, voxel_xy: f64) -> Result<ConeDetection> {
    let footprint: Vec<Point2> = cone.points.iter().map(|p| Point2::new(p.x, p.y)).collect();
    let hull_xy = hull::convex_hull(&footprint)?;
    let (lo, hi) = hull_xy.iter().fold(
        (Point2::repeat(f64::INFINITY), Point2::repeat(f64::NEG_INFINITY)),
        |(lo, hi), v| (lo.inf(v), hi.sup(v)),
    );
    let mut points = cone.points.clone();
    points.extend(ground.points.iter().filter(|p| {
        let q = Point2::new(p.x, p.y);
        q.x > lo.x && q.x < hi.x && q.y > lo.y && q.y < hi.y && hull::strictly_inside(&hull_xy, &q)
    }));
    let centroid = weighted_centroid(cone, voxel_xy)?;
    let height = cone.max_z().unwrap_or(0.0);
    if !(height > 0.0) {
        return Err(Error::InvalidInput("cone has no height above ground".into()));
    }
    Ok(ConeDetection {
        centroid,
        height,
        points: PointCloud::new(points, cone.frame),
        hull_xy,
    })
}

/// Parameters for [`extract_cone`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConeParams {
    pub corridor: CorridorSpec,
    pub z_threshold: f64,
    pub denoise_radius: f64,
    pub denoise_min_neighbors: usize,
    pub cluster_cell: f64,
    pub min_cluster_points: usize,
    pub voxel_xy: f64,
    pub cavity_radius: f64,
    pub cavity_drop: f64,
}

impl Default for ConeParams {
    fn default() -> Self {
        ConeParams {
            corridor: CorridorSpec::default(),
            z_threshold: 0.10,
            denoise_radius: 0.10,
            denoise_min_neighbors: 3,
            cluster_cell: 0.15,
            min_cluster_points: 60,
            voxel_xy: 0.05,
            cavity_radius: 0.025,
            cavity_drop: 0.05,
        }
    }
}

impl ConeParams {
    pub fn validate(&self) -> Result<()> {
        self.corridor.validate()?;
        if !(self.denoise_radius > 0.0 && self.cluster_cell > 0.0 && self.voxel_xy > 0.0) {
            return Err(Error::Config("cone radii and cell sizes must be positive".into()));
        }
        if !(self.cavity_radius > 0.0 && self.cavity_drop > 0.0) {
            return Err(Error::Config("cavity filter parameters must be positive".into()));
        }
        Ok(())
    }
}

/// Full cone extraction; `Ok(None)` when no cluster qualifies.
pub fn extract_cone(shadow: &PointCloud, params: &ConeParams) -> Result<Option<ConeDetection>> {
    Ok(extract_cones(shadow, params, 1)?.into_iter().next())
}

/// Up to `limit` cones, largest cluster first.
pub fn extract_cones(shadow: &PointCloud, params: &ConeParams, limit: usize) -> Result<Vec<ConeDetection>> {
    let cropped = crop_and_clean(shadow, &params.corridor);
    let (ground, above) = split_ground(&cropped, params.z_threshold);
    let above = denoise(&above, params.denoise_radius, params.denoise_min_neighbors);
    let mut out = Vec::new();
    for cone in cluster_cone(&above, params.min_cluster_points, params.cluster_cell) {
        if out.len() >= limit {
            break;
        }
        let detection = match hull_filter(&cone, &ground, params.voxel_xy) {
            Ok(d) => d,
            Err(Error::DegenerateHull) => continue,
            Err(e) => return Err(e),
        };
        let points = remove_cavity_points(&detection.points, params.cavity_radius, params.cavity_drop);
        out.push(ConeDetection { points, ..detection });
    }
    Ok(out)
}
