//! Spinning LiDAR model and exact ray casting against a [`Scene`].
//!
//! Each ray is split at every circle where the scene's height model changes.
//! Inside one interval the surface is `z = a + b ρ` (or flat ground), so the
//! first hit is a quadratic root. Rising edges between intervals (pit walls)
//! are hit at the interval boundary.

use borehole_core::cloud::{Frame, PointCloud};
use borehole_core::geometry::{RigidTransform, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::scene::{Label, Patch, Scene};
use crate::SimError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BeamPattern {
    pub channels: usize,
    /// Elevation of the lowest and highest channel (deg).
    pub elevation_min_deg: f64,
    pub elevation_max_deg: f64,
    pub columns: usize,
    pub min_range: f64,
    pub max_range: f64,
    pub range_noise: f64,
}

impl BeamPattern {
    /// 128 channels over 90° pointing down, for close-range hole work.
    pub fn dense() -> Self {
        BeamPattern {
            channels: 128,
            elevation_min_deg: -90.0,
            elevation_max_deg: 0.0,
            columns: 2048,
            min_range: 0.3,
            max_range: 35.0,
            range_noise: 0.003,
        }
    }

    /// 32 channels over ±22.5°, for situational awareness.
    pub fn sparse() -> Self {
        BeamPattern {
            channels: 32,
            elevation_min_deg: -22.5,
            elevation_max_deg: 22.5,
            columns: 1024,
            min_range: 0.5,
            max_range: 90.0,
            range_noise: 0.005,
        }
    }

    pub fn with_columns(mut self, columns: usize) -> Self {
        self.columns = columns;
        self
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.channels == 0 || self.columns == 0 {
            return Err(SimError::Spec("beam pattern needs channels and columns".into()));
        }
        if !(self.elevation_min_deg <= self.elevation_max_deg) || !(self.max_range > self.min_range) {
            return Err(SimError::Spec("beam pattern ranges are inverted".into()));
        }
        if !(self.range_noise >= 0.0) {
            return Err(SimError::Spec("range noise must be non-negative".into()));
        }
        Ok(())
    }

    pub fn elevation(&self, channel: usize) -> f64 {
        if self.channels == 1 {
            return self.elevation_min_deg.to_radians();
        }
        let t = channel as f64 / (self.channels - 1) as f64;
        (self.elevation_min_deg + t * (self.elevation_max_deg - self.elevation_min_deg)).to_radians()
    }

    /// Unit ray direction in the sensor frame.
    pub fn direction(&self, channel: usize, column: usize) -> Vec3 {
        let e = self.elevation(channel);
        let a = column as f64 * std::f64::consts::TAU / self.columns as f64;
        Vec3::new(e.cos() * a.cos(), e.cos() * a.sin(), e.sin())
    }
}

/// Roots of `A t² + 2 B t + C = 0`, ascending.
fn quadratic(a: f64, b: f64, c: f64) -> Vec<f64> {
    if a.abs() < 1e-14 {
        if b.abs() < 1e-14 {
            return Vec::new();
        }
        return vec![-c / (2.0 * b)];
    }
    let disc = b * b - a * c;
    if disc < 0.0 {
        return Vec::new();
    }
    let s = disc.sqrt();
    let q = -(b + b.signum() * s);
    let (r1, r2) = if q == 0.0 { (0.0, 0.0) } else { (q / a, c / q) };
    if r1 <= r2 {
        vec![r1, r2]
    } else {
        vec![r2, r1]
    }
}

/// First surface hit along `o + t d` (d unit), with its label.
pub fn first_hit(scene: &Scene, o: &Vec3, d: &Vec3, t_max: f64) -> Option<(f64, Label)> {
    let exy = (d.x, d.y);
    let e2 = exy.0 * exy.0 + exy.1 * exy.1;
    // Breakpoints where the ray crosses a circle of a site it passes near.
    let mut ts: Vec<f64> = vec![0.0];
    let near: Vec<bool> = scene
        .site_reach()
        .iter()
        .map(|&(c, r)| {
            let q = (o.x - c.0, o.y - c.1);
            let t = if e2 > 0.0 { (-(q.0 * exy.0 + q.1 * exy.1) / e2).clamp(0.0, t_max) } else { 0.0 };
            (q.0 + t * exy.0).hypot(q.1 + t * exy.1) <= r
        })
        .collect();
    if e2 > 1e-18 {
        let circles = scene.circles();
        let mut idx = 0;
        for (k, site) in scene.sites().iter().enumerate() {
            let n = 3 + site.pits.len();
            if near[k] {
                for &(c, r) in &circles[idx..idx + n] {
                    let q = (o.x - c.0, o.y - c.1);
                    let b = q.0 * exy.0 + q.1 * exy.1;
                    let cc = q.0 * q.0 + q.1 * q.1 - r * r;
                    ts.extend(quadratic(e2, b, cc).into_iter().filter(|t| *t > 0.0 && *t < t_max));
                }
            }
            idx += n;
        }
    }
    ts.sort_by(f64::total_cmp);
    ts.push(t_max);

    let at = |t: f64| o + d * t;
    let mut prev_label = Label::Ground;
    for w in ts.windows(2) {
        let (t0, t1) = (w[0], w[1]);
        if t1 <= t0 {
            continue;
        }
        let mid = at(0.5 * (t0 + t1));
        let patch = scene.patch_at(mid.x, mid.y);
        let height = |t: f64| -> Option<f64> {
            let p = at(t);
            match patch {
                Patch::Ground { .. } => Some(0.0),
                Patch::Shaft { .. } => None,
                Patch::Radial { site, a, b, floor0, .. } => {
                    let s = &scene.sites()[site];
                    let z = a + b * (p.x - s.centre[0]).hypot(p.y - s.centre[1]);
                    Some(if floor0 { z.max(0.0) } else { z })
                }
            }
        };
        let label = match patch {
            Patch::Ground { label } | Patch::Radial { label, .. } => label,
            Patch::Shaft { site } => {
                // Below the neck the shaft swallows the beam.
                if o.z + t1 * d.z < -scene.sites()[site].neck_depth {
                    return None;
                }
                continue;
            }
        };
        // Entering this interval already below the surface: a vertical wall.
        if let Some(h0) = height(t0) {
            if o.z + t0 * d.z <= h0 && t0 > 0.0 {
                // Walls rising out of a pit belong to the pit.
                let wall = if prev_label == Label::Pit { Label::Pit } else { label };
                return Some((t0, wall));
            }
        }
        prev_label = label;
        let mut roots: Vec<f64> = Vec::new();
        let plane = |roots: &mut Vec<f64>, level: f64| {
            if d.z.abs() > 1e-15 {
                roots.push((level - o.z) / d.z);
            }
        };
        match patch {
            Patch::Ground { .. } => plane(&mut roots, 0.0),
            Patch::Radial { site, a, b, floor0, .. } => {
                let s = &scene.sites()[site];
                let q = (o.x - s.centre[0], o.y - s.centre[1]);
                let l0 = o.z - a;
                // (l0 + t dz)² = b² |q + t e|²
                let qa = d.z * d.z - b * b * e2;
                let qb = l0 * d.z - b * b * (q.0 * exy.0 + q.1 * exy.1);
                let qc = l0 * l0 - b * b * (q.0 * q.0 + q.1 * q.1);
                roots.extend(quadratic(qa, qb, qc));
                if floor0 {
                    plane(&mut roots, 0.0);
                }
            }
            Patch::Shaft { .. } => {}
        }
        roots.sort_by(f64::total_cmp);
        for t in roots {
            if t > t0 && t <= t1 {
                if let Some(h) = height(t) {
                    if (o.z + t * d.z - h).abs() <= 1e-9 * (1.0 + t) {
                        return Some((t, label));
                    }
                }
            }
        }
    }
    None
}

/// Gaussian sample redrawn until it lies within three standard deviations.
fn truncated(n: &Normal<f64>, sigma: f64, rng: &mut impl Rng) -> f64 {
    loop {
        let x = n.sample(rng);
        if x.abs() <= 3.0 * sigma {
            return x;
        }
    }
}

/// Casts every beam from `sensor_pose` (sensor to world). Points come back in
/// the sensor frame, channel-major then column, with per-point labels.
pub fn raycast(
    scene: &Scene,
    sensor_pose: &RigidTransform,
    pattern: &BeamPattern,
    seed: u64,
) -> Result<(PointCloud, Vec<Label>), SimError> {
    pattern.validate()?;
    let origin = sensor_pose.translation;
    if let Some((h, _)) = scene.surface(origin.x, origin.y) {
        if origin.z <= h {
            return Err(SimError::Spec("sensor is below the surface".into()));
        }
    }
    let jitter = scene.spec.surface_jitter;
    let rows: Vec<Vec<(Vec3, Label)>> = (0..pattern.channels)
        .into_par_iter()
        .map(|ch| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (ch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let range_n = Normal::new(0.0, pattern.range_noise).unwrap();
            let jitter_n = Normal::new(0.0, jitter).unwrap();
            let mut out = Vec::new();
            for col in 0..pattern.columns {
                let ds = pattern.direction(ch, col);
                let dw = sensor_pose.rotation.apply(&ds);
                let Some((t, label)) = first_hit(scene, &origin, &dw, pattern.max_range) else {
                    continue;
                };
                let t = t + truncated(&range_n, pattern.range_noise, &mut rng);
                if t < pattern.min_range || t > pattern.max_range {
                    continue;
                }
                let j = Vec3::new(jitter_n.sample(&mut rng), jitter_n.sample(&mut rng), jitter_n.sample(&mut rng));
                out.push((ds * t + sensor_pose.rotation.transpose().apply(&j), label));
            }
            out
        })
        .collect();
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for (p, l) in rows.into_iter().flatten() {
        points.push(p);
        labels.push(l);
    }
    let noise = scene.spec.flying_noise;
    if noise > 0.0 && !points.is_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0xF1F1));
        let up = sensor_pose.rotation.transpose().apply(&Vec3::z());
        let n = (noise * points.len() as f64).round() as usize;
        for _ in 0..n {
            let base = points[rng.random_range(0..points.len())];
            points.push(base + up * rng.random_range(0.2..1.0));
            labels.push(Label::Noise);
        }
    }
    Ok((PointCloud::new(points, Frame::Sensor), labels))
}
