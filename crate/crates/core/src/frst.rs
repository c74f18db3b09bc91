//! Fast radial symmetry transform and ROI extraction.
//!
//! Holes are dark voids on a bright cone face, so intensity gradients on the
//! collar point away from the centre and centre votes land at the negatively
//! affected pixel. `F_n` uses magnitudes, so the sign does not matter for `S`;
//! the feature count folds the sign so that dark centres count positively.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{gaussian_blur, GradientImage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrstConfig {
    /// Radii in pixels, ascending.
    pub radii: Vec<f64>,
    pub alpha: f64,
    /// Gaussian sigma for radius `n` is `sigma_factor * n`.
    pub sigma_factor: f64,
    /// Peaks below this fraction of `max S` are ignored.
    pub peak_threshold: f64,
    pub roi_radius_margin: f64,
    /// Gradient pixels below this fraction of the maximum magnitude do not vote.
    pub noise_floor: f64,
    pub max_rois: usize,
}

impl Default for FrstConfig {
    fn default() -> Self {
        FrstConfig {
            radii: vec![8.0, 10.0, 12.0, 14.0, 16.0],
            alpha: 2.0,
            sigma_factor: 0.25,
            peak_threshold: 0.2,
            roi_radius_margin: 0.15,
            noise_floor: 0.05,
            max_rois: 8,
        }
    }
}

impl FrstConfig {
    pub fn validate(&self) -> Result<()> {
        if self.radii.is_empty() || self.radii.iter().any(|r| !(*r > 0.0)) {
            return Err(Error::Config("FRST radii must be positive".into()));
        }
        if self.radii.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Config("FRST radii must be sorted".into()));
        }
        if !(self.alpha >= 1.0) {
            return Err(Error::Config("FRST alpha must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.peak_threshold) || !(0.0..1.0).contains(&self.noise_floor) {
            return Err(Error::Config("FRST thresholds must be fractions".into()));
        }
        if !(self.roi_radius_margin >= 0.0 && self.roi_radius_margin < 1.0) {
            return Err(Error::Config("ROI margin must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Radii covering physical hole radii `[r_min, r_max]` (m) at `footprint`
    /// metres per pixel, widened by `spread` on both sides, in `steps` values.
    pub fn with_physical_radii(mut self, r_min: f64, r_max: f64, footprint: f64, spread: f64, steps: usize) -> Self {
        let lo = r_min / footprint * (1.0 - spread);
        let hi = r_max / footprint * (1.0 + spread);
        let steps = steps.max(1);
        self.radii = if steps == 1 {
            vec![0.5 * (lo + hi)]
        } else {
            (0..steps).map(|i| lo + (hi - lo) * i as f64 / (steps - 1) as f64).collect()
        };
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrstMaps {
    pub width: usize,
    pub height: usize,
    pub radii: Vec<f64>,
    pub orientation: Vec<Vec<f64>>,
    pub magnitude: Vec<Vec<f64>>,
    pub s: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionOfInterest {
    /// Continuous image coordinates of the S peak.
    pub centre_hint: (f64, f64),
    /// Gradient pixel centres in the search annulus.
    pub pixels: Vec<(f64, f64)>,
    pub feature_count: usize,
    pub source_radius: f64,
    pub peak: f64,
}

type Pixel = (i64, i64);

/// `p ± round(g n)` with round-half-away-from-zero.
pub fn affected_pixels(p: Pixel, g: (f64, f64), n: f64) -> (Pixel, Pixel) {
    let du = (g.0 * n).round() as i64;
    let dv = (g.1 * n).round() as i64;
    ((p.0 + du, p.1 + dv), (p.0 - du, p.1 - dv))
}

fn voting_threshold(grad: &GradientImage, floor: f64) -> f64 {
    let max = grad.max_magnitude();
    (floor * max).max(1e-12)
}

pub fn frst(grad: &GradientImage, cfg: &FrstConfig) -> Result<FrstMaps> {
    cfg.validate()?;
    let (w, h) = (grad.width, grad.height);
    let thresh = voting_threshold(grad, cfg.noise_floor);
    let voters: Vec<usize> = (0..w * h).filter(|&i| grad.magnitude[i] > thresh).collect();
    let mut s = vec![0.0; w * h];
    let mut orientation = Vec::with_capacity(cfg.radii.len());
    let mut magnitude = Vec::with_capacity(cfg.radii.len());
    let inside = |p: Pixel| p.0 >= 0 && p.1 >= 0 && (p.0 as usize) < w && (p.1 as usize) < h;
    for &n in &cfg.radii {
        let mut o = vec![0.0f64; w * h];
        let mut m = vec![0.0f64; w * h];
        for &i in &voters {
            let p = ((i % w) as i64, (i / w) as i64);
            let (plus, minus) = affected_pixels(p, (grad.gx[i], grad.gy[i]), n);
            if inside(plus) {
                let j = plus.1 as usize * w + plus.0 as usize;
                o[j] += 1.0;
                m[j] += grad.magnitude[i];
            }
            if inside(minus) {
                let j = minus.1 as usize * w + minus.0 as usize;
                o[j] -= 1.0;
                m[j] -= grad.magnitude[i];
            }
        }
        let omax = o.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let mmax = m.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if omax > 0.0 && mmax > 0.0 {
            let f: Vec<f64> = o
                .iter()
                .zip(&m)
                .map(|(ov, mv)| (ov.abs() / omax).powf(cfg.alpha) * (mv.abs() / mmax))
                .collect();
            let sigma = cfg.sigma_factor * n;
            let size = 2 * (2.0 * sigma).ceil() as usize + 1;
            let sn = gaussian_blur(w, h, &f, size, sigma);
            for (acc, v) in s.iter_mut().zip(sn) {
                *acc += v;
            }
        }
        orientation.push(o);
        magnitude.push(m);
    }
    let k = cfg.radii.len() as f64;
    s.iter_mut().for_each(|v| *v /= k);
    Ok(FrstMaps {
        width: w,
        height: h,
        radii: cfg.radii.clone(),
        orientation,
        magnitude,
        s,
    })
}

/// Parabolic sub-pixel offset of a peak from three samples.
fn parabolic(l: f64, c: f64, r: f64) -> f64 {
    let d = l - 2.0 * c + r;
    if d < 0.0 {
        (0.5 * (l - r) / d).clamp(-0.5, 0.5)
    } else {
        0.0
    }
}

/// Local maxima of `S` above `peak_threshold · max S`, strongest first,
/// at least the smallest radius apart. Returned in continuous coordinates.
pub fn find_peaks(maps: &FrstMaps, cfg: &FrstConfig) -> Vec<((f64, f64), f64)> {
    let (w, h) = (maps.width, maps.height);
    let s = &maps.s;
    let max = s.iter().copied().fold(0.0, f64::max);
    if !(max > 0.0) || w < 3 || h < 3 {
        return Vec::new();
    }
    let floor = cfg.peak_threshold * max;
    let mut cands: Vec<(usize, f64)> = Vec::new();
    for v in 1..h - 1 {
        for u in 1..w - 1 {
            let i = v * w + u;
            let c = s[i];
            if c <= 0.0 || c < floor {
                continue;
            }
            let is_max = (-1isize..=1).all(|dv| {
                (-1isize..=1).all(|du| {
                    let j = ((v as isize + dv) as usize) * w + (u as isize + du) as usize;
                    // Plateaus resolve to their first pixel in scan order.
                    j == i || s[j] < c || (s[j] == c && j > i)
                })
            });
            if is_max {
                cands.push((i, c));
            }
        }
    }
    cands.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let min_sep = maps.radii.first().copied().unwrap_or(1.0);
    let mut peaks: Vec<((f64, f64), f64)> = Vec::new();
    for (i, c) in cands {
        let (u, v) = (i % w, i / w);
        let du = parabolic(s[i - 1], c, s[i + 1]);
        let dv = parabolic(s[i - w], c, s[i + w]);
        let p = (u as f64 + 0.5 + du, v as f64 + 0.5 + dv);
        if peaks.iter().all(|(q, _)| (p.0 - q.0).hypot(p.1 - q.1) >= min_sep) {
            peaks.push((p, c));
            if peaks.len() >= cfg.max_rois {
                break;
            }
        }
    }
    peaks
}

/// Dark-centre votes within one pixel of `(u, v)`, best radius.
fn feature_count(maps: &FrstMaps, u: usize, v: usize) -> (usize, f64) {
    let (w, h) = (maps.width, maps.height);
    let mut best = (0usize, maps.radii[0]);
    for (o, &n) in maps.orientation.iter().zip(&maps.radii) {
        let mut votes = 0.0;
        for dv in -1isize..=1 {
            for du in -1isize..=1 {
                let (uu, vv) = (u as isize + du, v as isize + dv);
                if uu >= 0 && vv >= 0 && (uu as usize) < w && (vv as usize) < h {
                    votes += (-o[vv as usize * w + uu as usize]).max(0.0);
                }
            }
        }
        let votes = votes.round() as usize;
        if votes > best.0 {
            best = (votes, n);
        }
    }
    best
}

pub fn extract_rois(maps: &FrstMaps, grad: &GradientImage, cfg: &FrstConfig) -> Vec<RegionOfInterest> {
    let (w, h) = (maps.width, maps.height);
    let rmin = maps.radii.first().copied().unwrap_or(0.0) * (1.0 - cfg.roi_radius_margin);
    let rmax = maps.radii.last().copied().unwrap_or(0.0) * (1.0 + cfg.roi_radius_margin);
    let thresh = voting_threshold(grad, cfg.noise_floor);
    let mut rois = Vec::new();
    for (centre, peak) in find_peaks(maps, cfg) {
        let (pu, pv) = (centre.0.floor() as usize, centre.1.floor() as usize);
        let (count, radius) = feature_count(maps, pu.min(w - 1), pv.min(h - 1));
        let u0 = (centre.0 - rmax).floor().max(0.0) as usize;
        let v0 = (centre.1 - rmax).floor().max(0.0) as usize;
        let u1 = ((centre.0 + rmax).ceil() as usize).min(w);
        let v1 = ((centre.1 + rmax).ceil() as usize).min(h);
        let mut pixels = Vec::new();
        for v in v0..v1 {
            for u in u0..u1 {
                if grad.magnitude[v * w + u] <= thresh {
                    continue;
                }
                let q = (u as f64 + 0.5, v as f64 + 0.5);
                let d = (q.0 - centre.0).hypot(q.1 - centre.1);
                if d >= rmin && d <= rmax {
                    pixels.push(q);
                }
            }
        }
        if !pixels.is_empty() && count >= 1 {
            rois.push(RegionOfInterest {
                centre_hint: centre,
                pixels,
                feature_count: count,
                source_radius: radius,
                peak,
            });
        }
    }
    rois
}
