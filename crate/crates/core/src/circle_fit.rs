//! Taubin algebraic circle fit and its RANSAC wrapper.
//!
//! The circle is `A z + B x + C y + D = 0` with `z = x² + y²`, minimising
//! `AᵀMA` subject to `AᵀNA = 1`. After mean-centring, `x̄ = ȳ = 0`, `D`
//! drops out as `-A z̄` and the pencil reduces to a 3×3 symmetric problem
//! whose smallest eigenpair is found in closed form.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Circle {
    pub a: f64,
    pub b: f64,
    pub r: f64,
}

impl Circle {
    pub fn residual(&self, p: (f64, f64)) -> f64 {
        (p.0 - self.a).hypot(p.1 - self.b) - self.r
    }

    fn delta(&self, o: &Circle) -> f64 {
        (self.a - o.a).abs().max((self.b - o.b).abs()).max((self.r - o.r).abs())
    }
}

/// Eigenvalues of a symmetric 3×3 matrix, ascending.
fn sym3_eigenvalues(m: &[[f64; 3]; 3]) -> [f64; 3] {
    let p1 = m[0][1].powi(2) + m[0][2].powi(2) + m[1][2].powi(2);
    let q = (m[0][0] + m[1][1] + m[2][2]) / 3.0;
    if p1 == 0.0 {
        let mut d = [m[0][0], m[1][1], m[2][2]];
        d.sort_by(f64::total_cmp);
        return d;
    }
    let p2 = (m[0][0] - q).powi(2) + (m[1][1] - q).powi(2) + (m[2][2] - q).powi(2) + 2.0 * p1;
    let p = (p2 / 6.0).sqrt();
    let mut b = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            b[i][j] = (m[i][j] - if i == j { q } else { 0.0 }) / p;
        }
    }
    let det = b[0][0] * (b[1][1] * b[2][2] - b[1][2] * b[2][1]) - b[0][1] * (b[1][0] * b[2][2] - b[1][2] * b[2][0])
        + b[0][2] * (b[1][0] * b[2][1] - b[1][1] * b[2][0]);
    let phi = (det / 2.0).clamp(-1.0, 1.0).acos() / 3.0;
    let hi = q + 2.0 * p * phi.cos();
    let lo = q + 2.0 * p * (phi + 2.0 * std::f64::consts::PI / 3.0).cos();
    [lo, 3.0 * q - hi - lo, hi]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn norm(a: [f64; 3]) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

/// Unit eigenvector of symmetric `m` for the (simple) eigenvalue `lambda`.
fn sym3_eigenvector(m: &[[f64; 3]; 3], lambda: f64) -> Option<[f64; 3]> {
    let r: Vec<[f64; 3]> = (0..3)
        .map(|i| {
            let mut row = m[i];
            row[i] -= lambda;
            row
        })
        .collect();
    let best = [cross(r[0], r[1]), cross(r[0], r[2]), cross(r[1], r[2])]
        .into_iter()
        .max_by(|a, b| norm(*a).total_cmp(&norm(*b)))?;
    let n = norm(best);
    if !(n > 0.0) {
        return None;
    }
    let mut v = best.map(|x| x / n);
    // One inverse-iteration step tightens the vector when lambda sits near
    // another eigenvalue.
    let shift = lambda - 1e-12 * (1.0 + lambda.abs());
    let a = nalgebra::Matrix3::from_fn(|i, j| m[i][j] - if i == j { shift } else { 0.0 });
    if let Some(inv) = a.try_inverse() {
        let x = inv * nalgebra::Vector3::new(v[0], v[1], v[2]);
        let xn = x.norm();
        if xn.is_finite() && xn > 0.0 {
            v = [x[0] / xn, x[1] / xn, x[2] / xn];
        }
    }
    Some(v)
}

/// Taubin fit on `points` in pixel coordinates.
pub fn taubin_fit(points: &[(f64, f64)]) -> Result<Circle> {
    let n = points.len();
    if n < 3 {
        return Err(Error::DegenerateFit("fewer than three points"));
    }
    let nf = n as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / nf;
    let my = points.iter().map(|p| p.1).sum::<f64>() / nf;
    let scale = (points.iter().map(|p| (p.0 - mx).powi(2) + (p.1 - my).powi(2)).sum::<f64>() / nf).sqrt();
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::DegenerateFit("coincident points"));
    }
    let pts: Vec<(f64, f64)> = points.iter().map(|p| ((p.0 - mx) / scale, (p.1 - my) / scale)).collect();
    let zbar = pts.iter().map(|p| p.0 * p.0 + p.1 * p.1).sum::<f64>() / nf;

    // Moments of (z - z̄, x, y).
    let mut mm = [[0.0; 3]; 3];
    for &(x, y) in &pts {
        let v = [x * x + y * y - zbar, x, y];
        for i in 0..3 {
            for j in 0..3 {
                mm[i][j] += v[i] * v[j];
            }
        }
    }
    let d = [1.0 / (4.0 * zbar).sqrt(), 1.0, 1.0];
    let mut s = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            s[i][j] = mm[i][j] / nf * d[i] * d[j];
        }
    }
    let lambda = sym3_eigenvalues(&s)[0];
    let w = sym3_eigenvector(&s, lambda).ok_or(Error::DegenerateFit("no eigenvector"))?;
    let (a, b, c) = (w[0] * d[0], w[1], w[2]);
    if a.abs() < 1e-12 {
        return Err(Error::DegenerateFit("points are collinear"));
    }
    let ca = -b / (2.0 * a);
    let cb = -c / (2.0 * a);
    let r2 = (b * b + c * c + 4.0 * a * a * zbar) / (4.0 * a * a);
    let circle = Circle {
        a: ca * scale + mx,
        b: cb * scale + my,
        r: r2.sqrt() * scale,
    };
    if !(circle.r > 0.0 && circle.r.is_finite() && circle.a.is_finite() && circle.b.is_finite()) {
        return Err(Error::DegenerateFit("non-finite circle"));
    }
    Ok(circle)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RansacConfig {
    pub max_retries: usize,
    pub seed_size: usize,
    pub inlier_tol: f64,
    pub min_inliers: usize,
    pub rng_seed: u64,
    /// Cap on refit rounds while the consensus set grows.
    pub max_growth: usize,
    /// Stop once a better consensus would have been sampled with this probability.
    pub confidence: f64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        RansacConfig {
            max_retries: 200,
            seed_size: 3,
            inlier_tol: 1.5,
            min_inliers: 12,
            rng_seed: 0,
            max_growth: 20,
            confidence: 0.999,
        }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seed_size < 3 {
            return Err(Error::Config("RANSAC seed size must be at least 3".into()));
        }
        if !(self.inlier_tol > 0.0) {
            return Err(Error::Config("RANSAC inlier tolerance must be positive".into()));
        }
        if !(self.confidence > 0.0 && self.confidence <= 1.0) {
            return Err(Error::Config("RANSAC confidence must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RansacFit {
    pub circle: Circle,
    pub inliers: Vec<usize>,
}

fn inliers_of(points: &[(f64, f64)], c: &Circle, tol: f64) -> Vec<usize> {
    (0..points.len()).filter(|&i| c.residual(points[i]).abs() <= tol).collect()
}

fn fit_subset(points: &[(f64, f64)], idx: &[usize]) -> Result<Circle> {
    let sub: Vec<(f64, f64)> = idx.iter().map(|&i| points[i]).collect();
    taubin_fit(&sub)
}

/// Grows a seed fit until the consensus set stops changing.
fn grow(points: &[(f64, f64)], mut circle: Circle, cfg: &RansacConfig) -> Option<RansacFit> {
    let mut inliers = inliers_of(points, &circle, cfg.inlier_tol);
    for _ in 0..cfg.max_growth {
        if inliers.len() < cfg.seed_size {
            return None;
        }
        let next = fit_subset(points, &inliers).ok()?;
        let next_inliers = inliers_of(points, &next, cfg.inlier_tol);
        let settled = next_inliers == inliers || next.delta(&circle) < 1e-6;
        circle = next;
        inliers = next_inliers;
        if settled {
            break;
        }
    }
    Some(RansacFit { circle, inliers })
}

/// RANSAC over Taubin fits; returns the largest consensus refit.
///
/// A seed is refined only when its raw consensus beats every earlier seed,
/// and sampling stops early once `confidence` is reached.
pub fn ransac_fit(points: &[(f64, f64)], cfg: &RansacConfig) -> Result<RansacFit> {
    cfg.validate()?;
    if points.len() < cfg.seed_size {
        return Err(Error::NoCircle);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut best: Option<RansacFit> = None;
    let mut best_raw = 0;
    let n = points.len() as f64;
    for it in 0..cfg.max_retries {
        let seed: Vec<usize> = index::sample(&mut rng, points.len(), cfg.seed_size).into_vec();
        let Ok(c) = fit_subset(points, &seed) else { continue };
        // Only seeds that beat every earlier seed are worth refining.
        let raw = points.iter().filter(|&&p| c.residual(p).abs() <= cfg.inlier_tol).count();
        if raw <= best_raw {
            continue;
        }
        best_raw = raw;
        let Some(fit) = grow(points, c, cfg) else { continue };
        if best.as_ref().is_none_or(|b| fit.inliers.len() > b.inliers.len()) {
            best = Some(fit);
        }
        let w = best.as_ref().map_or(0.0, |b| b.inliers.len() as f64 / n);
        if w >= 1.0 {
            break;
        }
        let miss = 1.0 - w.powi(cfg.seed_size as i32);
        if cfg.confidence < 1.0 && miss < 1.0 {
            let needed = (1.0 - cfg.confidence).ln() / miss.ln();
            if (it + 1) as f64 >= needed {
                break;
            }
        }
    }
    let best = best.ok_or(Error::NoCircle)?;
    // Close the loop so the returned circle is the fit of its own inliers.
    let circle = fit_subset(points, &best.inliers)?;
    let inliers = inliers_of(points, &circle, cfg.inlier_tol);
    let circle = if inliers == best.inliers { circle } else { fit_subset(points, &inliers)? };
    if inliers.len() < cfg.min_inliers.max(cfg.seed_size) {
        return Err(Error::NoCircle);
    }
    Ok(RansacFit { circle, inliers })
}
