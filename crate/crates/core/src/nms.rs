//! Candidate gating, scoring and selection.

use serde::{Deserialize, Serialize};

use crate::circle_fit::Circle;
use crate::error::{Error, Result};
use crate::raster::BinaryImage;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NmsConfig {
    /// Accepted radius range (px). The pipeline rescales this per frame.
    pub radius_range: (f64, f64),
    pub circularity_threshold: f64,
    pub black_fraction_min: f64,
    pub centrality_threshold: f64,
    pub frst_threshold: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub bins: usize,
    pub sigma: f64,
}

impl Default for NmsConfig {
    fn default() -> Self {
        NmsConfig {
            radius_range: (10.0, 60.0),
            circularity_threshold: 0.5,
            black_fraction_min: 0.7,
            centrality_threshold: 0.1,
            frst_threshold: 0.05,
            alpha1: 0.5,
            alpha2: 0.5,
            bins: 36,
            sigma: 0.05,
        }
    }
}

impl NmsConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.radius_range;
        if !(lo > 0.0 && lo < hi) {
            return Err(Error::Config("radius range must satisfy 0 < min < max".into()));
        }
        for t in [
            self.circularity_threshold,
            self.black_fraction_min,
            self.centrality_threshold,
            self.frst_threshold,
        ] {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Config("NMS thresholds must lie in [0, 1]".into()));
            }
        }
        if self.bins < 4 {
            return Err(Error::Config("circularity needs at least 4 bins".into()));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::Config("circularity sigma must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub frst: f64,
    pub reg: f64,
    pub circle: f64,
    pub conf: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub circle: Circle,
    pub feature_count: usize,
    /// Distance from the image centre (px).
    pub offset: f64,
    pub inliers: usize,
    pub roi_size: usize,
    pub black_fraction: f64,
    pub scores: Scores,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Gate {
    RadiusRange,
    Circularity,
    BlackFraction,
    Centrality,
    Frst,
}

/// `1 / (1 + 3 exp(3 - 0.1 |F|))`.
pub fn score_frst(feature_count: usize) -> f64 {
    1.0 / (1.0 + 3.0 * (3.0 - 0.1 * feature_count as f64).exp())
}

/// `1.2 / (1 + 50 exp(0.05 d - 5.5))` for centre offset `d` (px).
pub fn score_reg(d: f64) -> f64 {
    1.2 / (1.0 + 50.0 * (0.05 * d - 5.5).exp())
}

/// Mean over `bins` angular bins of `exp(-e_b / 2σ²)`, where `e_b` is the
/// running mean of `(1 - |p - c| / r)²` in that bin. Empty bins score 0.
pub fn score_circularity(points: &[(f64, f64)], c: &Circle, bins: usize, sigma: f64) -> f64 {
    let mut mse = vec![0.0; bins];
    let mut count = vec![0usize; bins];
    for &(x, y) in points {
        let (vx, vy) = ((x - c.a) / c.r, (y - c.b) / c.r);
        let e = (1.0 - vx.hypot(vy)).powi(2);
        let t = vy.atan2(vx).rem_euclid(std::f64::consts::TAU);
        let b = ((t / std::f64::consts::TAU * bins as f64) as usize).min(bins - 1);
        mse[b] = (count[b] as f64 * mse[b] + e) / (count[b] as f64 + 1.0);
        count[b] += 1;
    }
    let total: f64 = (0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| (-0.5 * mse[b] / (sigma * sigma)).exp())
        .sum();
    total / bins as f64
}

/// Fraction of pixels whose centre lies inside the circle that are black.
pub fn black_fraction(img: &BinaryImage, c: &Circle) -> f64 {
    let u0 = (c.a - c.r).floor().max(0.0) as usize;
    let v0 = (c.b - c.r).floor().max(0.0) as usize;
    let u1 = ((c.a + c.r).ceil().max(0.0) as usize).min(img.width);
    let v1 = ((c.b + c.r).ceil().max(0.0) as usize).min(img.height);
    let (mut inside, mut black) = (0usize, 0usize);
    for v in v0..v1 {
        for u in u0..u1 {
            if (u as f64 + 0.5 - c.a).hypot(v as f64 + 0.5 - c.b) <= c.r {
                inside += 1;
                black += !img.get(u, v) as usize;
            }
        }
    }
    if inside == 0 {
        0.0
    } else {
        black as f64 / inside as f64
    }
}

/// Scores one fitted ROI. `valid` are the ROI pixels RANSAC kept as circle
/// points; circularity is measured on them.
pub fn score_candidate(
    circle: Circle,
    valid: &[(f64, f64)],
    roi_size: usize,
    feature_count: usize,
    img: &BinaryImage,
    cfg: &NmsConfig,
) -> Candidate {
    let centre = (img.width as f64 / 2.0, img.height as f64 / 2.0);
    let offset = (circle.a - centre.0).hypot(circle.b - centre.1);
    let frst = score_frst(feature_count);
    let reg = score_reg(offset);
    let circ = score_circularity(valid, &circle, cfg.bins, cfg.sigma);
    Candidate {
        circle,
        feature_count,
        offset,
        inliers: valid.len(),
        roi_size,
        black_fraction: black_fraction(img, &circle),
        scores: Scores {
            frst,
            reg,
            circle: circ,
            conf: cfg.alpha1 * frst + cfg.alpha2 * reg + circ,
        },
    }
}

/// First failing gate, in the documented order.
pub fn gates(c: &Candidate, cfg: &NmsConfig) -> std::result::Result<(), Gate> {
    let (lo, hi) = cfg.radius_range;
    if !(c.circle.r >= lo && c.circle.r <= hi) {
        return Err(Gate::RadiusRange);
    }
    if c.scores.circle < cfg.circularity_threshold {
        return Err(Gate::Circularity);
    }
    if c.black_fraction < cfg.black_fraction_min {
        return Err(Gate::BlackFraction);
    }
    if c.scores.reg < cfg.centrality_threshold {
        return Err(Gate::Centrality);
    }
    if c.scores.frst < cfg.frst_threshold {
        return Err(Gate::Frst);
    }
    Ok(())
}

/// Highest confidence; ties go to higher circularity, then smaller offset.
pub fn select_best(candidates: &[Candidate]) -> Result<&Candidate> {
    candidates
        .iter()
        .reduce(|best, c| {
            let better = c
                .scores
                .conf
                .total_cmp(&best.scores.conf)
                .then(c.scores.circle.total_cmp(&best.scores.circle))
                .then(best.offset.total_cmp(&c.offset));
            if better.is_gt() {
                c
            } else {
                best
            }
        })
        .ok_or(Error::NoHole)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn score_point_values() {
        assert!((score_frst(30) - 0.25).abs() < 1e-12);
        assert!((score_frst(0) - 0.01632).abs() < 1e-5);
        assert!((score_reg(0.0) - 0.99640).abs() < 1e-5);
        assert!((score_reg(110.0) - 0.02353).abs() < 1e-5);
        assert!(score_frst(1000) > 0.999_999);
    }

    proptest! {
        #[test]
        fn scores_bounded_and_monotone(f in 0usize..10_000, d in 0.0..1e4f64, e in 0.0..1e4f64) {
            prop_assert!((0.0..=1.0).contains(&score_frst(f)));
            prop_assert!(score_frst(f + 1) >= score_frst(f));
            prop_assert!((0.0..=1.0).contains(&score_reg(d)));
            let (lo, hi) = if d < e { (d, e) } else { (e, d) };
            prop_assert!(score_reg(lo) >= score_reg(hi));
        }

        #[test]
        fn circularity_bin_rotation_invariant(k in 0usize..36, seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = Circle { a: 3.0, b: -2.0, r: 10.0 };
            // Points at bin centres so rotation by a bin width is an exact permutation.
            let pts: Vec<(f64, f64)> = (0..80).map(|_| {
                let b = rng.random_range(0..36) as f64;
                let t = (b + 0.5) * std::f64::consts::TAU / 36.0;
                let r = 10.0 + rng.random_range(-0.8..0.8);
                (3.0 + r * t.cos(), -2.0 + r * t.sin())
            }).collect();
            let rot = k as f64 * std::f64::consts::TAU / 36.0;
            let (s, co) = rot.sin_cos();
            let moved: Vec<(f64, f64)> = pts.iter().map(|&(x, y)| {
                let (dx, dy) = (x - 3.0, y + 2.0);
                (3.0 + co * dx - s * dy, -2.0 + s * dx + co * dy)
            }).collect();
            let a = score_circularity(&pts, &c, 36, 0.05);
            let b = score_circularity(&moved, &c, 36, 0.05);
            prop_assert!((a - b).abs() < 1e-9);
        }

        #[test]
        fn incremental_mean_equals_batch(errs in prop::collection::vec(0.0..1.0f64, 1..50)) {
            let mut m = 0.0;
            for (n, e) in errs.iter().enumerate() {
                m = (n as f64 * m + e) / (n as f64 + 1.0);
            }
            let batch = errs.iter().sum::<f64>() / errs.len() as f64;
            prop_assert!((m - batch).abs() < 1e-12);
        }
    }

    fn on_circle(c: &Circle, angles: impl Iterator<Item = f64>) -> Vec<(f64, f64)> {
        angles.map(|t| (c.a + c.r * t.cos(), c.b + c.r * t.sin())).collect()
    }

    #[test]
    fn circularity_coverage() {
        let c = Circle { a: 0.0, b: 0.0, r: 20.0 };
        let full = on_circle(&c, (0..360).map(|i| (i as f64 + 0.5).to_radians()));
        assert!((score_circularity(&full, &c, 36, 0.05) - 1.0).abs() < 1e-12);
        let half = on_circle(&c, (0..180).map(|i| (i as f64 + 0.5).to_radians()));
        assert!((score_circularity(&half, &c, 36, 0.05) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn circularity_monte_carlo_at_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let c = Circle { a: 0.0, b: 0.0, r: 1.0 };
        let n = Normal::new(0.0, 0.05).unwrap();
        let pts: Vec<(f64, f64)> = (0..10_000)
            .map(|_| {
                let t = rng.random_range(0.0..std::f64::consts::TAU);
                let r = 1.0 + n.sample(&mut rng);
                (r * t.cos(), r * t.sin())
            })
            .collect();
        let s = score_circularity(&pts, &c, 36, 0.05);
        assert!((s - (-0.5f64).exp()).abs() < 0.02, "{s}");
    }

    fn candidate(r: f64, offset: f64, conf: f64, circ: f64) -> Candidate {
        Candidate {
            circle: Circle { a: 200.0 + offset, b: 200.0, r },
            feature_count: 60,
            offset,
            inliers: 100,
            roi_size: 120,
            black_fraction: 0.95,
            scores: Scores { frst: 0.9, reg: score_reg(offset), circle: circ, conf },
        }
    }

    #[test]
    fn gate_order() {
        let cfg = NmsConfig::default();
        assert_eq!(gates(&candidate(2.0, 0.0, 1.0, 0.9), &cfg), Err(Gate::RadiusRange));
        assert_eq!(gates(&candidate(30.0, 0.0, 1.0, 0.2), &cfg), Err(Gate::Circularity));
        let mut c = candidate(30.0, 0.0, 1.0, 0.9);
        c.black_fraction = 0.02;
        assert_eq!(gates(&c, &cfg), Err(Gate::BlackFraction));
        assert_eq!(gates(&candidate(30.0, 150.0, 1.0, 0.9), &cfg), Err(Gate::Centrality));
        assert_eq!(gates(&candidate(30.0, 0.0, 1.0, 0.9), &cfg), Ok(()));
    }

    #[test]
    fn central_hole_beats_phantom() {
        let cfg = NmsConfig::default();
        let img = BinaryImage { width: 400, height: 400, data: vec![false; 160_000] };
        let pts_at = |a: f64| on_circle(&Circle { a, b: 200.0, r: 30.0 }, (0..72).map(|i| (i as f64 * 5.0).to_radians()));
        let central = score_candidate(Circle { a: 200.0, b: 200.0, r: 30.0 }, &pts_at(200.0), 72, 60, &img, &cfg);
        let phantom = score_candidate(Circle { a: 270.0, b: 200.0, r: 30.0 }, &pts_at(270.0), 72, 60, &img, &cfg);
        let pair = [phantom, central.clone()];
        assert_eq!(select_best(&pair).unwrap(), &central);
        assert!(select_best(&[]).is_err());
    }

    #[test]
    fn ties_and_scaling() {
        let a = candidate(30.0, 5.0, 1.5, 0.8);
        let b = candidate(30.0, 2.0, 1.5, 0.8);
        let c = candidate(30.0, 9.0, 1.5, 0.9);
        assert_eq!(select_best(&[a.clone(), b.clone()]).unwrap().offset, 2.0);
        assert_eq!(select_best(&[a.clone(), b.clone(), c.clone()]).unwrap().offset, 9.0);
        let scaled: Vec<Candidate> = [a, b, c]
            .into_iter()
            .map(|mut x| {
                x.scores.conf *= 3.0;
                x
            })
            .collect();
        assert_eq!(select_best(&scaled).unwrap().offset, 9.0);
        let one = [candidate(30.0, 1.0, 0.1, 0.1)];
        assert_eq!(select_best(&one).unwrap(), &one[0]);
    }

    #[test]
    fn black_fraction_over_white_is_zero() {
        let img = BinaryImage { width: 50, height: 50, data: vec![true; 2500] };
        assert_eq!(black_fraction(&img, &Circle { a: 25.0, b: 25.0, r: 10.0 }), 0.0);
    }
}
