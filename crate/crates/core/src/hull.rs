//! 2D convex hull (Andrew's monotone chain).

use nalgebra::Vector2;

use crate::error::{Error, Result};

pub type Point2 = Vector2<f64>;

fn cross(o: &Point2, a: &Point2, b: &Point2) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

/// Counter-clockwise hull without collinear vertices.
///
/// Fails when the input has fewer than three non-collinear points.
pub fn convex_hull(points: &[Point2]) -> Result<Vec<Point2>> {
    let mut pts: Vec<Point2> = points.to_vec();
    pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    pts.dedup();
    if pts.len() < 3 {
        return Err(Error::DegenerateHull);
    }
    let mut hull: Vec<Point2> = Vec::with_capacity(2 * pts.len());
    for p in pts.iter() {
        while hull.len() >= 2 && cross(&hull[hull.len() - 2], &hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(*p);
    }
    let lower_len = hull.len() + 1;
    for p in pts.iter().rev().skip(1) {
        while hull.len() >= lower_len && cross(&hull[hull.len() - 2], &hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(*p);
    }
    hull.pop();
    if hull.len() < 3 {
        return Err(Error::DegenerateHull);
    }
    Ok(hull)
}

/// True when `p` is strictly inside the CCW convex polygon `hull`.
pub fn strictly_inside(hull: &[Point2], p: &Point2) -> bool {
    let n = hull.len();
    (0..n).all(|i| cross(&hull[i], &hull[(i + 1) % n], p) > 0.0)
}

/// True when `p` is inside or on the boundary, with tolerance `eps`.
pub fn contains(hull: &[Point2], p: &Point2, eps: f64) -> bool {
    let n = hull.len();
    (0..n).all(|i| {
        let a = &hull[i];
        let b = &hull[(i + 1) % n];
        let len = (b - a).norm();
        cross(a, b, p) >= -eps * len
    })
}

pub fn is_convex_ccw(hull: &[Point2]) -> bool {
    let n = hull.len();
    n >= 3 && (0..n).all(|i| cross(&hull[i], &hull[(i + 1) % n], &hull[(i + 2) % n]) > 0.0)
}
