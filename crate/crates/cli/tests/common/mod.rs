#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

pub fn borehole(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_borehole"))
        .args(args)
        .env_remove("BOREHOLE_CONFIG")
        .output()
        .expect("run borehole")
}

pub fn code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

pub fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Drops every `timings` key, recursively.
pub fn strip_timings(v: &mut Value) {
    match v {
        Value::Object(m) => {
            m.remove("timings");
            m.values_mut().for_each(strip_timings);
        }
        Value::Array(a) => a.iter_mut().for_each(strip_timings),
        _ => {}
    }
}

pub fn json_without_timings(text: &str) -> String {
    let mut v: Value = serde_json::from_str(text).unwrap();
    strip_timings(&mut v);
    v.to_string()
}

fn geometric_cost(points: &[(f64, f64)], a: f64, b: f64, r: f64) -> f64 {
    points.iter().map(|&(x, y)| ((x - a).hypot(y - b) - r).powi(2)).sum()
}

/// Geometric least squares by lattice search over `(a, b, r)`: the best node
/// of a 5x5x5 lattice becomes the next centre, and the spacing halves whenever
/// the centre node wins.
pub fn lattice_fit(points: &[(f64, f64)]) -> (f64, f64, f64) {
    let n = points.len() as f64;
    let a0 = points.iter().map(|p| p.0).sum::<f64>() / n;
    let b0 = points.iter().map(|p| p.1).sum::<f64>() / n;
    let r0 = points.iter().map(|&(x, y)| (x - a0).hypot(y - b0)).sum::<f64>() / n;
    let mut best = (a0, b0, r0);
    let mut cost = geometric_cost(points, a0, b0, r0);
    let mut step = r0 / 4.0;
    while step > 1e-7 {
        let centre = best;
        for i in -2..=2 {
            for j in -2..=2 {
                for k in -2..=2 {
                    let c = (centre.0 + i as f64 * step, centre.1 + j as f64 * step, centre.2 + k as f64 * step);
                    let e = geometric_cost(points, c.0, c.1, c.2);
                    if e < cost {
                        cost = e;
                        best = c;
                    }
                }
            }
        }
        if best == centre {
            step /= 2.0;
        }
    }
    best
}
