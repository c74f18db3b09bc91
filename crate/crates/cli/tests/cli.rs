mod common;

use std::fs;
use std::path::Path;

use common::{arg, borehole, code, json_without_timings, lattice_fit};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde_json::Value;

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn fit(csv: &str, extra: &[&str]) -> Value {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("points.csv");
    fs::write(&p, csv).unwrap();
    let mut args = vec!["fit-circle"];
    args.extend_from_slice(extra);
    args.push(arg(&p));
    let out = borehole(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn circle_csv(a: f64, b: f64, r: f64, n: usize) -> String {
    let mut s = String::from("x,y\n");
    for k in 0..n {
        let t = k as f64 / n as f64 * std::f64::consts::TAU;
        s.push_str(&format!("{},{}\n", a + r * t.cos(), b + r * t.sin()));
    }
    s
}

fn close(v: &Value, key: &str, want: f64, tol: f64) {
    let got = v[key].as_f64().unwrap();
    assert!((got - want).abs() < tol, "{key}: {got} vs {want}");
}

#[test]
fn fit_circle_unit_and_translated() {
    let unit = fit(&circle_csv(0.0, 0.0, 1.0, 24), &[]);
    close(&unit, "a", 0.0, 1e-9);
    close(&unit, "b", 0.0, 1e-9);
    close(&unit, "r", 1.0, 1e-9);
    let moved = fit(&circle_csv(12.5, -3.0, 1.0, 24), &[]);
    close(&moved, "a", 12.5, 1e-9);
    close(&moved, "b", -3.0, 1e-9);
    close(&moved, "r", 1.0, 1e-9);
}

#[test]
fn fit_circle_noisy_matches_lattice_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(467);
    let noise = Normal::new(0.0, 0.5).unwrap();
    let pts: Vec<(f64, f64)> = (0..200)
        .map(|_| {
            let t = rng.random_range(0.0..std::f64::consts::TAU);
            let r = 40.0 + noise.sample(&mut rng);
            (12.5 + r * t.cos(), -3.0 + r * t.sin())
        })
        .collect();
    let csv: String = pts.iter().map(|(x, y)| format!("{x},{y}\n")).collect();
    let got = fit(&csv, &[]);
    let (a, b, r) = lattice_fit(&pts);
    close(&got, "a", a, 0.1);
    close(&got, "b", b, 0.1);
    close(&got, "r", r, 0.1);
}

#[test]
fn fit_circle_ransac_reports_inliers() {
    let mut csv = circle_csv(5.0, 5.0, 30.0, 60);
    csv.push_str("0,0\n40,-20\n-15,33\n");
    let got = fit(&csv, &["--ransac"]);
    close(&got, "r", 30.0, 1e-6);
    assert_eq!(got["inliers"], 60);
}

#[test]
fn detect_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let near = d.join("near");
    let far = d.join("far");
    assert_eq!(code(&borehole(&["--seed", "3", "--out", arg(&near), "simulate", "scene", "--distance", "0.5"])), 0);
    assert_eq!(code(&borehole(&["--seed", "3", "--out", arg(&far), "simulate", "scene", "--distance", "6"])), 0);

    let out = d.join("det_near");
    assert_eq!(code(&borehole(&["--out", arg(&out), "detect", arg(&near.join("cloud.bin"))])), 0);
    let report = read_json(&out.join("report.json"));
    let truth = read_json(&near.join("truth.json"));
    let got: Vec<f64> = serde_json::from_value(report["report"]["detection"]["centre_3d"].clone()).unwrap();
    let want: Vec<f64> = serde_json::from_value(truth["frames"][0]["hole_centre_shadow"].clone()).unwrap();
    let err = got.iter().zip(&want).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    assert!(err <= 0.02, "centre error {err}");
    assert!(report["timings"]["total_ms"].as_f64().unwrap() > 0.0);

    let far_out = d.join("det_far");
    assert_eq!(code(&borehole(&["--out", arg(&far_out), "detect", arg(&far.join("cloud.bin"))])), 2);
    assert!(read_json(&far_out.join("report.json"))["report"]["detection"].is_null());

    let empty = d.join("empty.bin");
    fs::write(&empty, b"").unwrap();
    assert_eq!(code(&borehole(&["--out", arg(&d.join("e")), "detect", arg(&empty)])), 1);
    assert_eq!(code(&borehole(&["--out", arg(&d.join("e")), "detect", arg(&d.join("missing.bin"))])), 1);
}

#[test]
fn detect_levels_tilted_clouds_and_writes_debug_images() {
    let dir = tempfile::tempdir().unwrap();
    let scene = dir.path().join("scene");
    let args = ["--seed", "8", "--out", arg(&scene), "simulate", "scene", "--distance", "0.4", "--roll", "4", "--pitch", "-3"];
    assert_eq!(code(&borehole(&args)), 0);
    let out = dir.path().join("det");
    let cloud = scene.join("cloud.bin");
    let args = ["--out", arg(&out), "--debug-images", "detect", arg(&cloud), "--roll", "4", "--pitch", "-3"];
    assert_eq!(code(&borehole(&args)), 0);
    let n = fs::read_dir(out.join("debug")).unwrap().count();
    assert_eq!(n, 8);
}

#[test]
fn bad_config_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"cone": {"no_such_key": 1}}"#).unwrap();
    let out = borehole(&["--config", arg(&cfg), "--out", arg(dir.path()), "simulate", "scene"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));
}

fn track_lines(dir: &Path) -> Vec<Value> {
    fs::read_to_string(dir.join("track.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn track_single_frame_equals_detect() {
    let dir = tempfile::tempdir().unwrap();
    let scene = dir.path().join("scene");
    assert_eq!(code(&borehole(&["--seed", "2", "--out", arg(&scene), "simulate", "scene", "--distance", "0.7"])), 0);
    let det = dir.path().join("det");
    assert_eq!(code(&borehole(&["--out", arg(&det), "detect", arg(&scene.join("cloud.bin"))])), 0);
    let trk = dir.path().join("trk");
    assert_eq!(code(&borehole(&["--out", arg(&trk), "track", arg(&scene)])), 0);
    let lines = track_lines(&trk);
    assert_eq!(lines.len(), 1);
    assert_eq!(lines[0]["report"], read_json(&det.join("report.json"))["report"]);
}

#[test]
fn track_approach_radius_converges_and_order_matters() {
    let dir = tempfile::tempdir().unwrap();
    let scene = dir.path().join("scene");
    let args = [
        "--seed", "4", "--out", arg(&scene), "simulate", "scene", "--distance", "4,3,2,1.4,1,0.7,0.4,0.2", "--bearing", "30",
    ];
    assert_eq!(code(&borehole(&args)), 0);
    let truth = read_json(&scene.join("truth.json"));
    let radius = truth["frames"][0]["hole_radius"].as_f64().unwrap();
    let poses = scene.join("poses.csv");

    let trk = dir.path().join("trk");
    assert_eq!(code(&borehole(&["--out", arg(&trk), "track", arg(&scene), "--poses", arg(&poses)])), 0);
    let lines = track_lines(&trk);
    let errors: Vec<f64> = lines
        .iter()
        .map(|l| &l["report"]["detection"])
        .filter(|d| d["stage"] == "fine")
        .filter_map(|d| d["radius"].as_f64())
        .map(|r| (r - radius).abs())
        .collect();
    assert!(errors.len() >= 3, "{errors:?}");
    // Fine-stage radius error shrinks along the approach, up to a millimetre of noise.
    assert!(errors.windows(2).all(|w| w[1] <= w[0] + 1e-3), "{errors:?}");
    assert!(errors.last().unwrap() / radius < 0.05);
    let lidars: Vec<&str> = lines.iter().map(|l| l["track"]["active_lidar"].as_str().unwrap()).collect();
    assert_eq!(lidars.first(), Some(&"sparse"));
    assert_eq!(lidars.last(), Some(&"dense"));

    // Same frames, reversed order.
    let text = fs::read_to_string(&poses).unwrap();
    let mut rows: Vec<&str> = text.lines().collect();
    rows[1..].reverse();
    let shuffled = scene.join("reversed.csv");
    fs::write(&shuffled, rows.join("\n") + "\n").unwrap();
    let trk2 = dir.path().join("trk2");
    assert_eq!(code(&borehole(&["--out", arg(&trk2), "track", arg(&scene), "--poses", arg(&shuffled)])), 0);
    let summary = |l: &Vec<Value>| l.iter().map(|v| v["track"].to_string()).collect::<Vec<_>>();
    assert_ne!(summary(&lines), summary(&track_lines(&trk2)));
}

#[test]
fn mission_from_plan_dips_every_hole() {
    let dir = tempfile::tempdir().unwrap();
    let plan = dir.path().join("plan.csv");
    fs::write(&plan, "id,x,y,column\nA1,0,0,A\nA2,0,4,A\nA3,0,8,A\nB1,5,0,B\nB2,5,4,B\n").unwrap();
    let out = dir.path().join("m");
    let args = ["--seed", "3", "--out", arg(&out), "simulate", "mission", "--plan", arg(&plan), "--perception", "oracle"];
    assert_eq!(code(&borehole(&args)), 0);
    let log = read_json(&out.join("run_log.json"));
    assert_eq!(log["summary"]["dipped"], 5);
    let written = fs::read_to_string(out.join("plan.csv")).unwrap();
    assert_eq!(written.lines().count(), 6);
    assert!(written.contains("B2,5.0,4.0,B"));
}

#[test]
fn every_subcommand_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let run = |k: usize| {
        let base = dir.path().join(k.to_string());
        let scene = base.join("scene");
        assert_eq!(code(&borehole(&["--seed", "6", "--out", arg(&scene), "simulate", "scene", "--distance", "1,0.5", "--pits", "1"])), 0);
        borehole(&["--out", arg(&base.join("det")), "detect", arg(&scene.join("cloud_001.bin"))]);
        borehole(&["--out", arg(&base.join("trk")), "track", arg(&scene), "--poses", arg(&scene.join("poses.csv"))]);
        borehole(&["--seed", "6", "--out", arg(&base.join("sw")), "simulate", "sweep", "--distances", "2", "--scenes", "2"]);
        borehole(&["--seed", "6", "--out", arg(&base.join("m")), "simulate", "mission", "--perception", "oracle"]);
        base
    };
    let (a, b) = (run(0), run(1));
    for rel in ["scene/cloud_000.bin", "scene/cloud_001.csv", "scene/truth.json", "sw/sweep.json", "m/run_log.json"] {
        assert_eq!(fs::read(a.join(rel)).unwrap(), fs::read(b.join(rel)).unwrap(), "{rel}");
    }
    let text = |p: &Path, rel: &str| fs::read_to_string(p.join(rel)).unwrap();
    assert_eq!(json_without_timings(&text(&a, "det/report.json")), json_without_timings(&text(&b, "det/report.json")));
    let lines = |p: &Path| text(p, "trk/track.jsonl").lines().map(json_without_timings).collect::<Vec<_>>();
    assert_eq!(lines(&a), lines(&b));
}
