//! Coarse-to-fine hole detection and frame-to-frame tracking.
//!
//! The coarse stage renders the cone from above its centroid and looks for a
//! void near the image centre. When the cone is close, the fine stage renders
//! again from above that void, so the hole sits in the image centre and images
//! as a near-perfect circle, and fits it with FRST, RANSAC and candidate
//! scoring.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::camera::{back_project, project, settings_for, CameraSettings, DepthImage, FilterConfig};
use crate::circle_fit::{ransac_fit, Circle};
use crate::cloud::{transform_cloud, Frame, PointCloud};
use crate::cone::{extract_cones, ConeDetection};
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::frst::{extract_rois, frst, FrstMaps};
use crate::geometry::{shadow_frame_rotation, RigidTransform, RotationMatrix, Vec3};
use crate::nms::{gates, score_candidate, score_reg, select_best, Candidate, Gate};
use crate::pgm;
use crate::raster::{binarize, close_and_blur, components, sobel, BinaryImage, GradientImage, GrayImage};

/// Levels a sensor-frame cloud into the shadow frame.
///
/// `r_geo` is the robot attitude from the IMU; yaw does not affect the result.
pub fn level_cloud(cloud: &PointCloud, r_geo: &RotationMatrix, cfg: &PipelineConfig) -> Result<PointCloud> {
    let r = shadow_frame_rotation(r_geo, &cfg.sensor.ground_normal()?)?;
    let t = RigidTransform::new(r, Vec3::new(0.0, 0.0, cfg.sensor.mount_height));
    Ok(transform_cloud(cloud, &t, Frame::Shadow))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Coarse,
    Fine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HoleDetection {
    /// Hole centre at collar height (m, shadow frame).
    pub centre_3d: [f64; 3],
    /// Physical radius (m); coarse detections report the blob's equivalent radius.
    pub radius: f64,
    /// Normalized candidate score in `[0, 1]`.
    pub confidence: f64,
    pub stage: Stage,
    /// Centre in the image of the stage that produced it (px).
    pub pixel: (f64, f64),
    pub radius_px: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConeSummary {
    pub centroid: [f64; 3],
    pub height: f64,
    pub distance: f64,
    pub points: usize,
}

impl ConeSummary {
    fn of(cone: &ConeDetection) -> Self {
        ConeSummary {
            centroid: cone.centroid.into(),
            height: cone.height,
            distance: cone.distance(),
            points: cone.points.len(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoarseResult {
    pub blob_centre: (f64, f64),
    pub blob_area: usize,
    pub cone_area: usize,
    /// Blob centroid back-projected at the depth of the surface around it (m).
    pub centre_3d: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Miss {
    NoCone,
    NoConeBlob,
    NoVoid,
    NoCandidate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateReport {
    pub roi: usize,
    pub roi_centre: (f64, f64),
    pub roi_pixels: usize,
    pub candidate: Option<Candidate>,
    /// First gate the candidate failed; `None` for survivors.
    pub rejected_by: Option<Gate>,
    pub fit_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameReport {
    /// Every cone found in the frame, largest first.
    pub cones: Vec<ConeSummary>,
    /// The cone the hole search ran on.
    pub cone: Option<ConeSummary>,
    pub camera: Option<CameraSettings>,
    pub filter: Option<FilterConfig>,
    pub coarse: Option<CoarseResult>,
    pub fine_ran: bool,
    pub candidates: Vec<CandidateReport>,
    pub detection: Option<HoleDetection>,
    pub miss: Option<Miss>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub cone_ms: f64,
    pub coarse_ms: f64,
    pub fine_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone, Default)]
pub struct DebugImages {
    pub coarse_depth: Option<DepthImage>,
    pub coarse_gray: Option<GrayImage>,
    pub coarse_binary: Option<BinaryImage>,
    pub fine_depth: Option<DepthImage>,
    pub fine_gray: Option<GrayImage>,
    pub fine_binary: Option<BinaryImage>,
    pub fine_gradient: Option<GradientImage>,
    pub fine_frst: Option<FrstMaps>,
}

impl DebugImages {
    /// Writes every captured raster as `NN_name.pgm` into `dir`.
    pub fn write_all(&self, dir: impl AsRef<Path>) -> Result<Vec<String>> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        let mut out = |name: &str, f: &dyn Fn(&Path) -> Result<()>| -> Result<()> {
            let file = format!("{:02}_{name}.pgm", written.len());
            f(&dir.join(&file))?;
            written.push(file);
            Ok(())
        };
        if let Some(d) = &self.coarse_depth {
            out("coarse_depth", &|p| d.write_pgm(p))?;
        }
        if let Some(g) = &self.coarse_gray {
            out("coarse_gray", &|p| g.write_pgm(p))?;
        }
        if let Some(b) = &self.coarse_binary {
            out("coarse_binary", &|p| b.write_pgm(p))?;
        }
        if let Some(d) = &self.fine_depth {
            out("fine_depth", &|p| d.write_pgm(p))?;
        }
        if let Some(g) = &self.fine_gray {
            out("fine_gray", &|p| g.write_pgm(p))?;
        }
        if let Some(b) = &self.fine_binary {
            out("fine_binary", &|p| b.write_pgm(p))?;
        }
        if let Some(g) = &self.fine_gradient {
            let px = pgm::normalize_to_u8(&g.magnitude);
            out("fine_sobel", &|p| pgm::write_pgm8(p, g.width, g.height, &px, &[]))?;
        }
        if let Some(m) = &self.fine_frst {
            let px = pgm::normalize_to_u8(&m.s);
            out("fine_frst", &|p| pgm::write_pgm8(p, m.width, m.height, &px, &[]))?;
        }
        Ok(written)
    }
}

#[derive(Debug, Clone)]
pub struct FrameOutput {
    pub report: FrameReport,
    /// Extracted cone, kept for the tracker.
    pub cone: Option<ConeDetection>,
    pub timings: Timings,
    pub debug: Option<DebugImages>,
}

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

/// Projection point for a render centred on `(x, y)` at the cone's mean height.
fn projection_point(cone: &ConeDetection, x: f64, y: f64) -> Vec3 {
    Vec3::new(x, y, cone.centroid.z)
}

/// Coarse stage on an already projected image.
///
/// Returns `Err(miss)` when there is no cone blob or no qualifying void.
pub fn coarse_detect(
    img: &DepthImage,
    f: &FilterConfig,
    cfg: &PipelineConfig,
    debug: Option<&mut DebugImages>,
) -> Result<std::result::Result<CoarseResult, Miss>> {
    let gray = close_and_blur(img, f)?;
    let bin = binarize(&gray, f.binary_threshold);
    let whites = components(&bin, true);
    let blacks = components(&bin, false);
    let gray = match debug {
        Some(d) => {
            d.coarse_binary = Some(bin);
            &*d.coarse_gray.insert(gray)
        }
        None => &gray,
    };
    let Some(cone) = whites.first() else {
        return Ok(Err(Miss::NoConeBlob));
    };
    let s = &img.settings;
    let ground_depth = img.camera_pose.translation.z;
    let footprint = s.footprint_at(ground_depth);
    let r_min_px = cfg.hole_diameter_range.min / 2.0 / footprint;
    let min_area = cfg.coarse.min_area_factor * std::f64::consts::PI * r_min_px * r_min_px;
    let max_offset = cfg.coarse.centrality_fraction * s.width as f64;
    let offset = |b: &crate::raster::Blob| (b.centroid.0 - s.cx).hypot(b.centroid.1 - s.cy);
    let best = blacks
        .iter()
        .filter(|b| {
            !b.touches_border
                && cone.bbox_contains(b.centroid.0, b.centroid.1)
                && b.area as f64 >= min_area
                && offset(b) <= max_offset
        })
        .min_by(|a, b| offset(a).total_cmp(&offset(b)));
    let Some(blob) = best else {
        return Ok(Err(Miss::NoVoid));
    };
    // The void's edge is the surface the hole is cut into, not the plane
    // below the camera's projection point.
    let r_eq = (blob.area as f64 / std::f64::consts::PI).sqrt();
    let edge = Circle { a: blob.centroid.0, b: blob.centroid.1, r: r_eq };
    let depth = rim_depth(gray, &edge).unwrap_or(ground_depth);
    let p = back_project(blob.centroid, depth, s, &img.camera_pose)?;
    Ok(Ok(CoarseResult {
        blob_centre: blob.centroid,
        blob_area: blob.area,
        cone_area: cone.area,
        centre_3d: p.into(),
    }))
}

/// Median smoothed depth on a thin ring just outside `c`, over valid pixels.
fn rim_depth(gray: &GrayImage, c: &Circle) -> Option<f64> {
    let (w, h) = (gray.width, gray.height);
    let mut depths = Vec::new();
    let steps = (c.r * std::f64::consts::TAU).ceil().max(16.0) as usize;
    for ring in [2.0, 3.0, 4.0] {
        for k in 0..steps {
            let t = k as f64 * std::f64::consts::TAU / steps as f64;
            let (u, v) = (c.a + (c.r + ring) * t.cos(), c.b + (c.r + ring) * t.sin());
            if u < 0.0 || v < 0.0 || u >= w as f64 || v >= h as f64 {
                continue;
            }
            let i = v as usize * w + u as usize;
            if gray.mask[i] && gray.depth[i] > 0.0 {
                depths.push(gray.depth[i]);
            }
        }
    }
    if depths.is_empty() {
        return None;
    }
    depths.sort_by(f64::total_cmp);
    Some(depths[depths.len() / 2])
}

/// Fine stage: re-project above `centre` and fit the hole circle.
pub fn fine_detect(
    cone: &ConeDetection,
    centre: &Vec3,
    settings: &CameraSettings,
    f: &FilterConfig,
    cfg: &PipelineConfig,
    candidates: &mut Vec<CandidateReport>,
    mut debug: Option<&mut DebugImages>,
) -> Result<Option<HoleDetection>> {
    let point = projection_point(cone, centre.x, centre.y);
    let img = project(&cone.points, &point, settings);
    let gray = close_and_blur(&img, f)?;
    let bin = binarize(&gray, f.binary_threshold);
    let grad = sobel(&gray);

    let fine = &cfg.fine;
    let cam_z = img.camera_pose.translation.z;
    let rim_guess = (cam_z - cone.height).max(0.05);
    let footprint = settings.footprint_at(rim_guess);
    let (r_lo, r_hi) = (cfg.hole_diameter_range.min / 2.0, cfg.hole_diameter_range.max / 2.0);
    let frst_cfg = fine.frst.clone().with_physical_radii(r_lo, r_hi, footprint, fine.radius_spread, fine.radius_steps);
    let maps = frst(&grad, &frst_cfg)?;
    let rois = extract_rois(&maps, &grad, &frst_cfg);

    let mut nms = fine.nms;
    nms.radius_range = (
        r_lo / footprint * (1.0 - fine.radius_gate_margin),
        r_hi / footprint * (1.0 + fine.radius_gate_margin),
    );
    let mut survivors: Vec<Candidate> = Vec::new();
    for (k, roi) in rois.iter().enumerate() {
        let mut ransac = fine.ransac;
        ransac.rng_seed ^= k as u64;
        let mut report = CandidateReport {
            roi: k,
            roi_centre: roi.centre_hint,
            roi_pixels: roi.pixels.len(),
            candidate: None,
            rejected_by: None,
            fit_error: None,
        };
        match ransac_fit(&roi.pixels, &ransac) {
            Ok(fit) => {
                let valid: Vec<(f64, f64)> = fit.inliers.iter().map(|&i| roi.pixels[i]).collect();
                let c = score_candidate(fit.circle, &valid, roi.pixels.len(), roi.feature_count, &bin, &nms);
                match gates(&c, &nms) {
                    Ok(()) => survivors.push(c.clone()),
                    Err(g) => report.rejected_by = Some(g),
                }
                report.candidate = Some(c);
            }
            Err(e) => report.fit_error = Some(e.to_string()),
        }
        candidates.push(report);
    }

    let picked = match select_best(&survivors) {
        Ok(b) => Some(b.clone()),
        Err(Error::NoHole) => None,
        Err(e) => return Err(e),
    };
    if let Some(d) = debug.as_deref_mut() {
        d.fine_depth = Some(img.clone());
        d.fine_binary = Some(bin);
        d.fine_gradient = Some(grad);
        d.fine_frst = Some(maps);
    }
    let Some(cand) = picked else {
        if let Some(d) = debug {
            d.fine_gray = Some(gray);
        }
        return Ok(None);
    };
    let c = cand.circle;
    let depth = rim_depth(&gray, &c).unwrap_or(rim_guess);
    if let Some(d) = debug {
        d.fine_gray = Some(gray);
    }
    let radius = c.r * depth / settings.focal;
    let (lo, hi) = cfg.hole_diameter_range.radius_bounds();
    if !(radius >= lo && radius <= hi) {
        return Ok(None);
    }
    let p = back_project((c.a, c.b), depth, settings, &img.camera_pose)?;
    let norm = nms.alpha1 + nms.alpha2 + 1.0;
    Ok(Some(HoleDetection {
        centre_3d: p.into(),
        radius,
        confidence: (cand.scores.conf / norm).clamp(0.0, 1.0),
        stage: Stage::Fine,
        pixel: (c.a, c.b),
        radius_px: c.r,
    }))
}

/// Coarse and, when close enough, fine detection on an extracted cone.
pub fn detect_cone(cone: &ConeDetection, cfg: &PipelineConfig, want_debug: bool) -> Result<FrameOutput> {
    let t0 = Instant::now();
    let mut debug = want_debug.then(DebugImages::default);
    let distance = cone.distance();
    let size = cfg.projection.image_size;
    let (cam, filt) = settings_for(distance, cone.height, &cfg.projection.lut, (size, size))?;
    let point = projection_point(cone, cone.centroid.x, cone.centroid.y);
    let img = project(&cone.points, &point, &cam);
    let coarse = coarse_detect(&img, &filt, cfg, debug.as_mut())?;
    if let Some(d) = debug.as_mut() {
        d.coarse_depth = Some(img.clone());
    }
    let coarse_ms = ms(t0);
    let mut report = FrameReport {
        cones: Vec::new(),
        cone: Some(ConeSummary::of(cone)),
        camera: Some(cam),
        filter: Some(filt),
        coarse: None,
        fine_ran: false,
        candidates: Vec::new(),
        detection: None,
        miss: None,
    };
    let coarse = match coarse {
        Ok(c) => c,
        Err(miss) => {
            report.miss = Some(miss);
            let timings = Timings { coarse_ms, total_ms: coarse_ms, ..Default::default() };
            return Ok(FrameOutput { report, cone: None, timings, debug });
        }
    };
    report.coarse = Some(coarse);
    let t1 = Instant::now();
    let mut fine_ms = 0.0;
    if distance <= cfg.fine.activation_distance {
        report.fine_ran = true;
        let centre = Vec3::from(coarse.centre_3d);
        let det = fine_detect(cone, &centre, &cam, &filt, cfg, &mut report.candidates, debug.as_mut())?;
        report.detection = det;
        if det.is_none() {
            report.miss = Some(Miss::NoCandidate);
        }
        fine_ms = ms(t1);
    } else {
        let footprint = cam.footprint_at(img.camera_pose.translation.z);
        let offset = (coarse.blob_centre.0 - cam.cx).hypot(coarse.blob_centre.1 - cam.cy);
        let r_px = (coarse.blob_area as f64 / std::f64::consts::PI).sqrt();
        report.detection = Some(HoleDetection {
            centre_3d: coarse.centre_3d,
            radius: r_px * footprint,
            confidence: score_reg(offset).clamp(0.0, 1.0),
            stage: Stage::Coarse,
            pixel: coarse.blob_centre,
            radius_px: r_px,
        });
    }
    let timings = Timings {
        cone_ms: 0.0,
        coarse_ms,
        fine_ms,
        total_ms: ms(t0),
    };
    Ok(FrameOutput { report, cone: None, timings, debug })
}

/// Full single-frame detection on a levelled cloud, on the largest cone.
pub fn detect_frame(shadow: &PointCloud, cfg: &PipelineConfig, want_debug: bool) -> Result<FrameOutput> {
    detect_frame_near(shadow, cfg, None, want_debug)
}

/// As [`detect_frame`], but when `prefer` is given the cone whose centroid is
/// nearest to it (within the tracking gate) is used instead of the largest.
pub fn detect_frame_near(
    shadow: &PointCloud,
    cfg: &PipelineConfig,
    prefer: Option<[f64; 2]>,
    want_debug: bool,
) -> Result<FrameOutput> {
    let t0 = Instant::now();
    let mut cones = extract_cones(shadow, &cfg.cone, cfg.tracking.max_cones.max(1))?;
    let cone_ms = ms(t0);
    let summaries: Vec<ConeSummary> = cones.iter().map(ConeSummary::of).collect();
    let pick = match prefer {
        None => (!cones.is_empty()).then_some(0),
        Some([x, y]) => cones
            .iter()
            .enumerate()
            .map(|(i, c)| (i, (c.centroid.x - x).hypot(c.centroid.y - y)))
            .filter(|(_, d)| *d <= cfg.tracking.gate)
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(i, _)| i),
    };
    let Some(pick) = pick else {
        let mut report = no_cone_report();
        report.cones = summaries;
        return Ok(FrameOutput {
            report,
            cone: None,
            timings: Timings { cone_ms, total_ms: cone_ms, ..Default::default() },
            debug: want_debug.then(DebugImages::default),
        });
    };
    let cone = cones.swap_remove(pick);
    let mut out = detect_cone(&cone, cfg, want_debug)?;
    out.report.cones = summaries;
    out.timings.cone_ms = cone_ms;
    out.timings.total_ms += cone_ms;
    out.cone = Some(cone);
    Ok(out)
}

fn no_cone_report() -> FrameReport {
    FrameReport {
        cones: Vec::new(),
        cone: None,
        camera: None,
        filter: None,
        coarse: None,
        fine_ran: false,
        candidates: Vec::new(),
        detection: None,
        miss: Some(Miss::NoCone),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Lidar {
    Sparse,
    Dense,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackState {
    pub target_distance: Option<f64>,
    pub cone: Option<ConeDetection>,
    pub last_detection: Option<HoleDetection>,
    pub active_lidar: Lidar,
    /// Tracked cone centroid in the odometry frame, when poses are supplied.
    pub target_odom: Option<[f64; 2]>,
    /// Consecutive frames without a cone.
    pub missed_frames: usize,
    pub lost: bool,
}

impl Default for TrackState {
    fn default() -> Self {
        TrackState {
            target_distance: None,
            cone: None,
            last_detection: None,
            active_lidar: Lidar::Sparse,
            target_odom: None,
            missed_frames: 0,
            lost: false,
        }
    }
}

/// Serializable view of a [`TrackState`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackSummary {
    pub target_distance: Option<f64>,
    pub target_odom: Option<[f64; 2]>,
    pub active_lidar: Lidar,
    pub missed_frames: usize,
    pub lost: bool,
    pub last_detection: Option<HoleDetection>,
}

impl TrackState {
    pub fn summary(&self) -> TrackSummary {
        TrackSummary {
            target_distance: self.target_distance,
            target_odom: self.target_odom,
            active_lidar: self.active_lidar,
            missed_frames: self.missed_frames,
            lost: self.lost,
            last_detection: self.last_detection,
        }
    }
}

/// Next active LiDAR: switch to dense at `switch`, back to sparse only past
/// `switch + hysteresis`.
pub fn next_lidar(current: Lidar, distance: f64, switch: f64, hysteresis: f64) -> Lidar {
    match current {
        Lidar::Sparse if distance <= switch => Lidar::Dense,
        Lidar::Dense if distance > switch + hysteresis => Lidar::Sparse,
        other => other,
    }
}

/// Planar robot pose in the odometry frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl Pose2 {
    pub fn new(x: f64, y: f64, yaw: f64) -> Self {
        Pose2 { x, y, yaw }
    }

    /// Body-frame point into this pose's parent frame.
    pub fn to_parent(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.yaw.sin_cos();
        [self.x + c * p[0] - s * p[1], self.y + s * p[0] + c * p[1]]
    }

    /// Parent-frame point into the body frame.
    pub fn to_body(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.yaw.sin_cos();
        let (dx, dy) = (p[0] - self.x, p[1] - self.y);
        [c * dx + s * dy, -s * dx + c * dy]
    }
}

/// One tracking update on a levelled frame.
///
/// With a `robot_pose`, the tracked cone is predicted into the new frame and
/// the nearest cone is followed; without one, the largest cone is used.
pub fn track_step(
    frame: &PointCloud,
    robot_pose: Option<&Pose2>,
    state: &TrackState,
    cfg: &PipelineConfig,
    want_debug: bool,
) -> Result<(TrackState, FrameOutput)> {
    let prefer = match (robot_pose, state.target_odom) {
        (Some(pose), Some(target)) => Some(pose.to_body(target)),
        _ => None,
    };
    let out = detect_frame_near(frame, cfg, prefer, want_debug)?;
    let mut next = state.clone();
    let (Some(summary), Some(cone)) = (&out.report.cone, &out.cone) else {
        next.missed_frames += 1;
        next.lost = next.missed_frames > cfg.tracking.lost_frames;
        return Ok((next, out));
    };
    let t = &cfg.tracking;
    next.missed_frames = 0;
    next.lost = false;
    next.target_distance = Some(summary.distance);
    next.target_odom = robot_pose.map(|p| p.to_parent([cone.centroid.x, cone.centroid.y]));
    next.active_lidar = next_lidar(state.active_lidar, summary.distance, t.dense_lidar_distance, t.hysteresis);
    if out.report.detection.is_some() {
        next.last_detection = out.report.detection;
    }
    next.cone = Some(cone.clone());
    Ok((next, out))
}
