//! Random bench sites and sensor placements for sweeps.

use borehole_core::cloud::PointCloud;
use borehole_core::config::PipelineConfig;
use borehole_core::cone::extract_cones;
use borehole_core::geometry::{RigidTransform, RotationMatrix, Vec3};
use borehole_core::pipeline::{detect_frame, level_cloud, Lidar, Stage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::lidar::{raycast, BeamPattern};
use crate::scene::{HoleSite, Label, Pit, Scene, SceneSpec};
use crate::SimError;

/// Uniform sampling ranges for [`sample_site`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SiteRanges {
    pub cone_height: (f64, f64),
    pub base_radius: (f64, f64),
    pub hole_diameter: (f64, f64),
    pub pit_fraction: (f64, f64),
    pub pit_radius: (f64, f64),
    pub pit_depth: (f64, f64),
}

impl Default for SiteRanges {
    fn default() -> Self {
        SiteRanges {
            cone_height: (0.4, 0.7),
            base_radius: (0.8, 1.2),
            hole_diameter: (0.24, 0.30),
            pit_fraction: (0.82, 0.92),
            pit_radius: (0.06, 0.10),
            pit_depth: (0.03, 0.05),
        }
    }
}

fn uniform(rng: &mut impl Rng, r: (f64, f64)) -> f64 {
    if r.0 < r.1 {
        rng.random_range(r.0..r.1)
    } else {
        r.0
    }
}

pub fn sample_site(rng: &mut impl Rng, centre: [f64; 2], ranges: &SiteRanges, pits: usize) -> HoleSite {
    let mut site = HoleSite::new(
        centre,
        uniform(rng, ranges.base_radius),
        uniform(rng, ranges.cone_height),
        uniform(rng, ranges.hole_diameter),
    );
    for _ in 0..pits {
        site.pits.push(Pit {
            bearing: rng.random_range(0.0..std::f64::consts::TAU),
            radial_fraction: uniform(rng, ranges.pit_fraction),
            radius: uniform(rng, ranges.pit_radius),
            depth: uniform(rng, ranges.pit_depth),
        });
    }
    site
}

/// Planar robot pose with attitude; the sensor sits `height` above the base.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorPose {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
    pub roll: f64,
    pub pitch: f64,
    pub height: f64,
}

impl SensorPose {
    pub fn level(x: f64, y: f64, yaw: f64, height: f64) -> Self {
        SensorPose { x, y, yaw, roll: 0.0, pitch: 0.0, height }
    }

    /// Sensor-to-world transform.
    pub fn transform(&self) -> RigidTransform {
        RigidTransform::new(
            RotationMatrix::from_rpy(self.roll, self.pitch, self.yaw),
            Vec3::new(self.x, self.y, self.height),
        )
    }

    /// Attitude without heading, as an IMU would level it.
    pub fn attitude(&self) -> RotationMatrix {
        RotationMatrix::from_rpy(self.roll, self.pitch, 0.0)
    }

    /// World point expressed in this robot's shadow frame.
    pub fn world_to_shadow(&self, p: &Vec3) -> Vec3 {
        let (s, c) = self.yaw.sin_cos();
        let (dx, dy) = (p.x - self.x, p.y - self.y);
        Vec3::new(c * dx + s * dy, -s * dx + c * dy, p.z)
    }

    pub fn shadow_to_world(&self, p: &Vec3) -> Vec3 {
        let (s, c) = self.yaw.sin_cos();
        Vec3::new(self.x + c * p.x - s * p.y, self.y + s * p.x + c * p.y, p.z)
    }
}

/// Pose `distance` from `site`'s axis along `bearing`, facing the hole.
pub fn facing_pose(site: &HoleSite, distance: f64, bearing: f64, height: f64) -> SensorPose {
    let x = site.centre[0] + distance * bearing.cos();
    let y = site.centre[1] + distance * bearing.sin();
    SensorPose::level(x, y, bearing + std::f64::consts::PI, height)
}

/// One raycast frame in the sensor frame.
pub fn capture(
    scene: &Scene,
    pose: &SensorPose,
    pattern: &BeamPattern,
    seed: u64,
) -> Result<(PointCloud, Vec<Label>), SimError> {
    raycast(scene, &pose.transform(), pattern, seed)
}

pub(crate) fn pipeline_err(e: borehole_core::error::Error) -> SimError {
    SimError::Pipeline(e.to_string())
}

/// Which LiDAR a trial uses; `Auto` follows the tracker's switch distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LidarChoice {
    Dense,
    Sparse,
    Auto,
}

impl LidarChoice {
    pub fn resolve(self, distance: f64, cfg: &PipelineConfig) -> Lidar {
        match self {
            LidarChoice::Dense => Lidar::Dense,
            LidarChoice::Sparse => Lidar::Sparse,
            LidarChoice::Auto if distance <= cfg.tracking.dense_lidar_distance => Lidar::Dense,
            LidarChoice::Auto => Lidar::Sparse,
        }
    }
}

pub fn pattern_for(lidar: Lidar) -> BeamPattern {
    match lidar {
        Lidar::Dense => BeamPattern::dense(),
        Lidar::Sparse => BeamPattern::sparse(),
    }
}

/// One seeded single-site scene viewed from `distance`, facing the hole
/// from a random bearing.
#[derive(Debug, Clone)]
pub struct Trial {
    pub seed: u64,
    pub distance: f64,
    pub site: HoleSite,
    pub pose: SensorPose,
    pub scene: Scene,
}

impl Trial {
    pub fn new(seed: u64, distance: f64, pits: usize, ranges: &SiteRanges) -> Result<Self, SimError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let site = sample_site(&mut rng, [0.0, 0.0], ranges, pits);
        let bearing = rng.random_range(0.0..std::f64::consts::TAU);
        let scene = Scene::new(SceneSpec { sites: vec![site.clone()], seed, ..Default::default() })?;
        let pose = facing_pose(&site, distance, bearing, 1.3);
        Ok(Trial { seed, distance, site, pose, scene })
    }

    /// Levelled frame from `lidar`.
    pub fn frame(&self, lidar: Lidar, cfg: &PipelineConfig) -> Result<PointCloud, SimError> {
        let pose = SensorPose { height: cfg.sensor.mount_height, ..self.pose };
        let (cloud, _) = capture(&self.scene, &pose, &pattern_for(lidar), self.seed)?;
        level_cloud(&cloud, &pose.attitude(), cfg).map_err(pipeline_err)
    }

    /// Hole collar centre in the shadow frame.
    pub fn truth(&self) -> Vec3 {
        let s = &self.site;
        self.pose.world_to_shadow(&Vec3::new(s.centre[0], s.centre[1], s.cone_height))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub seed: u64,
    pub distance: f64,
    pub lidar: Lidar,
    pub cone_found: bool,
    /// Horizontal distance from the cone centroid to the hole axis (m).
    pub cone_axis_error: Option<f64>,
    pub stage: Option<Stage>,
    /// 3D distance from the detected to the true hole centre (m).
    pub centre_error: Option<f64>,
    /// Detected over true radius, minus one.
    pub radius_error: Option<f64>,
}

impl TrialOutcome {
    /// Fine-stage detection within the given centre and relative radius errors.
    pub fn accurate(&self, centre: f64, radius: f64) -> bool {
        self.stage == Some(Stage::Fine)
            && self.centre_error.is_some_and(|e| e <= centre)
            && self.radius_error.is_some_and(|e| e.abs() <= radius)
    }

    /// Cone missed or its centroid too far off the hole axis to aim at.
    pub fn cone_failed(&self, max_axis_error: f64) -> bool {
        self.cone_axis_error.is_none_or(|e| e > max_axis_error)
    }
}

/// Runs one trial. With `full` the whole detection pipeline runs; otherwise
/// only cone extraction.
pub fn run_trial(
    seed: u64,
    distance: f64,
    pits: usize,
    lidar: LidarChoice,
    cfg: &PipelineConfig,
    full: bool,
) -> Result<TrialOutcome, SimError> {
    let trial = Trial::new(seed, distance, pits, &SiteRanges::default())?;
    let lidar = lidar.resolve(distance, cfg);
    let frame = trial.frame(lidar, cfg)?;
    let truth = trial.truth();
    let mut out = TrialOutcome {
        seed,
        distance,
        lidar,
        cone_found: false,
        cone_axis_error: None,
        stage: None,
        centre_error: None,
        radius_error: None,
    };
    let centroid = if full {
        let r = detect_frame(&frame, cfg, false).map_err(pipeline_err)?.report;
        if let Some(d) = r.detection {
            out.stage = Some(d.stage);
            out.centre_error = Some((Vec3::from(d.centre_3d) - truth).norm());
            out.radius_error = Some(d.radius / trial.site.hole_radius() - 1.0);
        }
        r.cone.map(|c| c.centroid)
    } else {
        let cones = extract_cones(&frame, &cfg.cone, 1).map_err(pipeline_err)?;
        cones.first().map(|c| c.centroid.into())
    };
    if let Some(c) = centroid {
        out.cone_found = true;
        out.cone_axis_error = Some((c[0] - truth.x).hypot(c[1] - truth.y));
    }
    Ok(out)
}

/// Distance of trial `k` when distances are drawn uniformly from `range`.
pub fn trial_distance(seed: u64, range: (f64, f64)) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xD15A_7CE0);
    if range.0 < range.1 {
        rng.random_range(range.0..range.1)
    } else {
        range.0
    }
}

/// Every scene at every distance; scene `k` keeps its seed across distances.
pub fn sweep_grid(seed: u64, distances: &[f64], scenes: usize) -> Vec<(u64, f64)> {
    distances
        .iter()
        .flat_map(|&d| (0..scenes as u64).map(move |k| ((seed << 32) | k, d)))
        .collect()
}

/// Runs trials `(seed, distance)` in parallel; output order follows input.
pub fn run_trials(
    trials: &[(u64, f64)],
    pits: usize,
    lidar: LidarChoice,
    cfg: &PipelineConfig,
    full: bool,
) -> Result<Vec<TrialOutcome>, SimError> {
    trials.par_iter().map(|&(s, d)| run_trial(s, d, pits, lidar, cfg, full)).collect()
}

/// Per-distance tally of a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub distance: f64,
    pub scenes: usize,
    pub cone_failures: usize,
    pub detections: usize,
    pub median_axis_error: Option<f64>,
}

pub fn sweep_rows(outcomes: &[TrialOutcome], max_axis_error: f64) -> Vec<SweepRow> {
    let mut distances: Vec<f64> = outcomes.iter().map(|o| o.distance).collect();
    distances.sort_by(f64::total_cmp);
    distances.dedup();
    distances
        .into_iter()
        .map(|d| {
            let at: Vec<&TrialOutcome> = outcomes.iter().filter(|o| o.distance == d).collect();
            let mut errs: Vec<f64> = at.iter().filter_map(|o| o.cone_axis_error).collect();
            errs.sort_by(f64::total_cmp);
            SweepRow {
                distance: d,
                scenes: at.len(),
                cone_failures: at.iter().filter(|o| o.cone_failed(max_axis_error)).count(),
                detections: at.iter().filter(|o| o.stage.is_some()).count(),
                median_axis_error: errs.get(errs.len() / 2).copied(),
            }
        })
        .collect()
}
