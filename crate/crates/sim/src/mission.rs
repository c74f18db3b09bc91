//! Mission simulator for the seek-hole navigation cycle.
//!
//! The robot is an omnidirectional point with a heading. Three localisation
//! sources run side by side and are never fused: a GPS fix in the UTM frame
//! with piecewise-constant jumps, an odometry pose that drifts with distance
//! travelled, and the body frame in which perception reports.
//!
//! The world frame of the scene is the true UTM frame.

use std::collections::HashSet;
use std::path::Path;

use borehole_core::config::PipelineConfig;
use borehole_core::pipeline::{level_cloud, track_step, Lidar, Pose2, Stage, TrackState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bench::{pipeline_err, sample_site, SensorPose, SiteRanges};
use crate::lidar::{raycast, BeamPattern};
use crate::scene::{HoleSite, Scene, SceneSpec};
use crate::SimError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MissionState {
    SeekGps,
    FinePlanning,
    VisualServo,
    Dipping,
    Done,
}

impl MissionState {
    /// Whether `self -> to` is a step of the cycle or the track-lost fallback.
    pub fn allows(self, to: MissionState) -> bool {
        use MissionState::*;
        matches!(
            (self, to),
            (SeekGps, FinePlanning)
                | (FinePlanning, VisualServo)
                | (VisualServo, Dipping)
                | (Dipping, SeekGps)
                | (Dipping, Done)
                | (FinePlanning, SeekGps)
                | (VisualServo, SeekGps)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MissionConfig {
    pub dt: f64,
    /// Perception reports arrive at this period (s).
    pub perception_period: f64,
    pub max_speed: f64,
    pub max_yaw_rate: f64,
    /// Cones within this distance of the designated point are candidates (m).
    pub search_radius: f64,
    /// Heading is re-aligned during fine planning beyond this LOS angle (deg).
    pub los_threshold_deg: f64,
    /// Beyond this bearing error the robot turns in place (deg).
    pub turn_in_place_deg: f64,
    /// Visual servoing starts once the hole is this close (m).
    pub servo_distance: f64,
    pub servo_max_speed: f64,
    pub sonde_radius: f64,
    /// Alignment tolerance as a fraction of the hole-sonde clearance.
    pub alignment_fraction: f64,
    pub dip_time: f64,
    /// Consecutive perception reports without the target before the track is lost.
    pub lost_reports: usize,
    /// Gate for matching a cone to the locked target between reports (m).
    pub target_gate: f64,
    /// Cones this close to an already dipped hole are ignored (m).
    pub visited_radius: f64,
    /// A hole is abandoned after this long (s).
    pub hole_timeout: f64,
}

impl Default for MissionConfig {
    fn default() -> Self {
        MissionConfig {
            dt: 0.1,
            perception_period: 0.5,
            max_speed: 1.0,
            max_yaw_rate: 1.0,
            search_radius: 4.0,
            los_threshold_deg: 15.0,
            turn_in_place_deg: 45.0,
            servo_distance: 1.0,
            servo_max_speed: 0.5,
            sonde_radius: 0.05,
            alignment_fraction: 0.3,
            dip_time: 5.0,
            lost_reports: 5,
            target_gate: 1.5,
            visited_radius: 1.5,
            hole_timeout: 120.0,
        }
    }
}

impl MissionConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let positive = [
            self.dt,
            self.perception_period,
            self.max_speed,
            self.max_yaw_rate,
            self.search_radius,
            self.servo_distance,
            self.servo_max_speed,
            self.target_gate,
            self.hole_timeout,
        ];
        if positive.iter().any(|v| !(*v > 0.0)) {
            return Err(SimError::Spec("mission rates, speeds and distances must be positive".into()));
        }
        if !(self.sonde_radius >= 0.0 && self.dip_time >= 0.0 && self.visited_radius >= 0.0) {
            return Err(SimError::Spec("sonde radius and dip time must be non-negative".into()));
        }
        if !(self.alignment_fraction > 0.0 && self.alignment_fraction <= 1.0) {
            return Err(SimError::Spec("alignment fraction must lie in (0, 1]".into()));
        }
        if self.perception_period < self.dt {
            return Err(SimError::Spec("perception period is shorter than the step".into()));
        }
        Ok(())
    }

    fn perception_steps(&self) -> usize {
        (self.perception_period / self.dt).round().max(1.0) as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseModel {
    /// Per-axis σ of the GPS offset; the offset magnitude is Rayleigh (m).
    pub gps_sigma: f64,
    /// The GPS offset is redrawn at this interval (s), from a random phase.
    pub gps_jump_interval: f64,
    /// Odometry error per metre travelled, along a fixed random direction.
    pub odom_drift_rate: f64,
    pub seed: u64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel {
            gps_sigma: 1.2,
            gps_jump_interval: 2.0,
            odom_drift_rate: 0.005,
            seed: 0,
        }
    }
}

impl NoiseModel {
    pub fn noiseless() -> Self {
        NoiseModel { gps_sigma: 0.0, odom_drift_rate: 0.0, ..Default::default() }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.gps_sigma >= 0.0 && self.odom_drift_rate >= 0.0 && self.gps_jump_interval > 0.0) {
            return Err(SimError::Spec("noise levels must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanHole {
    pub id: String,
    /// Designated position in the UTM frame (m).
    pub x: f64,
    pub y: f64,
    pub column: String,
}

pub fn read_plan_csv(path: impl AsRef<Path>) -> Result<Vec<PlanHole>, SimError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| SimError::Spec(e.to_string()))?;
    let plan = r
        .deserialize()
        .collect::<Result<Vec<PlanHole>, _>>()
        .map_err(|e| SimError::Spec(e.to_string()))?;
    if plan.is_empty() {
        return Err(SimError::Spec("mission plan is empty".into()));
    }
    Ok(plan)
}

pub fn write_plan_csv(path: impl AsRef<Path>, plan: &[PlanHole]) -> Result<(), SimError> {
    let err = |e: csv::Error| SimError::Spec(e.to_string());
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    for h in plan {
        w.serialize(h).map_err(err)?;
    }
    w.flush().map_err(|e| SimError::Spec(e.to_string()))
}

/// Visit order over the plan: columns in order of first appearance, the
/// first column walked from the top (largest coordinate along the column
/// axis) down, then alternating.
pub fn boustrophedon_order(plan: &[PlanHole]) -> Vec<usize> {
    let mut columns: Vec<(&str, Vec<usize>)> = Vec::new();
    for (i, h) in plan.iter().enumerate() {
        match columns.iter_mut().find(|(c, _)| *c == h.column) {
            Some((_, v)) => v.push(i),
            None => columns.push((&h.column, vec![i])),
        }
    }
    let axis = column_axis(plan, &columns);
    let key = |i: usize| plan[i].x * axis[0] + plan[i].y * axis[1];
    let mut order = Vec::with_capacity(plan.len());
    for (k, (_, mut idx)) in columns.into_iter().enumerate() {
        idx.sort_by(|a, b| key(*b).total_cmp(&key(*a)).then(a.cmp(b)));
        if k % 2 == 1 {
            idx.reverse();
        }
        order.extend(idx);
    }
    order
}

/// Principal direction of the longest column, pointing north (or east).
fn column_axis(plan: &[PlanHole], columns: &[(&str, Vec<usize>)]) -> [f64; 2] {
    let Some((_, idx)) = columns.iter().max_by_key(|(_, v)| v.len()).filter(|(_, v)| v.len() >= 2) else {
        return [0.0, 1.0];
    };
    let n = idx.len() as f64;
    let mx = idx.iter().map(|&i| plan[i].x).sum::<f64>() / n;
    let my = idx.iter().map(|&i| plan[i].y).sum::<f64>() / n;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for &i in idx {
        let (dx, dy) = (plan[i].x - mx, plan[i].y - my);
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    let theta = 0.5 * (2.0 * sxy).atan2(sxx - syy);
    let (mut ax, mut ay) = (theta.cos(), theta.sin());
    if ay < -1e-12 || (ay.abs() <= 1e-12 && ax < 0.0) {
        ax = -ax;
        ay = -ay;
    }
    [ax, ay]
}

/// Cone chosen for a designated point: among detections within `radius` of
/// it, the one with the smallest line-of-sight angle to the robot heading.
/// Detections and the robot pose are in the UTM frame.
pub fn match_target(detections: &[[f64; 2]], designated: [f64; 2], robot: &Pose2, radius: f64) -> Option<usize> {
    detections
        .iter()
        .enumerate()
        .filter(|(_, c)| (c[0] - designated[0]).hypot(c[1] - designated[1]) <= radius)
        .map(|(i, c)| (i, los_angle(robot, *c)))
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        .map(|(i, _)| i)
}

/// Absolute angle between the robot heading and the line to `p` (rad).
pub fn los_angle(robot: &Pose2, p: [f64; 2]) -> f64 {
    let b = robot.to_body(p);
    b[1].atan2(b[0]).abs()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HoleSeen {
    /// Hole centre in the body frame (m).
    pub centre: [f64; 2],
    pub radius: f64,
}

/// One perception report, in the body frame.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub cones: Vec<[f64; 2]>,
    /// Hole on the cone nearest the requested target (or the main cone).
    pub hole: Option<HoleSeen>,
}

pub struct PerceptionInput<'a> {
    pub scene: &'a Scene,
    pub truth: &'a SensorPose,
    pub odom: Pose2,
    /// Locked target in the odometry frame, if any.
    pub target_odom: Option<[f64; 2]>,
    pub state: MissionState,
    pub tick: u64,
}

pub trait Perception {
    fn observe(&mut self, input: &PerceptionInput) -> Result<Observation, SimError>;
}

/// Ray-cast LiDAR frames through the full detection pipeline.
pub struct PipelinePerception {
    pub config: PipelineConfig,
    pub track: TrackState,
    pub seed: u64,
}

impl PipelinePerception {
    pub fn new(config: PipelineConfig, seed: u64) -> Self {
        PipelinePerception { config, track: TrackState::default(), seed }
    }
}

impl Perception for PipelinePerception {
    fn observe(&mut self, input: &PerceptionInput) -> Result<Observation, SimError> {
        let pattern = match self.track.active_lidar {
            Lidar::Dense => BeamPattern::dense(),
            Lidar::Sparse => BeamPattern::sparse(),
        };
        let pose = SensorPose { height: self.config.sensor.mount_height, ..*input.truth };
        let seed = self.seed ^ input.tick.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let (cloud, _) = raycast(input.scene, &pose.transform(), &pattern, seed)?;
        let shadow = level_cloud(&cloud, &pose.attitude(), &self.config).map_err(pipeline_err)?;
        let mut state = self.track.clone();
        state.target_odom = input.target_odom;
        let (next, out) = track_step(&shadow, Some(&input.odom), &state, &self.config, false).map_err(pipeline_err)?;
        self.track = next;
        let r = &out.report;
        Ok(Observation {
            cones: r.cones.iter().map(|c| [c.centroid[0], c.centroid[1]]).collect(),
            hole: r.detection.filter(|d| d.stage == Stage::Fine).map(|d| HoleSeen {
                centre: [d.centre_3d[0], d.centre_3d[1]],
                radius: d.radius,
            }),
        })
    }
}

/// Geometric stand-in for the pipeline: cones inside the crop corridor are
/// reported with a centroid pulled toward the sensor, holes within the fine
/// activation distance with small Gaussian noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleModel {
    pub corridor_length: f64,
    pub corridor_rear: f64,
    pub corridor_width: f64,
    /// Centroid pull toward the sensor per metre of distance, and its cap (m).
    pub bias_per_metre: f64,
    pub bias_cap: f64,
    pub cone_sigma: f64,
    /// Probability that a visible cone is missed in one report.
    pub cone_dropout: f64,
    pub hole_distance: f64,
    pub hole_sigma: f64,
}

impl Default for OracleModel {
    fn default() -> Self {
        OracleModel {
            corridor_length: 6.0,
            corridor_rear: 1.5,
            corridor_width: 4.0,
            bias_per_metre: 0.13,
            bias_cap: 0.45,
            cone_sigma: 0.05,
            cone_dropout: 0.05,
            hole_distance: 1.0,
            hole_sigma: 0.005,
        }
    }
}

impl OracleModel {
    pub fn exact() -> Self {
        OracleModel { cone_sigma: 0.0, cone_dropout: 0.0, hole_sigma: 0.0, ..Default::default() }
    }
}

pub struct OraclePerception {
    pub model: OracleModel,
    pub gate: f64,
    rng: ChaCha8Rng,
}

impl OraclePerception {
    pub fn new(model: OracleModel, gate: f64, seed: u64) -> Self {
        OraclePerception { model, gate, rng: ChaCha8Rng::seed_from_u64(seed) }
    }
}

impl Perception for OraclePerception {
    fn observe(&mut self, input: &PerceptionInput) -> Result<Observation, SimError> {
        let m = &self.model;
        let cone_n = Normal::new(0.0, m.cone_sigma).map_err(|e| SimError::Spec(e.to_string()))?;
        let hole_n = Normal::new(0.0, m.hole_sigma).map_err(|e| SimError::Spec(e.to_string()))?;
        let mut cones = Vec::new();
        let mut truths = Vec::new();
        for site in input.scene.sites() {
            let c = input.truth.world_to_shadow(&borehole_core::geometry::Vec3::new(site.centre[0], site.centre[1], 0.0));
            let inside = c.x <= m.corridor_length && c.x >= -m.corridor_rear && c.y.abs() <= m.corridor_width / 2.0;
            // Draw unconditionally so the noise stream does not depend on visibility.
            let (drop, ex, ey) = (self.rng.random::<f64>(), cone_n.sample(&mut self.rng), cone_n.sample(&mut self.rng));
            if !inside || drop < m.cone_dropout {
                continue;
            }
            let d = c.x.hypot(c.y);
            let pull = (m.bias_per_metre * d).min(m.bias_cap).min(d);
            let (ux, uy) = if d > 0.0 { (c.x / d, c.y / d) } else { (0.0, 0.0) };
            cones.push([c.x - pull * ux + ex, c.y - pull * uy + ey]);
            truths.push((c, site.hole_radius()));
        }
        let reference = input
            .target_odom
            .map(|t| input.odom.to_body(t))
            .or_else(|| cones.first().copied());
        let hole = reference.and_then(|r| {
            let (k, dist) = cones
                .iter()
                .enumerate()
                .map(|(k, c)| (k, (c[0] - r[0]).hypot(c[1] - r[1])))
                .min_by(|a, b| a.1.total_cmp(&b.1))?;
            let (c, radius) = truths[k];
            let (ex, ey) = (hole_n.sample(&mut self.rng), hole_n.sample(&mut self.rng));
            (dist <= self.gate && c.x.hypot(c.y) <= m.hole_distance)
                .then_some(HoleSeen { centre: [c.x + ex, c.y + ey], radius })
        });
        Ok(Observation { cones, hole })
    }
}

/// Wraps another perception and, during visual servoing, replaces its hole
/// reports with a fixed script: the hole sits at `servo_start` in the body
/// frame when servoing begins and stays put in the world as the robot moves.
pub struct ScriptedPerception<P> {
    pub inner: P,
    pub servo_start: [f64; 2],
    pub radius: f64,
    anchor: Option<Pose2>,
}

impl<P> ScriptedPerception<P> {
    pub fn new(inner: P, servo_start: [f64; 2], radius: f64) -> Self {
        ScriptedPerception { inner, servo_start, radius, anchor: None }
    }
}

impl<P: Perception> Perception for ScriptedPerception<P> {
    fn observe(&mut self, input: &PerceptionInput) -> Result<Observation, SimError> {
        let mut obs = self.inner.observe(input)?;
        if input.state != MissionState::VisualServo {
            self.anchor = None;
            return Ok(obs);
        }
        let t = input.truth;
        let now = Pose2::new(t.x, t.y, t.yaw);
        let anchor = *self.anchor.get_or_insert(now);
        let hole = anchor.to_parent(self.servo_start);
        obs.hole = Some(HoleSeen { centre: now.to_body(hole), radius: self.radius });
        Ok(obs)
    }
}

/// Target position held in each frame; frozen between detection updates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetLock {
    pub utm: [f64; 3],
    pub odom: [f64; 3],
    pub body: [f64; 3],
}

impl TargetLock {
    fn from_body(body: [f64; 2], gps: &Pose2, odom: &Pose2) -> Self {
        let u = gps.to_parent(body);
        let o = odom.to_parent(body);
        TargetLock { utm: [u[0], u[1], 0.0], odom: [o[0], o[1], 0.0], body: [body[0], body[1], 0.0] }
    }

    fn odom2(&self) -> [f64; 2] {
        [self.odom[0], self.odom[1]]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Command {
    /// Body-frame velocity (m/s) and yaw rate (rad/s).
    pub vx: f64,
    pub vy: f64,
    pub yaw_rate: f64,
}

impl Command {
    const STOP: Command = Command { vx: 0.0, vy: 0.0, yaw_rate: 0.0 };
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub time: f64,
    pub hole: usize,
    pub from: MissionState,
    pub to: MissionState,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ServoCommand {
    pub time: f64,
    pub hole: usize,
    pub vx: f64,
    pub vy: f64,
}

/// Target distances in the UTM and odometry frames during fine planning.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceSample {
    pub time: f64,
    pub hole: usize,
    pub utm: f64,
    pub odom: f64,
    /// The lock was refreshed from a detection at this sample.
    pub refreshed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HoleStatus {
    Dipped,
    /// The sonde was lowered off the hole.
    Missed,
    Abandoned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoleOutcome {
    pub id: String,
    pub status: HoleStatus,
    /// Horizontal sonde-axis to hole-axis distance at the dip (m).
    pub final_offset: Option<f64>,
    pub clearance: f64,
    pub duration: f64,
    pub track_losses: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissionSummary {
    pub holes: usize,
    pub dipped: usize,
    pub missed: usize,
    pub abandoned: usize,
    pub sim_time: f64,
    pub max_final_offset: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub order: Vec<usize>,
    pub timeline: Vec<Transition>,
    pub outcomes: Vec<HoleOutcome>,
    pub servo_commands: Vec<ServoCommand>,
    pub distances: Vec<DistanceSample>,
    pub summary: MissionSummary,
}

impl RunLog {
    /// Servo commands of each hole as `(hole, vx, vy)`, without timestamps.
    pub fn servo_stream(&self) -> Vec<(usize, f64, f64)> {
        self.servo_commands.iter().map(|c| (c.hole, c.vx, c.vy)).collect()
    }
}

/// True robot state plus its two noisy localisation sources.
#[derive(Debug, Clone)]
struct Localisation {
    truth: Pose2,
    start: Pose2,
    odom_error: [f64; 2],
    drift_dir: [f64; 2],
    gps_offset: [f64; 2],
    next_jump: f64,
    rng: ChaCha8Rng,
    noise: NoiseModel,
}

impl Localisation {
    fn new(start: Pose2, noise: NoiseModel) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
        let a = rng.random_range(0.0..std::f64::consts::TAU);
        let mut loc = Localisation {
            truth: start,
            start,
            odom_error: [0.0; 2],
            drift_dir: [a.cos(), a.sin()],
            gps_offset: [0.0; 2],
            next_jump: 0.0,
            rng,
            noise,
        };
        loc.update_gps(0.0);
        loc.next_jump = loc.rng.random_range(0.0..noise.gps_jump_interval);
        loc
    }

    fn update_gps(&mut self, t: f64) {
        while t >= self.next_jump {
            let n = Normal::new(0.0, self.noise.gps_sigma).expect("validated sigma");
            self.gps_offset = [n.sample(&mut self.rng), n.sample(&mut self.rng)];
            self.next_jump += self.noise.gps_jump_interval;
        }
    }

    fn gps(&self) -> Pose2 {
        Pose2::new(self.truth.x + self.gps_offset[0], self.truth.y + self.gps_offset[1], self.truth.yaw)
    }

    /// Odometry pose: origin and heading at the start pose, plus drift.
    fn odom(&self) -> Pose2 {
        let p = self.start.to_body([self.truth.x, self.truth.y]);
        Pose2::new(p[0] + self.odom_error[0], p[1] + self.odom_error[1], self.truth.yaw - self.start.yaw)
    }

    fn apply(&mut self, cmd: &Command, dt: f64) {
        let d = self.truth.to_parent([cmd.vx * dt, cmd.vy * dt]);
        let step = (d[0] - self.truth.x).hypot(d[1] - self.truth.y);
        self.truth = Pose2::new(d[0], d[1], wrap(self.truth.yaw + cmd.yaw_rate * dt));
        let e = self.noise.odom_drift_rate * step;
        self.odom_error[0] += e * self.drift_dir[0];
        self.odom_error[1] += e * self.drift_dir[1];
    }
}

fn wrap(a: f64) -> f64 {
    let t = std::f64::consts::TAU;
    let r = (a + std::f64::consts::PI).rem_euclid(t) - std::f64::consts::PI;
    if r <= -std::f64::consts::PI {
        r + t
    } else {
        r
    }
}

/// Drive toward a body-frame point: turn in place when far off heading,
/// otherwise translate at `speed` while turning if `turn` allows it.
fn pursue(goal: [f64; 2], speed: f64, turn: bool, cfg: &MissionConfig) -> Command {
    let dist = goal[0].hypot(goal[1]);
    let bearing = goal[1].atan2(goal[0]);
    let yaw_rate = if turn && dist > 1e-9 { (bearing / cfg.dt).clamp(-cfg.max_yaw_rate, cfg.max_yaw_rate) } else { 0.0 };
    if bearing.abs() > cfg.turn_in_place_deg.to_radians() && turn {
        return Command { vx: 0.0, vy: 0.0, yaw_rate };
    }
    if dist < 1e-9 {
        return Command { yaw_rate, ..Command::STOP };
    }
    let v = speed.min(dist / cfg.dt);
    Command { vx: v * goal[0] / dist, vy: v * goal[1] / dist, yaw_rate }
}

/// Body-frame servo velocity that would close `offset` in one perception period.
pub fn servo_command(offset: [f64; 2], cfg: &MissionConfig) -> Command {
    let (vx, vy) = (offset[0] / cfg.perception_period, offset[1] / cfg.perception_period);
    let s = vx.hypot(vy);
    let k = if s > cfg.servo_max_speed { cfg.servo_max_speed / s } else { 1.0 };
    Command { vx: vx * k, vy: vy * k, yaw_rate: 0.0 }
}

pub struct Mission<'a> {
    pub config: MissionConfig,
    scene: &'a Scene,
    plan: &'a [PlanHole],
    order: Vec<usize>,
    loc: Localisation,
    state: MissionState,
    /// Position in `order`.
    current: usize,
    lock: Option<TargetLock>,
    time: f64,
    tick: u64,
    state_since: f64,
    hole_since: f64,
    missed_reports: usize,
    track_losses: usize,
    servo: Command,
    /// Odometry positions of dipped holes.
    visited: Vec<[f64; 2]>,
    log: RunLog,
}

impl<'a> Mission<'a> {
    pub fn new(
        scene: &'a Scene,
        plan: &'a [PlanHole],
        start: Pose2,
        config: MissionConfig,
        noise: NoiseModel,
    ) -> Result<Self, SimError> {
        config.validate()?;
        noise.validate()?;
        if plan.is_empty() {
            return Err(SimError::Spec("mission plan is empty".into()));
        }
        let mut ids = HashSet::new();
        if !plan.iter().all(|h| ids.insert(h.id.as_str())) {
            return Err(SimError::Spec("duplicate hole id in plan".into()));
        }
        let order = boustrophedon_order(plan);
        let log = RunLog {
            order: order.clone(),
            timeline: Vec::new(),
            outcomes: Vec::new(),
            servo_commands: Vec::new(),
            distances: Vec::new(),
            summary: MissionSummary { holes: plan.len(), dipped: 0, missed: 0, abandoned: 0, sim_time: 0.0, max_final_offset: None },
        };
        Ok(Mission {
            config,
            scene,
            plan,
            order,
            loc: Localisation::new(start, noise),
            state: MissionState::SeekGps,
            current: 0,
            lock: None,
            time: 0.0,
            tick: 0,
            state_since: 0.0,
            hole_since: 0.0,
            missed_reports: 0,
            track_losses: 0,
            servo: Command::STOP,
            visited: Vec::new(),
            log,
        })
    }

    pub fn state(&self) -> MissionState {
        self.state
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn truth(&self) -> Pose2 {
        self.loc.truth
    }

    fn hole(&self) -> &PlanHole {
        &self.plan[self.order[self.current]]
    }

    fn sensor_pose(&self) -> SensorPose {
        SensorPose::level(self.loc.truth.x, self.loc.truth.y, self.loc.truth.yaw, 1.3)
    }

    fn transition(&mut self, to: MissionState) {
        debug_assert!(self.state.allows(to), "{:?} -> {:?}", self.state, to);
        self.log.timeline.push(Transition { time: self.time, hole: self.order[self.current], from: self.state, to });
        self.state = to;
        self.state_since = self.time;
        self.missed_reports = 0;
        self.servo = Command::STOP;
    }

    fn track_lost(&mut self) {
        self.track_losses += 1;
        self.lock = None;
        self.transition(MissionState::SeekGps);
    }

    /// True horizontal offset between the sonde axis and the current hole.
    fn true_offset(&self) -> Option<(f64, f64)> {
        let p = self.loc.truth;
        self.scene
            .sites()
            .iter()
            .map(|s| ((s.centre[0] - p.x).hypot(s.centre[1] - p.y), s.hole_radius()))
            .min_by(|a, b| a.0.total_cmp(&b.0))
    }

    fn finish_hole(&mut self, status: HoleStatus, offset: Option<f64>, clearance: f64) {
        let id = self.hole().id.clone();
        self.log.outcomes.push(HoleOutcome {
            id,
            status,
            final_offset: offset,
            clearance,
            duration: self.time - self.hole_since,
            track_losses: self.track_losses,
        });
        let odom = self.loc.odom();
        self.visited.push([odom.x, odom.y]);
        self.lock = None;
        self.track_losses = 0;
        self.hole_since = self.time;
    }

    fn next_hole(&mut self) {
        if self.current + 1 < self.order.len() {
            self.transition(MissionState::SeekGps);
            self.current += 1;
        } else {
            self.transition(MissionState::Done);
        }
    }

    fn abandon(&mut self) {
        self.finish_hole(HoleStatus::Abandoned, None, 0.0);
        // Abandoning is a forced return to seeking; record it as such.
        self.log.timeline.push(Transition { time: self.time, hole: self.order[self.current], from: self.state, to: MissionState::SeekGps });
        self.state = MissionState::SeekGps;
        self.state_since = self.time;
        self.missed_reports = 0;
        self.servo = Command::STOP;
        if self.current + 1 < self.order.len() {
            self.current += 1;
        } else {
            self.state = MissionState::Done;
        }
    }

    fn not_visited(&self, odom: &Pose2, body: [f64; 2]) -> bool {
        let p = odom.to_parent(body);
        self.visited.iter().all(|v| (v[0] - p[0]).hypot(v[1] - p[1]) > self.config.visited_radius)
    }

    fn on_report(&mut self, obs: &Observation) {
        let (gps, odom) = (self.loc.gps(), self.loc.odom());
        let cfg = self.config;
        match self.state {
            MissionState::SeekGps => {
                let cands: Vec<[f64; 2]> = obs.cones.iter().copied().filter(|c| self.not_visited(&odom, *c)).collect();
                let utm: Vec<[f64; 2]> = cands.iter().map(|c| gps.to_parent(*c)).collect();
                let h = self.hole();
                if let Some(k) = match_target(&utm, [h.x, h.y], &gps, cfg.search_radius) {
                    self.lock = Some(TargetLock::from_body(cands[k], &gps, &odom));
                    self.transition(MissionState::FinePlanning);
                }
            }
            MissionState::FinePlanning | MissionState::VisualServo => {
                let lock = self.lock.expect("locked while planning");
                let predicted = odom.to_body(lock.odom2());
                let hit = obs
                    .cones
                    .iter()
                    .map(|c| (*c, (c[0] - predicted[0]).hypot(c[1] - predicted[1])))
                    .filter(|(_, d)| *d <= cfg.target_gate)
                    .min_by(|a, b| a.1.total_cmp(&b.1));
                let hole = obs.hole.filter(|h| h.centre[0].hypot(h.centre[1]) <= cfg.servo_distance);
                let servoing = self.state == MissionState::VisualServo;
                if (servoing && hole.is_none()) || (hit.is_none() && hole.is_none()) {
                    self.missed_reports += 1;
                    if self.missed_reports > cfg.lost_reports {
                        self.track_lost();
                    }
                    return;
                }
                self.missed_reports = 0;
                let target = hole.map(|h| h.centre).or(hit.map(|h| h.0)).expect("one of them");
                self.lock = Some(TargetLock::from_body(target, &gps, &odom));
                if let Some(d) = self.log.distances.last_mut().filter(|_| !servoing) {
                    d.refreshed = true;
                }
                if !servoing {
                    // Servo commands start with the first report taken while servoing.
                    if hole.is_some() {
                        self.transition(MissionState::VisualServo);
                    }
                    return;
                }
                let h = hole.expect("servoing on a hole");
                let clearance = (h.radius - cfg.sonde_radius).max(0.0);
                if h.centre[0].hypot(h.centre[1]) < cfg.alignment_fraction * clearance {
                    self.transition(MissionState::Dipping);
                    return;
                }
                self.servo = servo_command(h.centre, &cfg);
                self.log.servo_commands.push(ServoCommand {
                    time: self.time,
                    hole: self.order[self.current],
                    vx: self.servo.vx,
                    vy: self.servo.vy,
                });
            }
            MissionState::Dipping | MissionState::Done => {}
        }
    }

    fn command(&mut self) -> Command {
        let cfg = self.config;
        match self.state {
            MissionState::SeekGps => {
                let h = self.hole();
                let goal = self.loc.gps().to_body([h.x, h.y]);
                if goal[0].hypot(goal[1]) < 0.3 {
                    // At the designated point without a match: look around.
                    return Command { yaw_rate: cfg.max_yaw_rate * 0.5, ..Command::STOP };
                }
                pursue(goal, cfg.max_speed, true, &cfg)
            }
            MissionState::FinePlanning => {
                let odom = self.loc.odom();
                let lock = self.lock.expect("locked while planning");
                let goal = odom.to_body(lock.odom2());
                let los = goal[1].atan2(goal[0]).abs();
                let realign = los > cfg.los_threshold_deg.to_radians();
                let speed = cfg.max_speed.min(goal[0].hypot(goal[1]));
                let mut c = pursue(goal, speed, realign, &cfg);
                if !realign {
                    c.yaw_rate = 0.0;
                }
                c
            }
            MissionState::VisualServo => self.servo,
            MissionState::Dipping | MissionState::Done => Command::STOP,
        }
    }

    /// Advances one time step, running perception when a report is due.
    pub fn step(&mut self, perception: &mut dyn Perception) -> Result<Command, SimError> {
        let cfg = self.config;
        if self.state == MissionState::Done {
            return Ok(Command::STOP);
        }
        if self.time - self.hole_since > cfg.hole_timeout && self.state != MissionState::Dipping {
            self.abandon();
            return Ok(Command::STOP);
        }
        if self.state == MissionState::Dipping && self.time - self.state_since >= cfg.dip_time {
            let (offset, radius) = self.true_offset().expect("scene has holes");
            let clearance = (radius - cfg.sonde_radius).max(0.0);
            let status = if offset < clearance { HoleStatus::Dipped } else { HoleStatus::Missed };
            self.finish_hole(status, Some(offset), clearance);
            self.next_hole();
            if self.state == MissionState::Done {
                return Ok(Command::STOP);
            }
        }
        if self.tick.is_multiple_of(cfg.perception_steps() as u64) && self.state != MissionState::Dipping {
            let pose = self.sensor_pose();
            let input = PerceptionInput {
                scene: self.scene,
                truth: &pose,
                odom: self.loc.odom(),
                target_odom: self.lock.map(|l| l.odom2()),
                state: self.state,
                tick: self.tick,
            };
            let obs = perception.observe(&input)?;
            self.on_report(&obs);
        }
        let cmd = self.command();
        if self.state == MissionState::FinePlanning {
            let lock = self.lock.expect("locked while planning");
            let (g, o) = (self.loc.gps(), self.loc.odom());
            self.log.distances.push(DistanceSample {
                time: self.time,
                hole: self.order[self.current],
                utm: (g.x - lock.utm[0]).hypot(g.y - lock.utm[1]),
                odom: (o.x - lock.odom[0]).hypot(o.y - lock.odom[1]),
                refreshed: false,
            });
        }
        self.loc.apply(&cmd, cfg.dt);
        self.tick += 1;
        self.time = self.tick as f64 * cfg.dt;
        self.loc.update_gps(self.time);
        Ok(cmd)
    }

    /// Runs until every hole is handled or `max_time` passes.
    pub fn run(mut self, perception: &mut dyn Perception, max_time: f64) -> Result<RunLog, SimError> {
        while self.state != MissionState::Done && self.time < max_time {
            self.step(perception)?;
        }
        let mut log = self.log;
        let s = &mut log.summary;
        s.sim_time = self.time;
        for o in &log.outcomes {
            match o.status {
                HoleStatus::Dipped => s.dipped += 1,
                HoleStatus::Missed => s.missed += 1,
                HoleStatus::Abandoned => s.abandoned += 1,
            }
        }
        s.max_final_offset = log.outcomes.iter().filter_map(|o| o.final_offset).reduce(f64::max);
        Ok(log)
    }
}

/// A bench whose true holes sit `gps_offset` metres from each designated
/// point, in a seeded random direction, and a start pose six metres before
/// the first hole of the visit order, facing it.
pub fn world_from_plan(
    plan: &[PlanHole],
    gps_offset: f64,
    ranges: &SiteRanges,
    pits: usize,
    seed: u64,
) -> Result<(Scene, Pose2), SimError> {
    if plan.is_empty() {
        return Err(SimError::Spec("mission plan is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sites: Vec<HoleSite> = Vec::with_capacity(plan.len());
    for h in plan {
        let mut site = sample_site(&mut rng, [h.x, h.y], ranges, pits);
        // Redraw the offset direction while it would push this cone into an earlier one.
        for _ in 0..64 {
            let a = rng.random_range(0.0..std::f64::consts::TAU);
            site.centre = [h.x + gps_offset * a.cos(), h.y + gps_offset * a.sin()];
            if sites.iter().all(|s| !s.overlaps(&site)) {
                break;
            }
        }
        sites.push(site);
    }
    let scene = Scene::new(SceneSpec { sites, seed, ..Default::default() })?;
    let order = boustrophedon_order(plan);
    let first = &plan[order[0]];
    let dir = match order.get(1).map(|&i| &plan[i]) {
        Some(n) if n.column == first.column => {
            let (dx, dy) = (n.x - first.x, n.y - first.y);
            let l = dx.hypot(dy).max(1e-9);
            [dx / l, dy / l]
        }
        _ => [0.0, -1.0],
    };
    let start = Pose2::new(first.x - 6.0 * dir[0], first.y - 6.0 * dir[1], dir[1].atan2(dir[0]));
    Ok((scene, start))
}

/// Layout of a rectangular bench for [`grid_world`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridLayout {
    pub columns: usize,
    /// Holes per column; the last column may be shorter to reach `holes`.
    pub rows: usize,
    pub holes: usize,
    pub column_spacing: f64,
    pub row_spacing: f64,
    /// Distance between each designated point and its true hole (m).
    pub gps_offset: f64,
    pub pits_per_site: usize,
    pub sites: SiteRanges,
}

impl Default for GridLayout {
    fn default() -> Self {
        GridLayout {
            columns: 2,
            rows: 3,
            holes: 5,
            column_spacing: 5.0,
            row_spacing: 4.0,
            gps_offset: 1.0,
            pits_per_site: 0,
            sites: SiteRanges::default(),
        }
    }
}

impl GridLayout {
    /// Six columns of ten, trimmed to 58 holes.
    pub fn large() -> Self {
        GridLayout { columns: 6, rows: 10, holes: 58, ..Default::default() }
    }
}

/// A bench of cones on a grid, its mission plan with offset designated
/// points, and a start pose a few metres before the first hole.
pub fn grid_world(layout: &GridLayout, seed: u64) -> Result<(Scene, Vec<PlanHole>, Pose2), SimError> {
    if layout.holes == 0 || layout.holes > layout.columns * layout.rows {
        return Err(SimError::Spec("hole count does not fit the grid".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sites = Vec::new();
    let mut plan = Vec::new();
    for c in 0..layout.columns {
        for r in 0..layout.rows {
            if sites.len() == layout.holes {
                break;
            }
            let centre = [c as f64 * layout.column_spacing, r as f64 * layout.row_spacing];
            sites.push(sample_site(&mut rng, centre, &layout.sites, layout.pits_per_site));
            let a = rng.random_range(0.0..std::f64::consts::TAU);
            plan.push(PlanHole {
                id: format!("H{:02}", plan.len() + 1),
                x: centre[0] + layout.gps_offset * a.cos(),
                y: centre[1] + layout.gps_offset * a.sin(),
                column: format!("C{}", c + 1),
            });
        }
    }
    let scene = Scene::new(SceneSpec { sites, seed, ..Default::default() })?;
    let top = (layout.rows.min(layout.holes) - 1) as f64 * layout.row_spacing;
    let start = Pose2::new(0.0, top + 6.0, -std::f64::consts::FRAC_PI_2);
    Ok((scene, plan, start))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hole(id: &str, x: f64, y: f64, col: &str) -> PlanHole {
        PlanHole { id: id.into(), x, y, column: col.into() }
    }

    #[test]
    fn serpentine_order() {
        let plan = vec![
            hole("a", 0.0, 0.0, "1"),
            hole("b", 0.0, 4.0, "1"),
            hole("c", 0.0, 8.0, "1"),
            hole("d", 5.0, 0.0, "2"),
            hole("e", 5.0, 4.0, "2"),
            hole("f", 5.0, 8.0, "2"),
        ];
        assert_eq!(boustrophedon_order(&plan), vec![2, 1, 0, 3, 4, 5]);
        assert_eq!(boustrophedon_order(&plan[..1]), vec![0]);
    }

    #[test]
    fn target_matching() {
        let robot = Pose2::new(0.0, 0.0, 0.0);
        assert_eq!(match_target(&[[5.0, 0.0]], [7.0, 0.0], &robot, 4.0), Some(0));
        assert_eq!(match_target(&[[5.0, 0.0]], [10.0, 0.0], &robot, 4.0), None);
        let a = [5.0 * 20f64.to_radians().cos(), 5.0 * 20f64.to_radians().sin()];
        let b = [5.0 * 5f64.to_radians().cos(), 5.0 * 5f64.to_radians().sin()];
        assert_eq!(match_target(&[a, b], [5.0, 1.0], &robot, 4.0), Some(1));
    }

    #[test]
    fn wrap_angles() {
        assert!((wrap(3.5) - (3.5 - std::f64::consts::TAU)).abs() < 1e-12);
        assert_eq!(wrap(0.25), 0.25);
        assert!((wrap(-std::f64::consts::PI) - std::f64::consts::PI).abs() < 1e-12);
    }

    #[test]
    fn servo_closes_offset_in_one_period() {
        let cfg = MissionConfig::default();
        let c = servo_command([0.1, -0.05], &cfg);
        assert!((c.vx * cfg.perception_period - 0.1).abs() < 1e-12);
        let far = servo_command([2.0, 0.0], &cfg);
        assert!((far.vx - cfg.servo_max_speed).abs() < 1e-12);
    }

    #[test]
    fn noiseless_single_hole_cycle() {
        let layout = GridLayout { columns: 1, rows: 1, holes: 1, ..Default::default() };
        let (scene, plan, start) = grid_world(&layout, 4).unwrap();
        let mut p = OraclePerception::new(OracleModel::exact(), 1.5, 0);
        let log = Mission::new(&scene, &plan, start, MissionConfig::default(), NoiseModel::noiseless())
            .unwrap()
            .run(&mut p, 120.0)
            .unwrap();
        let states: Vec<MissionState> = log.timeline.iter().map(|t| t.to).collect();
        use MissionState::*;
        assert_eq!(states, vec![FinePlanning, VisualServo, Dipping, Done]);
        assert_eq!(log.outcomes[0].status, HoleStatus::Dipped);
    }

    #[test]
    fn plan_world_offsets_and_start() {
        let plan = vec![hole("a", 0.0, 8.0, "1"), hole("b", 0.0, 4.0, "1"), hole("c", 5.0, 4.0, "2")];
        let (scene, start) = world_from_plan(&plan, 1.0, &SiteRanges::default(), 0, 3).unwrap();
        for (h, s) in plan.iter().zip(scene.sites()) {
            assert!(((s.centre[0] - h.x).hypot(s.centre[1] - h.y) - 1.0).abs() < 1e-12);
        }
        assert!((start.x - 0.0).abs() < 1e-12 && (start.y - 14.0).abs() < 1e-12);
        assert!((start.yaw + std::f64::consts::FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn plan_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("plan.csv");
        let plan = vec![hole("a", 1.5, -2.0, "1"), hole("b", 3.0, 4.0, "2")];
        write_plan_csv(&path, &plan).unwrap();
        assert_eq!(read_plan_csv(&path).unwrap(), plan);
    }
}
