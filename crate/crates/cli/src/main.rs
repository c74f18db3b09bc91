use std::error::Error as StdError;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use borehole_core::circle_fit::{ransac_fit, taubin_fit, RansacConfig};
use borehole_core::cloud::{read_any, write_binary, write_csv, Frame, PointCloud};
use borehole_core::config::PipelineConfig;
use borehole_core::geometry::{RotationMatrix, Vec3};
use borehole_core::pipeline::{detect_frame, level_cloud, track_step, Pose2, TrackState};
use borehole_sim::bench::{
    capture, facing_pose, pattern_for, run_trials, sample_site, sweep_grid, sweep_rows, LidarChoice, SensorPose,
    SiteRanges,
};
use borehole_sim::mission::{
    grid_world, read_plan_csv, world_from_plan, write_plan_csv, GridLayout, Mission, MissionConfig, NoiseModel,
    OracleModel, OraclePerception, Perception, PipelinePerception,
};
use borehole_sim::scene::{Scene, SceneSpec};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

type Res<T> = Result<T, Box<dyn StdError>>;

#[derive(Debug, Parser)]
#[command(name = "borehole", version, about = "Blast-hole detection on LiDAR point clouds")]
struct Cli {
    /// Pipeline config (JSON); missing keys take their defaults.
    #[arg(long, global = true, env = "BOREHOLE_CONFIG")]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Write the per-stage rasters as PGM files.
    #[arg(long, global = true)]
    debug_images: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Detect the hole in one cloud.
    Detect {
        cloud: PathBuf,
        /// Sensor roll from the IMU (deg).
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        roll: f64,
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        pitch: f64,
    },
    /// Replay a frame sequence through the tracker.
    Track {
        dir: PathBuf,
        /// CSV with `file,x,y,yaw,roll,pitch` per frame (m, rad).
        #[arg(long)]
        poses: Option<PathBuf>,
    },
    #[command(subcommand)]
    Simulate(Simulate),
    /// Fit a circle to `x,y` points.
    FitCircle {
        points: PathBuf,
        #[arg(long)]
        ransac: bool,
        /// RANSAC inlier tolerance, in the units of the points.
        #[arg(long)]
        tolerance: Option<f64>,
    },
}

#[derive(Debug, Subcommand)]
enum Simulate {
    /// Raycast clouds of one scene.
    Scene(SceneArgs),
    /// Cone detection failure rate against distance.
    Sweep(SweepArgs),
    /// Run the navigation state machine over a hole plan.
    Mission(MissionArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum LidarArg {
    Dense,
    Sparse,
    Auto,
}

impl From<LidarArg> for LidarChoice {
    fn from(l: LidarArg) -> Self {
        match l {
            LidarArg::Dense => LidarChoice::Dense,
            LidarArg::Sparse => LidarChoice::Sparse,
            LidarArg::Auto => LidarChoice::Auto,
        }
    }
}

#[derive(Debug, Args)]
struct SceneArgs {
    /// Scene description (JSON); a random site is drawn from the seed otherwise.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Sensor distances from the first hole; one frame per distance.
    #[arg(long, value_delimiter = ',', default_value = "0.5")]
    distance: Vec<f64>,
    /// Approach bearing from the hole (deg); random when omitted.
    #[arg(long, allow_hyphen_values = true)]
    bearing: Option<f64>,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    roll: f64,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pitch: f64,
    #[arg(long, value_enum, default_value = "auto")]
    lidar: LidarArg,
    /// Edge pits on a randomly drawn site.
    #[arg(long, default_value_t = 0)]
    pits: usize,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long, value_delimiter = ',', default_value = "0.5,1,1.5,2,2.5,3,3.5,4,4.5,5,5.5,6")]
    distances: Vec<f64>,
    #[arg(long, default_value_t = 50)]
    scenes: usize,
    #[arg(long, default_value_t = 1)]
    pits: usize,
    #[arg(long, value_enum, default_value = "auto")]
    lidar: LidarArg,
    /// Run the whole detector, not only cone extraction.
    #[arg(long)]
    full: bool,
    /// Cone centroid offset from the hole axis counted as a failure (m).
    #[arg(long, default_value_t = 0.4)]
    max_axis_error: f64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum LayoutArg {
    Five,
    FiftyEight,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PerceptionArg {
    Pipeline,
    Oracle,
}

#[derive(Debug, Args)]
struct MissionArgs {
    /// Plan CSV with `id,x,y,column`; overrides `--layout`.
    #[arg(long)]
    plan: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "five")]
    layout: LayoutArg,
    #[arg(long, value_enum, default_value = "pipeline")]
    perception: PerceptionArg,
    /// Mission config (JSON).
    #[arg(long)]
    mission_config: Option<PathBuf>,
    /// Designated-point error against the true holes (m).
    #[arg(long, default_value_t = 1.0)]
    gps_offset: f64,
    /// Turn off GPS and odometry noise.
    #[arg(long)]
    noiseless: bool,
    /// Simulated time limit (s).
    #[arg(long, default_value_t = 3600.0)]
    max_time: f64,
}

fn load_config(path: Option<&Path>) -> Res<PipelineConfig> {
    Ok(match path {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    })
}

fn write_json(path: &Path, value: &impl Serialize) -> Res<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn read_cloud(path: &Path) -> Res<PointCloud> {
    let cloud = read_any(path, Frame::Sensor)?;
    if cloud.is_empty() {
        return Err(format!("{}: cloud has no points", path.display()).into());
    }
    Ok(cloud)
}

fn detect(cli: &Cli, cloud: &Path, roll: f64, pitch: f64) -> Res<ExitCode> {
    let cfg = load_config(cli.config.as_deref())?;
    let cloud = read_cloud(cloud)?;
    let attitude = RotationMatrix::from_rpy(roll.to_radians(), pitch.to_radians(), 0.0);
    let shadow = level_cloud(&cloud, &attitude, &cfg)?;
    let out = detect_frame(&shadow, &cfg, cli.debug_images)?;
    fs::create_dir_all(&cli.out)?;
    write_json(&cli.out.join("report.json"), &json!({ "report": out.report, "timings": out.timings }))?;
    if let Some(images) = &out.debug {
        images.write_all(cli.out.join("debug"))?;
    }
    match (&out.report.detection, out.report.miss) {
        (Some(d), _) => {
            let [x, y, z] = d.centre_3d;
            println!(
                "hole at ({x:.3}, {y:.3}, {z:.3}) m, radius {:.3} m, confidence {:.2}",
                d.radius, d.confidence
            );
            Ok(ExitCode::SUCCESS)
        }
        (None, miss) => {
            println!("no hole: {}", serde_json::to_string(&miss)?);
            Ok(ExitCode::from(2))
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FramePose {
    file: String,
    x: f64,
    y: f64,
    yaw: f64,
    roll: f64,
    pitch: f64,
}

fn read_poses(path: &Path) -> Res<Vec<FramePose>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<Vec<FramePose>, _>>()?)
}

fn list_frames(dir: &Path) -> Res<Vec<String>> {
    let mut names: Vec<String> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    let bins: Vec<String> = names.iter().filter(|n| n.ends_with(".bin")).cloned().collect();
    if !bins.is_empty() {
        return Ok(bins);
    }
    Ok(names.into_iter().filter(|n| n.ends_with(".csv") && n != "poses.csv").collect())
}

fn track(cli: &Cli, dir: &Path, poses: Option<&Path>) -> Res<ExitCode> {
    let cfg = load_config(cli.config.as_deref())?;
    let frames: Vec<(String, Option<FramePose>)> = match poses {
        Some(p) => read_poses(p)?.into_iter().map(|f| (f.file.clone(), Some(f))).collect(),
        None => list_frames(dir)?.into_iter().map(|f| (f, None)).collect(),
    };
    if frames.is_empty() {
        return Err(format!("{}: no frames", dir.display()).into());
    }
    fs::create_dir_all(&cli.out)?;
    let mut log = fs::File::create(cli.out.join("track.jsonl"))?;
    let mut state = TrackState::default();
    let mut hits = 0;
    for (k, (file, pose)) in frames.iter().enumerate() {
        let cloud = read_cloud(&dir.join(file))?;
        let (roll, pitch) = pose.as_ref().map_or((0.0, 0.0), |p| (p.roll, p.pitch));
        let shadow = level_cloud(&cloud, &RotationMatrix::from_rpy(roll, pitch, 0.0), &cfg)?;
        let odom = pose.as_ref().map(|p| Pose2::new(p.x, p.y, p.yaw));
        let (next, out) = track_step(&shadow, odom.as_ref(), &state, &cfg, cli.debug_images)?;
        state = next;
        hits += usize::from(out.report.detection.is_some());
        let line = json!({
            "frame": file,
            "report": out.report,
            "track": state.summary(),
            "timings": out.timings,
        });
        writeln!(log, "{}", serde_json::to_string(&line)?)?;
        if let Some(images) = &out.debug {
            images.write_all(cli.out.join("debug").join(format!("{k:03}")))?;
        }
    }
    println!("{} frames, {hits} detections", frames.len());
    Ok(ExitCode::SUCCESS)
}

fn simulate_scene(cli: &Cli, a: &SceneArgs) -> Res<ExitCode> {
    let cfg = load_config(cli.config.as_deref())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cli.seed);
    let spec = match &a.spec {
        Some(p) => serde_json::from_str::<SceneSpec>(&fs::read_to_string(p)?)?,
        None => SceneSpec {
            sites: vec![sample_site(&mut rng, [0.0, 0.0], &SiteRanges::default(), a.pits)],
            seed: cli.seed,
            ..Default::default()
        },
    };
    let scene = Scene::new(spec)?;
    let site = scene.sites().first().ok_or("scene has no hole sites")?.clone();
    let bearing = match a.bearing {
        Some(b) => b.to_radians(),
        None => rng.random_range(0.0..std::f64::consts::TAU),
    };
    fs::create_dir_all(&cli.out)?;
    let single = a.distance.len() == 1;
    let mut poses = Vec::new();
    let mut frames = Vec::new();
    for (k, &d) in a.distance.iter().enumerate() {
        let pose = SensorPose {
            roll: a.roll.to_radians(),
            pitch: a.pitch.to_radians(),
            ..facing_pose(&site, d, bearing, cfg.sensor.mount_height)
        };
        let lidar = LidarChoice::from(a.lidar).resolve(d, &cfg);
        let frame_seed = cli.seed ^ (k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let (cloud, labels) = capture(&scene, &pose, &pattern_for(lidar), frame_seed)?;
        let stem = if single { "cloud".to_string() } else { format!("cloud_{k:03}") };
        write_binary(cli.out.join(format!("{stem}.bin")), &cloud)?;
        let labels: Vec<u8> = labels.iter().map(|l| *l as u8).collect();
        write_csv(cli.out.join(format!("{stem}.csv")), &cloud, Some(&labels))?;
        let collar = pose.world_to_shadow(&Vec3::new(site.centre[0], site.centre[1], site.cone_height));
        poses.push(FramePose {
            file: format!("{stem}.bin"),
            x: pose.x,
            y: pose.y,
            yaw: pose.yaw,
            roll: pose.roll,
            pitch: pose.pitch,
        });
        frames.push(json!({
            "file": format!("{stem}.bin"),
            "distance": d,
            "lidar": lidar,
            "pose": pose,
            "points": cloud.len(),
            "hole_centre_shadow": [collar.x, collar.y, collar.z],
            "hole_radius": site.hole_radius(),
        }));
    }
    let mut w = csv::Writer::from_path(cli.out.join("poses.csv"))?;
    for p in &poses {
        w.serialize(p)?;
    }
    w.flush()?;
    write_json(&cli.out.join("truth.json"), &json!({ "scene": scene.spec, "frames": frames }))?;
    println!("{} frame(s) written to {}", frames.len(), cli.out.display());
    Ok(ExitCode::SUCCESS)
}

fn simulate_sweep(cli: &Cli, a: &SweepArgs) -> Res<ExitCode> {
    let cfg = load_config(cli.config.as_deref())?;
    let trials = sweep_grid(cli.seed, &a.distances, a.scenes);
    let outcomes = run_trials(&trials, a.pits, a.lidar.into(), &cfg, a.full)?;
    let rows = sweep_rows(&outcomes, a.max_axis_error);
    fs::create_dir_all(&cli.out)?;
    write_json(&cli.out.join("sweep.json"), &json!({ "rows": rows, "outcomes": outcomes }))?;
    println!("distance  scenes  cone_failures  detections");
    for r in &rows {
        println!("{:8.2}  {:6}  {:13}  {:10}", r.distance, r.scenes, r.cone_failures, r.detections);
    }
    Ok(ExitCode::SUCCESS)
}

fn simulate_mission(cli: &Cli, a: &MissionArgs) -> Res<ExitCode> {
    let cfg = load_config(cli.config.as_deref())?;
    let mission_cfg = match &a.mission_config {
        Some(p) => serde_json::from_str::<MissionConfig>(&fs::read_to_string(p)?)?,
        None => MissionConfig::default(),
    };
    let (scene, plan, start) = match &a.plan {
        Some(p) => {
            let plan = read_plan_csv(p)?;
            let (scene, start) = world_from_plan(&plan, a.gps_offset, &SiteRanges::default(), 0, cli.seed)?;
            (scene, plan, start)
        }
        None => {
            let layout = match a.layout {
                LayoutArg::Five => GridLayout::default(),
                LayoutArg::FiftyEight => GridLayout::large(),
            };
            grid_world(&GridLayout { gps_offset: a.gps_offset, ..layout }, cli.seed)?
        }
    };
    let noise = if a.noiseless {
        NoiseModel { seed: cli.seed, ..NoiseModel::noiseless() }
    } else {
        NoiseModel { seed: cli.seed, ..Default::default() }
    };
    let mut perception: Box<dyn Perception> = match a.perception {
        PerceptionArg::Pipeline => Box::new(PipelinePerception::new(cfg, cli.seed)),
        PerceptionArg::Oracle => {
            Box::new(OraclePerception::new(OracleModel::default(), mission_cfg.target_gate, cli.seed))
        }
    };
    let mission = Mission::new(&scene, &plan, start, mission_cfg, noise)?;
    let log = mission.run(perception.as_mut(), a.max_time)?;
    fs::create_dir_all(&cli.out)?;
    write_plan_csv(cli.out.join("plan.csv"), &plan)?;
    write_json(&cli.out.join("run_log.json"), &log)?;
    let s = &log.summary;
    println!(
        "{} holes: {} dipped, {} missed, {} abandoned in {:.1} s",
        s.holes, s.dipped, s.missed, s.abandoned, s.sim_time
    );
    Ok(if s.dipped == s.holes { ExitCode::SUCCESS } else { ExitCode::from(2) })
}

fn read_points(path: &Path) -> Res<Vec<(f64, f64)>> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_path(path)?;
    let mut points = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let x = rec.get(0).and_then(|v| v.parse::<f64>().ok());
        let y = rec.get(1).and_then(|v| v.parse::<f64>().ok());
        match (x, y) {
            (Some(x), Some(y)) => points.push((x, y)),
            // A header row.
            _ if i == 0 => {}
            _ => return Err(format!("{}: bad point on line {}", path.display(), i + 1).into()),
        }
    }
    Ok(points)
}

fn fit_circle(cli: &Cli, points: &Path, ransac: bool, tolerance: Option<f64>) -> Res<ExitCode> {
    let points = read_points(points)?;
    let value = if ransac {
        let mut rc = RansacConfig { rng_seed: cli.seed, ..Default::default() };
        if let Some(t) = tolerance {
            rc.inlier_tol = t;
        }
        rc.validate()?;
        let fit = ransac_fit(&points, &rc)?;
        json!({ "a": fit.circle.a, "b": fit.circle.b, "r": fit.circle.r, "inliers": fit.inliers.len() })
    } else {
        let c = taubin_fit(&points)?;
        json!({ "a": c.a, "b": c.b, "r": c.r })
    };
    println!("{}", serde_json::to_string(&value)?);
    Ok(ExitCode::SUCCESS)
}

fn run(cli: &Cli) -> Res<ExitCode> {
    match &cli.command {
        Command::Detect { cloud, roll, pitch } => detect(cli, cloud, *roll, *pitch),
        Command::Track { dir, poses } => track(cli, dir, poses.as_deref()),
        Command::Simulate(Simulate::Scene(a)) => simulate_scene(cli, a),
        Command::Simulate(Simulate::Sweep(a)) => simulate_sweep(cli, a),
        Command::Simulate(Simulate::Mission(a)) => simulate_mission(cli, a),
        Command::FitCircle { points, ransac, tolerance } => fit_circle(cli, points, *ransac, *tolerance),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
