//! Command-line surface.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use bevloc_core::backbone::{init_weights, BackboneSpec};
use bevloc_core::database::{build_database, LocalizationStatus, ScanInput};
use bevloc_core::eval::{evaluate, loop_protocol};
use bevloc_core::registration::{correspondences, match_descriptors, ransac_se2, recover_metric_pose};
use bevloc_core::rem::distance_profile;
use bevloc_core::synth::{generate_world, synthetic_sequence, ScanParams};
use bevloc_core::{Pipeline, PipelineConfig, Se2Pose};

use crate::cloud_io::{load_cloud, save_cloud, CloudFormat};
use crate::db_file::{load_database, save_database};
use crate::error::{read_file, write_file, IoError, Result};
use crate::exec::{resolve_threads, Parallel};
use crate::pgm::{encode_pgm, match_montage};
use crate::poses::{load_poses, save_poses};
use crate::report::{pr_csv, profile_csv, report_text};
use crate::weights::{load_weights, save_weights};
use crate::config;

#[derive(Debug, Parser)]
#[command(name = "bevloc", version, about = "BEV LiDAR place recognition and pose recovery")]
pub struct Cli {
    /// Worker threads (default: number of processors; BEVLOC_THREADS overrides).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a place database from scans and their poses.
    Build(BuildArgs),
    /// Localize scans against a database.
    Localize(LocalizeArgs),
    /// Loop-closure evaluation over a sequence.
    LoopEval(LoopEvalArgs),
    /// Feature-distance profile and match visualization for scans.
    Analyze(AnalyzeArgs),
    /// Write a synthetic scan sequence.
    Synth(SynthArgs),
    /// Write seeded random backbone weights.
    InitWeights(InitWeightsArgs),
}

/// Pipeline settings: a config file, then individual flags on top.
#[derive(Debug, Clone, Args, Default)]
pub struct PipelineArgs {
    /// `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// BEV grid size in meters.
    #[arg(long)]
    pub grid: Option<f64>,
    /// Half side of the BEV window in meters.
    #[arg(long)]
    pub range: Option<f64>,
    #[arg(long)]
    pub rotations: Option<usize>,
    #[arg(long)]
    pub clusters: Option<usize>,
    #[arg(long)]
    pub pca_dim: Option<usize>,
    /// Seed for the random backbone weights.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Any configuration key, as KEY=VALUE (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl PipelineArgs {
    fn any(&self) -> bool {
        self.config.is_some()
            || self.grid.is_some()
            || self.range.is_some()
            || self.rotations.is_some()
            || self.clusters.is_some()
            || self.pca_dim.is_some()
            || self.seed.is_some()
            || !self.set.is_empty()
    }

    /// Applies the file and then the flags to `base`.
    pub fn apply(&self, mut c: PipelineConfig) -> Result<PipelineConfig> {
        if let Some(path) = &self.config {
            let bytes = read_file(path)?;
            let text = String::from_utf8(bytes).map_err(|_| IoError::format(path, "not UTF-8 text"))?;
            config::apply_text(&mut c, &text).map_err(|m| IoError::format(path, m))?;
        }
        let flags: [(&str, Option<String>); 6] = [
            ("grid", self.grid.map(|v| v.to_string())),
            ("half_extent", self.range.map(|v| v.to_string())),
            ("rotations", self.rotations.map(|v| v.to_string())),
            ("clusters", self.clusters.map(|v| v.to_string())),
            ("pca_dim", self.pca_dim.map(|v| v.to_string())),
            ("weight_seed", self.seed.map(|v| v.to_string())),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                config::set(&mut c, k, &v).map_err(IoError::Usage)?;
            }
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| IoError::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            config::set(&mut c, k.trim(), v.trim()).map_err(IoError::Usage)?;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    /// Directory of `.bin` (KITTI) or `.xyz`/`.txt` scans, used in file-name order.
    #[arg(long)]
    pub scans: PathBuf,
    /// One pose per scan.
    #[arg(long)]
    pub poses: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Backbone weights (`BVW1`); seeded random weights otherwise.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
}

#[derive(Debug, Args)]
pub struct LocalizeArgs {
    #[arg(long)]
    pub db: PathBuf,
    /// A scan file or a directory of scans.
    #[arg(long)]
    pub scans: PathBuf,
    /// CSV output (stdout when absent).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write `-` in the ms column so output is reproducible byte for byte.
    #[arg(long)]
    pub no_timing: bool,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
}

#[derive(Debug, Args)]
pub struct LoopEvalArgs {
    #[arg(long)]
    pub scans: PathBuf,
    #[arg(long)]
    pub poses: PathBuf,
    /// Directory for `report.txt` and `pr.csv`.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Number of preceding frames excluded from each query's candidates.
    #[arg(long, default_value_t = 100)]
    pub exclusion: usize,
    /// Also register each query to its retrieved frame to measure pose error.
    #[arg(long)]
    pub register: bool,
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub query: PathBuf,
    /// Second scan to match the query against.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Largest displacement of the distance profile, pixels.
    #[arg(long, default_value_t = 20)]
    pub max_delta: usize,
    #[arg(long, default_value_t = 2)]
    pub step: usize,
    /// Pixels excluded at the image border when averaging.
    #[arg(long, default_value_t = 40)]
    pub margin: usize,
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PathShape {
    /// Straight line.
    Line,
    /// Out along a line and back over the same positions.
    OutBack,
    /// One and a half laps of a circle.
    Circle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FileFormat {
    Bin,
    Xyz,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub frames: usize,
    #[arg(long, value_enum, default_value_t = PathShape::Line)]
    pub path: PathShape,
    /// Distance between consecutive frames, meters.
    #[arg(long, default_value_t = 4.0)]
    pub spacing: f64,
    /// Side of the square world, meters.
    #[arg(long, default_value_t = 400.0)]
    pub area: f64,
    #[arg(long, default_value_t = 3000)]
    pub landmarks: usize,
    /// Sensor range, meters.
    #[arg(long, default_value_t = 40.0)]
    pub sensor_range: f64,
    #[arg(long, default_value_t = 0.03)]
    pub noise: f64,
    #[arg(long, default_value_t = 0.0)]
    pub dropout: f64,
    #[arg(long, value_enum, default_value_t = FileFormat::Bin)]
    pub format: FileFormat,
}

#[derive(Debug, Args)]
pub struct InitWeightsArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Scan files in a directory in file-name order, with ids taken from
/// numeric file stems (the position otherwise).
pub fn list_scans(dir: &Path) -> Result<Vec<(u64, PathBuf)>> {
    let rd = std::fs::read_dir(dir).map_err(|e| IoError::io(dir, e))?;
    let mut files: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && matches!(
                    p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
                    Some("bin" | "xyz" | "txt")
                )
        })
        .collect();
    files.sort();
    let numeric: Option<Vec<u64>> = files
        .iter()
        .map(|p| p.file_stem().and_then(|s| s.to_str()).and_then(|s| s.parse().ok()))
        .collect();
    let ids: Vec<u64> = match numeric {
        Some(ids) if is_unique(&ids) => ids,
        _ => (0..files.len() as u64).collect(),
    };
    Ok(ids.into_iter().zip(files).collect())
}

fn is_unique(ids: &[u64]) -> bool {
    let mut s = ids.to_vec();
    s.sort_unstable();
    s.windows(2).all(|w| w[0] != w[1])
}

fn load_scan(path: &Path) -> Result<bevloc_core::PointCloud> {
    load_cloud(path, CloudFormat::from_path(path))
}

fn make_pipeline(cfg: PipelineConfig, weights: Option<&Path>) -> Result<Pipeline> {
    match weights {
        None => Ok(Pipeline::seeded(cfg)?),
        Some(path) => {
            let (ws, pca) = load_weights(path)?;
            Ok(Pipeline::new(cfg, ws, pca)?)
        }
    }
}

fn scans_with_poses(scans: &Path, poses: &Path) -> Result<Vec<(u64, PathBuf, Se2Pose)>> {
    let poses = load_poses(poses)?;
    let files = list_scans(scans)?;
    if files.len() != poses.len() {
        return Err(IoError::Usage(format!(
            "{} scans in {} but {} poses",
            files.len(),
            scans.display(),
            poses.len()
        )));
    }
    Ok(files.into_iter().zip(poses).map(|((id, p), pose)| (id, p, pose)).collect())
}

pub fn run(cli: Cli) -> Result<()> {
    let exec = Parallel::new(resolve_threads(cli.threads));
    match cli.command {
        Command::Build(a) => cmd_build(a, &exec),
        Command::Localize(a) => cmd_localize(a, &exec),
        Command::LoopEval(a) => cmd_loop_eval(a, &exec),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Synth(a) => cmd_synth(a),
        Command::InitWeights(a) => cmd_init_weights(a),
    }
}

fn cmd_build(a: BuildArgs, exec: &Parallel) -> Result<()> {
    let cfg = a.pipeline.apply(PipelineConfig::default())?;
    let frames = scans_with_poses(&a.scans, &a.poses)?;
    let pipeline = make_pipeline(cfg, a.weights.as_deref())?;
    let n = frames.len();
    let mut inputs = Vec::with_capacity(n);
    for (i, (id, path, pose)) in frames.into_iter().enumerate() {
        let cloud = load_scan(&path).map_err(|e| e.to_string());
        match &cloud {
            Ok(c) => eprintln!("[{}/{n}] {} id={id} points={}", i + 1, path.display(), c.len()),
            Err(e) => eprintln!("[{}/{n}] skipped: {e}", i + 1),
        }
        inputs.push(ScanInput { id, pose, cloud });
    }
    let t = Instant::now();
    let (db, report) = build_database(pipeline, inputs, exec)?;
    save_database(&a.out, &db)?;
    println!("frames = {}", report.built);
    println!("skipped = {}", report.skipped.len());
    for (id, why) in &report.skipped {
        println!("skipped_frame = {id}: {why}");
    }
    println!("vlad_frames = {}", report.vlad_frames);
    if let Some(i) = report.kmeans_inertia.last() {
        println!("kmeans_inertia = {i}");
    }
    if let Some(e) = report.pca_explained {
        println!("pca_explained_variance = {e}");
    }
    println!("pca_completed = {}", report.pca_completed);
    println!("descriptor_dim = {}", db.dim());
    println!("build_seconds = {:.3}", t.elapsed().as_secs_f64());
    println!("output = {}", a.out.display());
    Ok(())
}

fn cmd_localize(a: LocalizeArgs, exec: &Parallel) -> Result<()> {
    let mut db = load_database(&a.db)?;
    if a.pipeline.any() {
        let wanted = a.pipeline.apply(db.config().clone())?;
        db.check_config(&wanted)?;
        db.pipeline.config = wanted;
    }
    let queries: Vec<(u64, PathBuf)> = if a.scans.is_dir() {
        list_scans(&a.scans)?
    } else {
        // A single file must exist; a bad one is an input error.
        load_scan(&a.scans)?;
        let id = a.scans.file_stem().and_then(|s| s.to_str()).and_then(|s| s.parse().ok()).unwrap_or(0);
        vec![(id, a.scans.clone())]
    };
    let db = &db;
    let rows = bevloc_core::pipeline::Executor::map(exec, queries, |(id, path)| {
        let t = Instant::now();
        let loc = load_scan(&path).and_then(|c| Ok(db.localize(&c)?));
        (id, loc, t.elapsed().as_secs_f64() * 1e3)
    });
    let mut csv = String::from("id,status,match_id,x,y,yaw,inliers,ms\n");
    let mut times = Vec::new();
    let mut counts = [0usize; 3];
    for (id, loc, ms) in rows {
        let loc = match loc {
            Ok(l) => l,
            Err(e) if e.exit_code() == 2 => {
                eprintln!("query {id}: {e}");
                bevloc_core::database::Localization {
                    status: LocalizationStatus::Failed,
                    pose: None,
                    match_id: None,
                    descriptor_distance: None,
                    relative: None,
                    inliers: 0,
                }
            }
            Err(e) => return Err(e),
        };
        counts[loc.status as usize] += 1;
        times.push(ms);
        let (x, y, yaw) = loc.pose.map_or((String::new(), String::new(), String::new()), |p| {
            (format!("{:.6}", p.x), format!("{:.6}", p.y), format!("{:.6}", p.yaw()))
        });
        let ms = if a.no_timing { "-".to_string() } else { format!("{ms:.1}") };
        csv.push_str(&format!(
            "{id},{},{},{x},{y},{yaw},{},{ms}\n",
            loc.status.as_str(),
            loc.match_id.map_or(String::new(), |m| m.to_string()),
            loc.inliers
        ));
    }
    match &a.out {
        Some(p) => write_file(p, csv.as_bytes())?,
        None => print!("{csv}"),
    }
    times.sort_by(|a, b| a.total_cmp(b));
    let median = times.get(times.len() / 2).copied().unwrap_or(0.0);
    eprintln!(
        "queries = {}, ok = {}, retrieval_only = {}, failed = {}, median_ms = {median:.1}",
        times.len(),
        counts[0],
        counts[1],
        counts[2]
    );
    Ok(())
}

fn cmd_loop_eval(a: LoopEvalArgs, exec: &Parallel) -> Result<()> {
    let cfg = a.pipeline.apply(PipelineConfig::default())?;
    let frames = scans_with_poses(&a.scans, &a.poses)?;
    let mut pipeline = make_pipeline(cfg, a.weights.as_deref())?;
    let sequence = frames
        .iter()
        .map(|(_, p, pose)| Ok((load_scan(p)?, *pose)))
        .collect::<Result<Vec<_>>>()?;
    let (outcomes, _) = loop_protocol(&mut pipeline, sequence, a.exclusion, a.register, exec)?;
    let report = evaluate(&outcomes);
    let text = report_text(
        &report,
        &pipeline.config,
        &[("exclusion", a.exclusion.to_string()), ("frames", frames.len().to_string())],
    );
    write_file(&a.out_dir.join("report.txt"), text.as_bytes())?;
    write_file(&a.out_dir.join("pr.csv"), pr_csv(&report.curve.points).as_bytes())?;
    print!("{}", text.split("# configuration").next().unwrap_or(""));
    if report.curve.positives == 0 {
        println!("note = no query revisits a place within 5 m of an earlier candidate");
    }
    Ok(())
}

fn cmd_analyze(a: AnalyzeArgs) -> Result<()> {
    let cfg = a.pipeline.apply(PipelineConfig::default())?;
    let pipeline = make_pipeline(cfg, a.weights.as_deref())?;
    if a.step == 0 {
        return Err(IoError::Usage("--step must be positive".into()));
    }
    let q_img = pipeline.bev(&load_scan(&a.query)?)?;
    let q_map = pipeline.feature_map(&q_img)?;
    let deltas: Vec<usize> = (0..=a.max_delta).step_by(a.step).collect();
    let profile = distance_profile(&q_map, &deltas, a.margin)?;
    write_file(&a.out_dir.join("profile.csv"), profile_csv(&profile).as_bytes())?;
    write_file(&a.out_dir.join("query.pgm"), &encode_pgm(&q_img))?;
    let Some(reference) = &a.reference else {
        return Ok(());
    };
    let r_img = pipeline.bev(&load_scan(reference)?)?;
    let r_map = pipeline.feature_map(&r_img)?;
    let (qk, ql) = pipeline.local_features(&q_img, &q_map)?;
    let (rk, rl) = pipeline.local_features(&r_img, &r_map)?;
    let matches = match_descriptors(&ql, &rl)?;
    let pairs = correspondences(&matches, &qk, &rk, q_img.size());
    let set = ransac_se2(&pairs, &pipeline.config.ransac);
    let inliers: Vec<bool> = match &set {
        Ok(s) => s.inliers.clone(),
        Err(_) => vec![false; pairs.len()],
    };
    let mut csv = String::from("query_u,query_v,ref_u,ref_v,distance,inlier\n");
    let mut lines = Vec::new();
    for (m, inl) in matches.iter().zip(&inliers) {
        let (q, r) = (&qk[m.query], &rk[m.db]);
        csv.push_str(&format!("{},{},{},{},{},{}\n", q.u, q.v, r.u, r.v, m.distance, *inl as u8));
        if *inl {
            lines.push(([q.u, q.v], [r.u, r.v]));
        }
    }
    write_file(&a.out_dir.join("matches.csv"), csv.as_bytes())?;
    write_file(&a.out_dir.join("reference.pgm"), &encode_pgm(&r_img))?;
    write_file(&a.out_dir.join("montage.pgm"), &match_montage(&q_img, &r_img, &lines).encode())?;
    println!("matches = {}", matches.len());
    match set {
        Ok(s) => {
            let rel = recover_metric_pose(&s.transform, pipeline.config.grid);
            println!("inliers = {}", s.inlier_count());
            println!("relative = {:.6} {:.6} {:.6}", rel.x, rel.y, rel.yaw());
        }
        Err(e) => println!("registration = failed ({e})"),
    }
    Ok(())
}

fn trajectory(a: &SynthArgs) -> Vec<Se2Pose> {
    let n = a.frames;
    match a.path {
        PathShape::Line => {
            let start = -(n.saturating_sub(1) as f64) * a.spacing / 2.0;
            (0..n).map(|i| Se2Pose::new(start + i as f64 * a.spacing, 0.0, 0.0)).collect()
        }
        PathShape::OutBack => {
            let half = n.div_ceil(2);
            let start = -(half.saturating_sub(1) as f64) * a.spacing / 2.0;
            (0..n)
                .map(|i| {
                    if i < half {
                        Se2Pose::new(start + i as f64 * a.spacing, 0.0, 0.0)
                    } else {
                        let k = n - 1 - i;
                        Se2Pose::new(start + k as f64 * a.spacing + 0.5, 0.5, std::f64::consts::PI)
                    }
                })
                .collect()
        }
        PathShape::Circle => {
            // Radius set so 1.5 laps use n frames at the given spacing.
            let step = 3.0 * std::f64::consts::PI / n.max(1) as f64;
            let radius = a.spacing / step;
            (0..n)
                .map(|i| {
                    let t = i as f64 * step;
                    Se2Pose::new(radius * t.cos(), radius * t.sin(), t + std::f64::consts::FRAC_PI_2)
                })
                .collect()
        }
    }
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let world = generate_world(a.seed, a.area, a.landmarks)?;
    let params = ScanParams {
        range: a.sensor_range,
        noise_sigma: a.noise,
        dropout: a.dropout,
        ..ScanParams::default()
    };
    let traj = trajectory(&a);
    let seq = synthetic_sequence(&world, &traj, &params)?;
    let format = match a.format {
        FileFormat::Bin => CloudFormat::KittiBin,
        FileFormat::Xyz => CloudFormat::XyzText,
    };
    let scans = a.out.join("scans");
    for (i, (cloud, _)) in seq.iter().enumerate() {
        save_cloud(&scans.join(format!("{i:06}.{}", format.extension())), cloud, format)?;
    }
    save_poses(&a.out.join("poses.txt"), &traj)?;
    println!("frames = {}", seq.len());
    println!("scans = {}", scans.display());
    println!("poses = {}", a.out.join("poses.txt").display());
    Ok(())
}

fn cmd_init_weights(a: InitWeightsArgs) -> Result<()> {
    let ws = init_weights(&BackboneSpec::default(), a.seed)?;
    save_weights(&a.out, &ws, None)?;
    println!("layers = {}", ws.layers.len());
    println!("output = {}", a.out.display());
    Ok(())
}
