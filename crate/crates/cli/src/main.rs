use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use stabvo::backend::{run_sequence, BAConfig, FrameReport, VoOutput};
use stabvo::evalkit::{
    align_trajectory, load_tum, pose_pair_eval, save_tum, trajectory_relative_errors, weights_from_labels,
    LabelWeights, PairSequence, PnPConfig, TrajectoryError,
};
use stabvo::frontend::{detect_and_describe, load_gray, DEFAULT_MAX_POINTS};
use stabvo::geometry::{DepthBounds, RobustLoss};
use stabvo::labeler::{emit_training_pairs, label_sequence, FrameLabels, LabelThresholds, DEFAULT_PAIR_WINDOW};
use stabvo::sequence::{glob_frames, Manifest};
use stabvo::synth::{generate_scene, OutlierMode, SceneConfig, DEFAULT_DRIFT};
use stabvo::tracking::DEFAULT_TAU;

const LABEL_PATTERN: &str = "labels_*.txt";

#[derive(Parser)]
#[command(name = "stabvo", version, about = "Monocular VO, stability self-labeling and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Detect keypoints and descriptors in PGM images.
    Features(FeaturesArgs),
    /// Run windowed VO over a sequence and write its trajectory.
    Vo(VoArgs),
    /// Label keypoints stable / unstable / ignore from a VO map.
    Label(LabelArgs),
    /// Sample training pairs from label files.
    EmitPairs(EmitPairsArgs),
    /// Frame-pair PnP accuracy against ground truth.
    EvalPnp(EvalPnpArgs),
    /// Sub-trajectory relative errors of an estimate against ground truth.
    EvalTraj(EvalTrajArgs),
    /// Generate a synthetic scene directory.
    Synth(SynthArgs),
}

#[derive(Args)]
struct FeaturesArgs {
    /// Image pattern with one `*` standing for the frame number.
    #[arg(long)]
    images: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_MAX_POINTS)]
    max_points: usize,
}

#[derive(Args)]
struct BaFlags {
    #[arg(long)]
    n_last: Option<usize>,
    #[arg(long)]
    max_iterations: Option<usize>,
    #[arg(long)]
    d_min: Option<f64>,
    #[arg(long)]
    d_max: Option<f64>,
    /// Huber scale in pixels.
    #[arg(long)]
    huber_delta: Option<f64>,
    /// Disable the Huber loss.
    #[arg(long, conflicts_with = "huber_delta")]
    no_robust: bool,
    /// Leave the window scale free apart from the depth regularizer.
    #[arg(long)]
    no_scale_anchor: bool,
}

impl BaFlags {
    fn config(&self) -> Result<BAConfig> {
        let mut c = BAConfig::default();
        if let Some(n) = self.n_last {
            c.n_last = n;
        }
        if let Some(n) = self.max_iterations {
            c.max_iterations = n;
        }
        if self.d_min.is_some() || self.d_max.is_some() {
            c.depth_bounds = DepthBounds::new(
                self.d_min.unwrap_or(c.depth_bounds.d_min),
                self.d_max.unwrap_or(c.depth_bounds.d_max),
            )?;
        }
        if let Some(d) = self.huber_delta {
            c.robust_loss = RobustLoss::new(d)?;
        }
        if self.no_robust {
            c.robust_loss = RobustLoss::trivial();
        }
        c.anchor_scale = !self.no_scale_anchor;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct VoArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Output trajectory, TUM format (camera-to-world).
    #[arg(long)]
    traj: PathBuf,
    /// Also write the map (poses, points, tracks) for `label`.
    #[arg(long)]
    map: Option<PathBuf>,
    /// Per-frame residual statistics CSV.
    #[arg(long)]
    stats: Option<PathBuf>,
    /// Directory of label files; observation weights follow the labels.
    #[arg(long)]
    weights_from: Option<PathBuf>,
    /// Weight given to unstable keypoints with --weights-from.
    #[arg(long, default_value_t = LabelWeights::default().unstable)]
    unstable_weight: f64,
    /// Use every k-th feature file.
    #[arg(long, default_value_t = 1)]
    every: usize,
    /// Descriptor distance threshold for track formation.
    #[arg(long, default_value_t = DEFAULT_TAU)]
    tau: f64,
    #[command(flatten)]
    ba: BaFlags,
}

#[derive(Args)]
struct LabelArgs {
    /// Map written by `vo --map`.
    #[arg(long)]
    map: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = LabelThresholds::default().min_length)]
    min_length: usize,
    #[arg(long, default_value_t = LabelThresholds::default().mean_max)]
    mean_max: f64,
    #[arg(long, default_value_t = LabelThresholds::default().max_min)]
    max_min: f64,
}

#[derive(Args)]
struct EmitPairsArgs {
    /// Directory written by `label`.
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_PAIR_WINDOW)]
    window: usize,
    #[arg(long, default_value_t = 1)]
    pairs_per_frame: usize,
}

#[derive(Args)]
struct EvalPnpArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [30usize, 60, 90])]
    frame_diffs: Vec<usize>,
    #[arg(long, default_value_t = 50)]
    pairs: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value = "pose_accuracy.csv")]
    out: PathBuf,
    /// RANSAC inlier threshold in pixels.
    #[arg(long, default_value_t = PnPConfig::default().threshold)]
    threshold: f64,
    #[arg(long, default_value_t = PnPConfig::default().iterations)]
    iterations: usize,
    #[arg(long, default_value_t = PnPConfig::default().confidence)]
    confidence: f64,
    #[arg(long)]
    no_refine: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Align {
    Sim3,
    None,
}

#[derive(Args)]
struct EvalTrajArgs {
    #[arg(long)]
    est: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Sub-trajectory lengths in seconds.
    #[arg(long, value_delimiter = ',', default_values_t = [2.0, 5.0, 10.0])]
    lengths: Vec<f64>,
    #[arg(long)]
    fps: f64,
    #[arg(long, value_enum, default_value_t = Align::Sim3)]
    align: Align,
    #[arg(long, default_value = "relative_errors.csv")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Default,
    Stress,
    Drifting,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Uniform,
    Drift,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    frames: usize,
    #[arg(long, default_value_t = 300)]
    points: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Preset::Default)]
    preset: Preset,
    /// Pixel noise standard deviation.
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    outlier_fraction: Option<f64>,
    #[arg(long, value_enum)]
    outlier_mode: Option<Mode>,
    #[arg(long)]
    drift_amplitude: Option<f64>,
    #[arg(long)]
    drift_frames: Option<usize>,
    /// Frame rate written to the manifest and trajectory timestamps.
    #[arg(long, default_value_t = 30.0)]
    fps: f64,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(file))
}

fn require_file(path: &Path) -> Result<()> {
    ensure!(path.is_file(), "{}: no such file", path.display());
    Ok(())
}

fn require_dir(path: &Path) -> Result<()> {
    ensure!(path.is_dir(), "{}: no such directory", path.display());
    Ok(())
}

fn features(args: FeaturesArgs) -> Result<()> {
    let images = glob_frames(Path::new(""), &args.images)?;
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    for (frame, path) in &images {
        let image = load_gray(path)?;
        let f = detect_and_describe(&image, args.max_points, *frame);
        f.save(&args.out.join(format!("frame_{frame:06}.features")))?;
    }
    info!("wrote features for {} images", images.len());
    Ok(())
}

fn load_labels(dir: &Path) -> Result<Vec<FrameLabels>> {
    require_dir(dir)?;
    glob_frames(dir, LABEL_PATTERN)?
        .into_iter()
        .map(|(frame, path)| FrameLabels::load(&path, frame).map_err(Into::into))
        .collect()
}

fn write_stats(path: &Path, reports: &[FrameReport]) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "frame,window_size,points,observations,rms_reprojection,iterations,final_cost")?;
    for r in reports {
        let (it, cost) = r
            .optimization
            .as_ref()
            .map_or((0, 0.0), |o| (o.iterations, o.final_cost));
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.frame, r.window_size, r.points, r.observations, r.rms_reprojection, it, cost
        )?;
    }
    w.flush()?;
    Ok(())
}

fn vo(args: VoArgs) -> Result<()> {
    require_file(&args.manifest)?;
    ensure!(args.every >= 1, "--every must be at least 1");
    ensure!(
        (0.0..=1.0).contains(&args.unstable_weight),
        "--unstable-weight must lie in [0, 1]"
    );
    let config = args.ba.config()?;
    let manifest = Manifest::load(&args.manifest)?;
    let k = manifest.load_intrinsics()?;
    let frames = manifest.load_features(args.every)?;
    let weights = match &args.weights_from {
        Some(dir) => {
            let mapping = LabelWeights {
                unstable: args.unstable_weight,
                ..LabelWeights::default()
            };
            Some(weights_from_labels(&load_labels(dir)?, &mapping))
        }
        None => None,
    };
    info!("running VO over {} frames", frames.len());
    let (output, reports) = run_sequence(k, frames, &config, args.tau, weights)?;
    save_tum(&args.traj, &output.trajectory, manifest.fps)?;
    if let Some(path) = &args.map {
        output.save(path)?;
    }
    if let Some(path) = &args.stats {
        write_stats(path, &reports)?;
    }
    Ok(())
}

fn label(args: LabelArgs) -> Result<()> {
    require_file(&args.map)?;
    let thresholds = LabelThresholds {
        min_length: args.min_length,
        mean_max: args.mean_max,
        max_min: args.max_min,
    };
    let output = VoOutput::load(&args.map)?;
    let labels = label_sequence(&output, &thresholds);
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    for l in &labels {
        l.save(&args.out.join(LABEL_PATTERN.replace('*', &format!("{:06}", l.frame))))?;
    }
    info!("labeled {} frames", labels.len());
    Ok(())
}

fn emit_pairs(args: EmitPairsArgs) -> Result<()> {
    let labels = load_labels(&args.labels)?;
    let pairs = emit_training_pairs(&labels, args.window, args.pairs_per_frame, args.seed)?;
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    for (i, p) in pairs.iter().enumerate() {
        p.save(&args.out.join(format!("pair_{i:06}.txt")))?;
    }
    info!("wrote {} pairs", pairs.len());
    Ok(())
}

fn eval_pnp(args: EvalPnpArgs) -> Result<()> {
    require_file(&args.manifest)?;
    let manifest = Manifest::load(&args.manifest)?;
    let Some(gt_path) = &manifest.gt else {
        bail!("{}: manifest names no `gt` trajectory", args.manifest.display());
    };
    let gt = load_tum(&manifest.resolve(gt_path), manifest.fps)?;
    let features = manifest.load_features(1)?;
    let depths = manifest.load_depths()?;
    let mut seq = PairSequence {
        intrinsics: manifest.load_intrinsics()?,
        features: Vec::with_capacity(features.len()),
        depths: Vec::with_capacity(features.len()),
        poses: Vec::with_capacity(features.len()),
        depth_scale: manifest.depth_scale,
    };
    for f in features {
        let frame = f.frame_index;
        let depth = depths
            .iter()
            .find(|(d, _)| *d == frame)
            .with_context(|| format!("no depth map for frame {frame}"))?;
        let pose = gt
            .iter()
            .find(|(g, _)| *g == frame)
            .with_context(|| format!("no ground-truth pose for frame {frame}"))?;
        seq.features.push(f);
        seq.depths.push(depth.1.clone());
        seq.poses.push(pose.1);
    }
    let config = PnPConfig {
        iterations: args.iterations,
        threshold: args.threshold,
        confidence: args.confidence,
        refine: !args.no_refine,
        seed: args.seed,
    };
    let mut w = create(&args.out)?;
    writeln!(w, "frame_diff,rot_lt_5deg,trans_lt_5cm,n_pairs")?;
    for &diff in &args.frame_diffs {
        let (acc, _) = pose_pair_eval(&seq, diff, args.pairs, args.seed, &config)?;
        writeln!(w, "{},{},{},{}", acc.frame_diff, acc.rot_fraction, acc.trans_fraction, acc.pairs)?;
    }
    w.flush()?;
    Ok(())
}

fn eval_traj(args: EvalTrajArgs) -> Result<()> {
    require_file(&args.est)?;
    require_file(&args.gt)?;
    let est = load_tum(&args.est, args.fps)?;
    let gt = load_tum(&args.gt, args.fps)?;
    let est = match args.align {
        Align::Sim3 => {
            let (aligned, sim) = align_trajectory(&est, &gt)?;
            info!("sim3 scale {} residual {}", sim.scale, sim.residual);
            aligned
        }
        Align::None => est,
    };
    let mut rows = Vec::with_capacity(args.lengths.len());
    for &length in &args.lengths {
        match trajectory_relative_errors(&est, &gt, &[length], args.fps) {
            Ok(e) => {
                let e = &e[0];
                rows.push(format!("{},{},{},{},{}", e.length_s, e.frames, e.segments, e.rot_deg, e.trans));
            }
            // keep one row per requested length; a window that never fits has no segments
            Err(e @ TrajectoryError::TooShort { .. }) => {
                warn!("{length} s: {e}");
                rows.push(format!("{length},{},0,nan,nan", (length * args.fps).round()));
            }
            Err(e) => return Err(e.into()),
        }
    }
    let mut w = create(&args.out)?;
    writeln!(w, "length_s,frames,segments,rot_deg,trans")?;
    for row in &rows {
        writeln!(w, "{row}")?;
    }
    w.flush()?;
    Ok(())
}

fn synth(args: SynthArgs) -> Result<()> {
    let mut c = match args.preset {
        Preset::Default => SceneConfig::new(args.frames, args.points, args.seed),
        Preset::Stress => SceneConfig::stress(args.frames, args.points, args.seed),
        Preset::Drifting => SceneConfig::drifting(args.frames, args.points, args.seed),
    };
    if let Some(n) = args.noise {
        c.noise_sigma = n;
    }
    if let Some(f) = args.outlier_fraction {
        c.outlier_fraction = f;
    }
    if let Some(m) = args.outlier_mode {
        c.outlier_mode = match m {
            Mode::Uniform => OutlierMode::UniformPixel,
            Mode::Drift => DEFAULT_DRIFT,
        };
    }
    if args.drift_amplitude.is_some() || args.drift_frames.is_some() {
        let OutlierMode::Drift { amplitude, frames } = c.outlier_mode else {
            bail!("--drift-amplitude and --drift-frames need the drift outlier mode");
        };
        c.outlier_mode = OutlierMode::Drift {
            amplitude: args.drift_amplitude.unwrap_or(amplitude),
            frames: args.drift_frames.unwrap_or(frames),
        };
    }
    ensure!(args.fps > 0.0 && args.fps.is_finite(), "--fps must be positive");
    let scene = generate_scene(&c)?;
    scene.write(&args.out, args.fps)?;
    info!("wrote {} frames to {}", c.n_frames, args.out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        // usage errors exit with 2, --help and --version with 0
        Err(e) => e.exit(),
    };
    let result = match cli.command {
        Command::Features(a) => features(a),
        Command::Vo(a) => vo(a),
        Command::Label(a) => label(a),
        Command::EmitPairs(a) => emit_pairs(a),
        Command::EvalPnp(a) => eval_pnp(a),
        Command::EvalTraj(a) => eval_traj(a),
        Command::Synth(a) => synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
