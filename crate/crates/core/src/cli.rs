//! Command-line surface.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::compare::{compare_ik_vs_direct, CompareOptions};
use crate::dataset::{Dataset, DEFAULT_SIDE_MM};
use crate::error::{Error, Result};
use crate::geomcam::RootMode;
use crate::iksolve::{results_to_angle_set, solve_sequence, IkOptions, IkWeights};
use crate::io::{self, Tensor};
use crate::kinmodel::{scale_model, KinematicModel, HUMANOID_SKELETON_JSON};
use crate::learn::{
    ablation_csv, ablation_matrix, evaluate, metrics_csv, train, Checkpoint, EulerTargetPolicy, Representation,
    Supervision, TrainConfig, ABLATION_SIDES,
};
use crate::rotmath::mpjae;
use crate::synth::{generate, SynthSpec, ARM_SKELETON_JSON};

#[derive(Debug, Parser)]
#[command(name = "kinemetric", version, about = "Joint-angle estimation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset (motion, markers, cameras, heatmaps).
    Synth(SynthArgs),
    /// Scale a skeleton to experimental markers.
    Scale(ScaleArgs),
    /// Solve inverse kinematics for a marker CSV.
    Ik(IkArgs),
    /// Mean per-joint angle error between two angle CSVs.
    Metrics(MetricsArgs),
    /// Dump one frame's aggregated volume as a tensor file.
    Aggregate(AggregateArgs),
    /// Train the angle regressor on a dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset's validation split.
    Eval(EvalArgs),
    /// Train every representation × supervision × root mode × side cell.
    Ablate(AblateArgs),
    /// Compare IK-derived and directly regressed angles.
    Compare(CompareArgs),
}

#[derive(Debug, Args)]
struct SeedArg {
    /// Random seed.
    #[arg(long, env = "KINEMETRIC_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// Skeleton JSON path, or `humanoid` / `arm` for the bundled ones.
    #[arg(long, default_value = "humanoid")]
    skeleton: String,
    #[arg(long, default_value_t = 3.0)]
    duration: f64,
    #[arg(long, default_value_t = 100.0)]
    rate: f64,
    #[arg(long, default_value_t = 30.0)]
    amplitude_deg: f64,
    #[arg(long, default_value_t = 0.5)]
    frequency_hz: f64,
    #[arg(long, default_value_t = 100.0)]
    root_amplitude_mm: f64,
    #[arg(long, default_value_t = 3)]
    cameras: usize,
    #[arg(long, default_value_t = 4000.0)]
    radius_mm: f64,
    #[arg(long, default_value_t = 300.0)]
    camera_height_mm: f64,
    #[arg(long, default_value_t = 1280)]
    width: usize,
    #[arg(long, default_value_t = 720)]
    height: usize,
    /// Heatmap Gaussian σ in image pixels.
    #[arg(long, default_value_t = 48.0)]
    sigma_px: f64,
    #[arg(long, default_value_t = 32)]
    stride: usize,
    /// Marker noise σ (mm).
    #[arg(long, default_value_t = 0.0)]
    noise_mm: f64,
    #[command(flatten)]
    seed: SeedArg,
}

#[derive(Debug, Args)]
struct ScaleArgs {
    #[arg(long, default_value = "humanoid")]
    skeleton: String,
    #[arg(long)]
    markers: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct IkArgs {
    #[arg(long, default_value = "humanoid")]
    skeleton: String,
    #[arg(long)]
    markers: PathBuf,
    /// Marker weights JSON; uniform when omitted.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Fail when any frame does not converge.
    #[arg(long)]
    strict: bool,
}

#[derive(Debug, Args)]
struct MetricsArgs {
    a: PathBuf,
    b: PathBuf,
}

#[derive(Debug, Args)]
struct AggregateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0)]
    frame: usize,
    #[arg(long, default_value_t = 32)]
    side: usize,
    #[arg(long, default_value_t = DEFAULT_SIDE_MM)]
    side_mm: f64,
    #[arg(long, default_value = "local")]
    mode: RootMode,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ModelArgs {
    #[arg(long, default_value = "6d")]
    representation: Representation,
    #[arg(long, default_value = "so3")]
    supervision: Supervision,
    #[arg(long, default_value = "local")]
    mode: RootMode,
    #[arg(long, default_value_t = 32)]
    side: usize,
    #[arg(long, default_value_t = DEFAULT_SIDE_MM)]
    side_mm: f64,
    #[arg(long, default_value_t = 256)]
    hidden: usize,
    #[arg(long)]
    no_batch_norm: bool,
}

#[derive(Debug, Args)]
struct ScheduleArgs {
    #[arg(long, default_value_t = 15)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// First (1-based) epoch at the annealed rate.
    #[arg(long)]
    anneal_epoch: Option<usize>,
    #[arg(long, default_value_t = 0.1)]
    anneal_factor: f64,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    /// Trailing fraction of frames held out for validation.
    #[arg(long, default_value_t = 0.2)]
    val_fraction: f64,
    #[command(flatten)]
    seed: SeedArg,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch metrics CSV.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Separate validation dataset (otherwise the trailing split).
    #[arg(long)]
    val_data: Option<PathBuf>,
    /// Start from this checkpoint's weights.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    freeze_encoder: bool,
    /// Use stored Euler targets without moving them to the nearest branch.
    #[arg(long)]
    raw_euler_targets: bool,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    schedule: ScheduleArgs,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Evaluate every frame instead of the validation split.
    #[arg(long)]
    all: bool,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Cube sides to sweep.
    #[arg(long, value_delimiter = ',', default_values_t = ABLATION_SIDES)]
    sides: Vec<usize>,
    #[arg(long, default_value_t = DEFAULT_SIDE_MM)]
    side_mm: f64,
    #[arg(long, default_value_t = 256)]
    hidden: usize,
    #[command(flatten)]
    schedule: ScheduleArgs,
}

#[derive(Debug, Args)]
struct CompareArgs {
    #[arg(long)]
    data: PathBuf,
    /// Trained checkpoint for the direct path.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Table CSV.
    #[arg(long)]
    out: PathBuf,
    /// Long-format trajectory CSV.
    #[arg(long)]
    trajectories: Option<PathBuf>,
    /// Joint-position noise σ (mm) for the noisy IK row.
    #[arg(long, default_value_t = 18.0)]
    noise_mm: f64,
    #[command(flatten)]
    seed: SeedArg,
}

fn load_skeleton(spec: &str) -> Result<KinematicModel> {
    match spec {
        "humanoid" if !Path::new(spec).exists() => KinematicModel::from_json_str(HUMANOID_SKELETON_JSON),
        "arm" if !Path::new(spec).exists() => KinematicModel::from_json_str(ARM_SKELETON_JSON),
        path => KinematicModel::load(path),
    }
}

impl ScheduleArgs {
    fn apply(&self, c: &mut TrainConfig) {
        c.epochs = self.epochs;
        c.lr = self.lr;
        c.anneal_epoch = self.anneal_epoch.unwrap_or(self.epochs * 4 / 5);
        c.anneal_factor = self.anneal_factor;
        c.batch_size = self.batch_size;
        c.val_fraction = self.val_fraction;
        c.seed = self.seed.seed;
    }
}

fn train_config(a: &TrainArgs) -> TrainConfig {
    let mut c = TrainConfig {
        representation: a.model.representation,
        supervision: a.model.supervision,
        root_mode: a.model.mode,
        side: a.model.side,
        side_mm: a.model.side_mm,
        hidden: a.model.hidden,
        batch_norm: !a.model.no_batch_norm,
        freeze_encoder: a.freeze_encoder,
        euler_targets: if a.raw_euler_targets {
            EulerTargetPolicy::Raw
        } else {
            EulerTargetPolicy::NearestBranch
        },
        ..TrainConfig::default()
    };
    a.schedule.apply(&mut c);
    c
}

fn run_command(cmd: Command, out: &mut dyn Write) -> Result<()> {
    let say = |out: &mut dyn Write, s: String| {
        let _ = writeln!(out, "{s}");
    };
    match cmd {
        Command::Synth(a) => {
            let model = load_skeleton(&a.skeleton)?;
            let spec = SynthSpec {
                duration_s: a.duration,
                rate_hz: a.rate,
                amplitude_deg: a.amplitude_deg,
                frequency_hz: a.frequency_hz,
                root_amplitude_mm: a.root_amplitude_mm,
                cameras: a.cameras,
                ring_radius_mm: a.radius_mm,
                camera_height_mm: a.camera_height_mm,
                width: a.width,
                height: a.height,
                heatmap_sigma_px: a.sigma_px,
                stride: a.stride,
                marker_noise_mm: a.noise_mm,
                seed: a.seed.seed,
            };
            let synth = generate(&model, &spec)?;
            synth.write(&a.out, &spec)?;
            say(
                out,
                format!(
                    "wrote {} frames ({} flagged) to {}",
                    synth.dataset.len(),
                    synth.dataset.flagged.len(),
                    a.out.display()
                ),
            );
        }
        Command::Scale(a) => {
            let model = load_skeleton(&a.skeleton)?;
            let markers = io::read_marker_csv(&a.markers)?;
            let (scaled, factors) = scale_model(&model, &markers, &model.scale_pairs)?;
            io::write_text(&a.out, &scaled.to_json())?;
            for (seg, s) in factors {
                say(out, format!("{seg}: {s:.6}"));
            }
        }
        Command::Ik(a) => {
            let model = load_skeleton(&a.skeleton)?;
            let markers = io::read_marker_csv(&a.markers)?;
            let weights = match &a.weights {
                Some(p) => IkWeights::load(p)?,
                None => IkWeights::uniform(&model),
            };
            let results = solve_sequence(&model, &markers, &weights, &IkOptions::default())?;
            let times: Vec<f64> = markers.frames.iter().map(|f| f.time).collect();
            io::write_angle_csv(&a.out, &results_to_angle_set(&model, &results, &times)?)?;
            let failed: Vec<usize> = results.iter().enumerate().filter(|(_, r)| !r.converged).map(|(i, _)| i).collect();
            let worst = results.iter().map(|r| r.residual).fold(0.0, f64::max);
            say(
                out,
                format!(
                    "{} frames, {} not converged, max residual {worst:.6e} mm²",
                    results.len(),
                    failed.len()
                ),
            );
            if a.strict && !failed.is_empty() {
                let why = results[failed[0]].diagnostic.clone().unwrap_or_default();
                return Err(Error::UnsolvableFrame(format!("frame {}: {why}", failed[0])));
            }
        }
        Command::Metrics(a) => {
            let x = io::read_angle_csv(&a.a)?;
            let y = io::read_angle_csv(&a.b)?;
            say(out, format!("{:.3}", mpjae(&x, &y)?));
        }
        Command::Aggregate(a) => {
            let data = Dataset::load(&a.data)?;
            if a.frame >= data.len() {
                return Err(Error::InvalidArgument(format!(
                    "frame {} is out of range (dataset has {})",
                    a.frame,
                    data.len()
                )));
            }
            let vol = data.volume(a.frame, a.mode, a.side, a.side_mm)?;
            let c = vol.channels;
            Tensor::new(vec![a.side, a.side, a.side, c], vol.values, data.joints.clone())?.write(&a.out)?;
            say(out, format!("wrote {}³×{c} volume to {}", a.side, a.out.display()));
        }
        Command::Train(a) => {
            let cfg = train_config(&a);
            let data = Dataset::load(&a.data)?;
            let (tr, va) = match &a.val_data {
                Some(p) => (data, Dataset::load(p)?),
                None => data.split(cfg.val_fraction)?,
            };
            let init = a.init.as_ref().map(|p| Checkpoint::load(p)?.network()).transpose()?;
            let result = match train(&tr, &va, &cfg, init) {
                Err(Error::Diverged { epoch, last_good }) => {
                    last_good.save(&a.out)?;
                    return Err(Error::Diverged { epoch, last_good });
                }
                r => r?,
            };
            result.checkpoint.save(&a.out)?;
            if let Some(m) = &a.metrics {
                io::write_text(m, &metrics_csv(&result.metrics))?;
            }
            let last = result.metrics.last().expect("at least one epoch");
            say(
                out,
                format!(
                    "epoch {} loss {} mpjae_train {} mpjae_val {}",
                    last.epoch, last.loss, last.mpjae_train, last.mpjae_val
                ),
            );
        }
        Command::Eval(a) => {
            let ck = Checkpoint::load(&a.checkpoint)?;
            let data = Dataset::load(&a.data)?;
            let set = if a.all {
                data
            } else {
                let (_, va) = data.split(ck.config.val_fraction)?;
                if va.is_empty() {
                    return Err(Error::MissingData("validation split is empty; use --all".into()));
                }
                va
            };
            say(out, format!("{}", evaluate(&ck.network()?, &set, &ck.config)?));
        }
        Command::Ablate(a) => {
            let data = Dataset::load(&a.data)?;
            let mut base = TrainConfig {
                side_mm: a.side_mm,
                hidden: a.hidden,
                ..TrainConfig::default()
            };
            a.schedule.apply(&mut base);
            let cells = ablation_matrix(&data, &base, &a.sides)?;
            let csv = ablation_csv(&cells);
            io::write_text(&a.out, &csv)?;
            let _ = write!(out, "{csv}");
        }
        Command::Compare(a) => {
            let data = Dataset::load(&a.data)?;
            let model = KinematicModel::load(a.data.join("skeleton.json"))?;
            let ck = a.checkpoint.as_ref().map(|p| Checkpoint::load(p)).transpose()?;
            let opts = CompareOptions {
                noise_mm: a.noise_mm,
                seed: a.seed.seed,
                ..CompareOptions::default()
            };
            let report = compare_ik_vs_direct(&model, &data, ck.as_ref(), &opts)?;
            let table = report.table_csv();
            io::write_text(&a.out, &table)?;
            if let Some(t) = &a.trajectories {
                io::write_text(t, &report.trajectories_csv())?;
            }
            let _ = write!(out, "{table}");
        }
    }
    Ok(())
}

/// Exit status for an error: 2 for bad input files or arguments, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    if e.is_input_error() || matches!(e, Error::InvalidArgument(_) | Error::MissingData(_)) {
        2
    } else {
        1
    }
}

/// Parses `args` (including the program name), runs the command, and
/// returns the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    match run_command(cli.command, &mut lock) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
