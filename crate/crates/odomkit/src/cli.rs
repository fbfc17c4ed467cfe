//! Command-line front end: `simulate` writes synthetic datasets, `odometry`
//! runs the estimator over a dataset directory, `evaluate` scores a
//! trajectory against ground truth.

use std::ffi::OsString;
use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use crate::estimator::{EstimateStatus, Estimator, EstimatorConfig, Mode};
use crate::eval::{ate, default_rpe_lengths, rpe, RpeBin, Trajectory};
use crate::io::{
    config_to_toml, load_config, read_trajectory_tum, write_trajectory_tum, Dataset, LoadedConfig,
};
use crate::sim::Scenario;

#[derive(Parser)]
#[command(
    name = "odomkit",
    version,
    about = "Sliding-window multi-sensor odometry: simulate, estimate, evaluate"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the odometry estimator over a dataset directory.
    Odometry(OdometryArgs),
    /// Generate a synthetic dataset from a named scenario.
    Simulate(SimulateArgs),
    /// Compare an estimated trajectory against ground truth.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct OdometryArgs {
    /// Estimator configuration file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Dataset directory holding imu.csv and tracks_cam<N>.csv.
    #[arg(long, required_unless_present = "dump_config")]
    dataset: Option<PathBuf>,
    /// Output trajectory file (TUM format). The run report is written next
    /// to it with extension `.report.json`.
    #[arg(long, required_unless_present = "dump_config")]
    output: Option<PathBuf>,
    /// Override the mode from the config file.
    #[arg(long)]
    mode: Option<Mode>,
    /// Print the effective configuration (defaults filled in) and exit.
    #[arg(long)]
    dump_config: bool,
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario name: circle, sinusoid3d, or static.
    #[arg(long)]
    scenario: String,
    /// Seed for world generation and measurement noise.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for the dataset files.
    #[arg(long)]
    output: PathBuf,
    /// Write noise-free measurements instead of noisy ones.
    #[arg(long)]
    ideal: bool,
    /// Override the number of camera frames.
    #[arg(long)]
    frames: Option<usize>,
    /// Override the pixel noise sigma.
    #[arg(long)]
    sigma_px: Option<f64>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Estimated trajectory (TUM format).
    #[arg(long)]
    est: PathBuf,
    /// Ground-truth trajectory (TUM format).
    #[arg(long)]
    gt: PathBuf,
    /// Segment lengths in meters for the relative-error bins
    /// (comma-separated). Defaults to lengths scaled to the trajectory.
    #[arg(long, value_delimiter = ',')]
    rpe_lengths: Vec<f64>,
    /// Timestamp association tolerance in seconds.
    #[arg(long, default_value_t = 0.02)]
    max_dt: f64,
    /// Also write the metrics as JSON.
    #[arg(long)]
    json_out: Option<PathBuf>,
}

/// Runs the CLI against the given argument vector and returns the process
/// exit code: 0 on success, 1 on runtime errors, 2 on usage errors.
pub fn cli_run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Odometry(args) => run_odometry(args),
        Command::Simulate(args) => run_simulate(args),
        Command::Evaluate(args) => run_evaluate(args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

/// Re-applies the per-mode validation after a `--mode` flag replaces the
/// mode the config file was parsed under.
fn apply_mode_override(config: &mut EstimatorConfig, mode: Mode) -> Result<()> {
    match mode {
        Mode::Stereo | Mode::StereoImu => {
            if config.rig.len() < 2 {
                bail!("mode {mode} requires at least 2 cameras, config has {}", config.rig.len());
            }
        }
        Mode::MonoImu => config.rig.cameras.truncate(1),
    }
    if mode.uses_imu() && (config.imu_noise.sigma_g <= 0.0 || config.imu_noise.sigma_a <= 0.0) {
        bail!(
            "mode {mode} requires section [imu] (missing keys: imu.sigma_g, imu.sigma_a, imu.sigma_bg, imu.sigma_ba)"
        );
    }
    config.mode = mode;
    Ok(())
}

#[derive(serde::Serialize)]
struct RunReport {
    mode: String,
    frames: usize,
    poses_written: usize,
    mean_iterations: f64,
    rejected_outliers: usize,
    imu_rejections: u64,
    degraded_frames: usize,
    initializing_frames: usize,
    elapsed_seconds: f64,
    ms_per_frame: f64,
}

fn run_odometry(args: OdometryArgs) -> Result<()> {
    let LoadedConfig {
        mut config,
        warnings,
    } = load_config(&args.config)?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    if let Some(mode) = args.mode {
        apply_mode_override(&mut config, mode)?;
    }
    if args.dump_config {
        print!("{}", config_to_toml(&config));
        return Ok(());
    }
    let dataset_dir = args.dataset.expect("required unless --dump-config");
    let output = args.output.expect("required unless --dump-config");

    let (data, summary) = Dataset::load(&dataset_dir, &config.rig)?;
    if summary.rejected_out_of_bounds > 0 {
        eprintln!(
            "warning: rejected {} out-of-bounds observations",
            summary.rejected_out_of_bounds
        );
    }

    let feed_imu = config.mode.uses_imu();
    let mode = config.mode;
    let mut est = Estimator::new(config);
    let mut estimates = Vec::with_capacity(data.frames.len());
    let start = Instant::now();
    let mut imu_iter = data.imu.iter().peekable();
    for frame in &data.frames {
        if feed_imu {
            while let Some(s) = imu_iter.peek() {
                if s.t <= frame.t + 1e-9 {
                    if let Err(e) = est.process_imu(**s) {
                        eprintln!("warning: dropped IMU sample: {e}");
                    }
                    imu_iter.next();
                } else {
                    break;
                }
            }
        }
        let estimate = est
            .process_frame(frame.clone())
            .with_context(|| format!("frame {}", frame.frame_id))?;
        estimates.push(estimate);
    }
    let elapsed = start.elapsed().as_secs_f64();

    let mut traj = Trajectory::default();
    for e in &estimates {
        traj.push(e.t, e.pose);
    }
    write_trajectory_tum(&output, &traj)?;

    let solves: Vec<usize> = estimates
        .iter()
        .filter_map(|e| e.solve.map(|s| s.iterations))
        .collect();
    let report = RunReport {
        mode: mode.to_string(),
        frames: data.frames.len(),
        poses_written: traj.len(),
        mean_iterations: if solves.is_empty() {
            0.0
        } else {
            solves.iter().sum::<usize>() as f64 / solves.len() as f64
        },
        rejected_outliers: est.rejected_features().len(),
        imu_rejections: est.imu_rejections(),
        degraded_frames: estimates
            .iter()
            .filter(|e| e.status == EstimateStatus::Degraded)
            .count(),
        initializing_frames: estimates
            .iter()
            .filter(|e| e.status == EstimateStatus::Initializing)
            .count(),
        elapsed_seconds: elapsed,
        ms_per_frame: if data.frames.is_empty() {
            0.0
        } else {
            1e3 * elapsed / data.frames.len() as f64
        },
    };
    let report_path = output.with_extension("report.json");
    fs::write(
        &report_path,
        serde_json::to_string_pretty(&report).expect("report serializes"),
    )
    .with_context(|| format!("writing {}", report_path.display()))?;
    println!(
        "processed {} frames in {:.2} s, wrote {} and {}",
        report.frames,
        elapsed,
        output.display(),
        report_path.display()
    );
    Ok(())
}

fn run_simulate(args: SimulateArgs) -> Result<()> {
    let mut scenario = Scenario::preset(&args.scenario, args.seed)?;
    if let Some(frames) = args.frames {
        scenario.frames = frames;
    }
    if let Some(sigma_px) = args.sigma_px {
        scenario.sigma_px = sigma_px;
    }
    let data = if args.ideal {
        scenario.synthesize_ideal()
    } else {
        scenario.synthesize_noisy(args.seed)
    };

    data.write(&args.output, scenario.rig.len())?;

    let mut config = EstimatorConfig::new(Mode::StereoImu, scenario.rig.clone(), scenario.imu_noise);
    config.gravity_norm = scenario.gravity_norm;
    config.sigma_px = scenario.sigma_px.max(0.5);
    fs::write(args.output.join("config.toml"), config_to_toml(&config))
        .with_context(|| format!("writing {}", args.output.join("config.toml").display()))?;

    println!(
        "wrote {} frames, {} imu samples, gt.tum, and config.toml to {}",
        data.frames.len(),
        data.imu.len(),
        args.output.display()
    );
    Ok(())
}

fn print_rpe_table(bins: &[RpeBin]) {
    println!("# length_m  trans_percent  rot_deg_per_m  segments");
    for bin in bins {
        println!(
            "{:<9.3} {:>14.4} {:>14.6} {:>9}",
            bin.length, bin.translation_percent, bin.rotation_deg_per_m, bin.segments
        );
    }
}

fn run_evaluate(args: EvaluateArgs) -> Result<()> {
    let est = read_trajectory_tum(&args.est)?;
    let gt = read_trajectory_tum(&args.gt)?;
    let ate_res = ate(&est, &gt, args.max_dt, false)?;
    let lengths = if args.rpe_lengths.is_empty() {
        default_rpe_lengths(&gt)
    } else {
        args.rpe_lengths.clone()
    };
    let rpe_bins = rpe(&est, &gt, &lengths, args.max_dt)?;

    println!("ATE RMSE [m]: {:.6}", ate_res.rmse);
    println!("ATE mean [m]: {:.6}", ate_res.mean);
    println!("ATE median [m]: {:.6}", ate_res.median);
    println!("ATE max [m]: {:.6}", ate_res.max);
    println!("matched pairs: {}", ate_res.pairs);
    print_rpe_table(&rpe_bins);

    if let Some(json_path) = &args.json_out {
        let json = serde_json::json!({
            "ate": {
                "rmse": ate_res.rmse,
                "mean": ate_res.mean,
                "median": ate_res.median,
                "max": ate_res.max,
                "pairs": ate_res.pairs,
            },
            "rpe": rpe_bins.iter().map(|b| serde_json::json!({
                "length_m": b.length,
                "translation_percent": b.translation_percent,
                "rotation_deg_per_m": b.rotation_deg_per_m,
                "segments": b.segments,
            })).collect::<Vec<_>>(),
        });
        fs::write(json_path, serde_json::to_string_pretty(&json).expect("metrics serialize"))
            .with_context(|| format!("writing {}", json_path.display()))?;
    }
    Ok(())
}
