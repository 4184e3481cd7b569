//! Command-line entry points: simulate walking datasets, run the smoother
//! with a selectable factor set, and evaluate estimates against truth.
//!
//! Exit codes: 0 on success, 2 on usage/config errors, 3 on numerical
//! failure (reports are still written in that case).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nalgebra::Vector3;

use strider_core::eval::{absolute_trajectory_error, relative_position_error, EvalError, TrajectoryPoint};
use strider_core::io::{read_csv, read_dataset, write_csv, write_dataset};
use strider_core::manifold::{Pose, Rotation};
use strider_core::pipeline::{build_problem, truth_trajectory, EstimatorConfig, FactorSet};
use strider_core::sim::{apply_dropout, contact_noise_model, generate, relpose_covariance, ScenarioConfig};

/// Relative-position-error horizon (seconds) used by `evaluate`.
const RPE_HORIZON: f64 = 1.0;

#[derive(Parser)]
#[command(name = "strider", version, about = "Contact-aided smoothing for legged robots: simulate, estimate, evaluate.")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a simulated walking dataset (sensors + ground truth).
    Simulate {
        /// Scenario config file: `key = value` lines, `#` comments.
        #[arg(long)]
        config: PathBuf,
        /// Output dataset path (JSONL); truth goes to `<out>.truth.jsonl`.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's random seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Build and solve the smoothing graph over a dataset.
    Estimate {
        #[arg(long)]
        dataset: PathBuf,
        /// Factor set: vic | ic | vi | i (contact implies forward kinematics).
        #[arg(long)]
        factors: String,
        /// Keyframe spacing in seconds.
        #[arg(long, default_value_t = 0.25)]
        keyframe_dt: f64,
        /// Terrain factors on flat ground: on | off.
        #[arg(long, default_value = "off")]
        terrain: String,
        /// Output directory for trajectory.csv, logdet.csv and report.txt.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare an estimated trajectory against ground truth.
    Evaluate {
        /// trajectory.csv produced by `estimate`.
        #[arg(long)]
        estimate: PathBuf,
        /// Ground-truth JSONL produced by `simulate`.
        #[arg(long)]
        truth: PathBuf,
        /// Output directory for ate.csv, rpe.csv, rpe_cdf.csv, summary.txt.
        #[arg(long)]
        out: PathBuf,
    },
}

enum CliError {
    Config(String),
    Numerical(String),
}

impl CliError {
    fn exit(&self) -> ExitCode {
        match self {
            CliError::Config(msg) => {
                eprintln!("error: {msg}");
                ExitCode::from(2)
            }
            CliError::Numerical(msg) => {
                eprintln!("error: {msg}");
                ExitCode::from(3)
            }
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate { config, out, seed } => cmd_simulate(&config, &out, seed),
        Command::Estimate { dataset, factors, keyframe_dt, terrain, out } => {
            cmd_estimate(&dataset, &factors, keyframe_dt, &terrain, &out)
        }
        Command::Evaluate { estimate, truth, out } => cmd_evaluate(&estimate, &truth, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => e.exit(),
    }
}

fn truth_path(out: &Path) -> PathBuf {
    match out.extension() {
        Some(ext) => out.with_extension(format!("truth.{}", ext.to_string_lossy())),
        None => out.with_extension("truth.jsonl"),
    }
}

fn cmd_simulate(config: &Path, out: &Path, seed: Option<u64>) -> Result<(), CliError> {
    let text = std::fs::read_to_string(config)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", config.display())))?;
    let mut cfg = ScenarioConfig::from_text(&text).map_err(config_err)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let (truth, records) = generate(&cfg).map_err(config_err)?;
    let records = apply_dropout(&records, &cfg.dropout_windows);
    write_dataset(out, &records).map_err(config_err)?;
    let truth_records = truth.to_records();
    let tpath = truth_path(out);
    write_dataset(&tpath, &truth_records).map_err(config_err)?;
    println!("dataset: {} records -> {}", records.len(), out.display());
    println!("truth:   {} records -> {}", truth_records.len(), tpath.display());
    println!("switches: {}", truth.switches.len());
    Ok(())
}

fn cmd_estimate(
    dataset: &Path,
    factors: &str,
    keyframe_dt: f64,
    terrain: &str,
    out: &Path,
) -> Result<(), CliError> {
    let factor_set = FactorSet::parse(factors)
        .ok_or_else(|| CliError::Config(format!("unknown factor set '{factors}' (expected vic|ic|vi|i)")))?;
    let terrain_on = match terrain {
        "on" => true,
        "off" => false,
        other => return Err(CliError::Config(format!("--terrain must be on or off, got '{other}'"))),
    };
    let records = read_dataset(dataset)
        .map_err(|e| CliError::Config(format!("cannot read dataset {}: {e}", dataset.display())))?;
    std::fs::create_dir_all(out).map_err(config_err)?;

    // The estimator assumes the default sensor noise models; the simulator's
    // defaults match them.
    let scenario_defaults = ScenarioConfig { sigma_relpose_rot: 5e-3, sigma_relpose_pos: 5e-3, ..ScenarioConfig::default() };
    let cfg = EstimatorConfig {
        factor_set,
        keyframe_dt,
        terrain: terrain_on,
        contact_noise: contact_noise_model(&scenario_defaults),
        relpose_covariance: relpose_covariance(&scenario_defaults),
        ..EstimatorConfig::default()
    };
    let mut problem = build_problem(&records, &cfg).map_err(config_err)?;
    let solve_outcome = problem.solve(&cfg.lm);

    // Outputs are written regardless of the solver outcome.
    let header = [
        "t", "qw", "qx", "qy", "qz", "px", "py", "pz",
        "vx", "vy", "vz", "bgx", "bgy", "bgz", "bax", "bay", "baz",
    ];
    write_csv(out.join("trajectory.csv"), &header, &problem.trajectory_rows()).map_err(config_err)?;
    let mut report_text = String::new();
    report_text.push_str(&format!("factors = {}\n", factor_set.label()));
    report_text.push_str(&format!("terrain = {}\n", if terrain_on { "on" } else { "off" }));
    report_text.push_str(&format!("keyframes = {}\n", problem.keyframe_times.len()));
    let failure = match &solve_outcome {
        Ok(report) => {
            report_text.push_str(&format!("iterations = {}\n", report.iterations));
            report_text.push_str(&format!("accepted_steps = {}\n", report.accepted_steps));
            report_text.push_str(&format!("initial_cost = {:.6e}\n", report.initial_cost));
            report_text.push_str(&format!("final_cost = {:.6e}\n", report.final_cost));
            report_text.push_str(&format!("converged = {}\n", report.converged));
            if report.converged {
                None
            } else {
                Some("solver did not converge".to_string())
            }
        }
        Err(e) => {
            report_text.push_str(&format!("solver_error = {e}\n"));
            Some(e.to_string())
        }
    };
    match problem.pose_logdets() {
        Ok(rows) => {
            let rows: Vec<Vec<f64>> = rows.into_iter().map(|(t, v)| vec![t, v]).collect();
            write_csv(out.join("logdet.csv"), &["t", "logdet_pose"], &rows).map_err(config_err)?;
        }
        Err(e) => {
            report_text.push_str(&format!("marginals_unavailable = {e}\n"));
        }
    }
    std::fs::write(out.join("report.txt"), &report_text).map_err(config_err)?;
    print!("{report_text}");
    match failure {
        Some(msg) => Err(CliError::Numerical(msg)),
        None => Ok(()),
    }
}

fn trajectory_from_csv(path: &Path) -> Result<Vec<TrajectoryPoint>, CliError> {
    let (header, rows) = read_csv(path)
        .map_err(|e| CliError::Config(format!("cannot read estimate {}: {e}", path.display())))?;
    let col = |name: &str| -> Result<usize, CliError> {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Config(format!("estimate csv is missing column '{name}'")))
    };
    let (ct, cqw, cqx, cqy, cqz, cpx, cpy, cpz) = (
        col("t")?, col("qw")?, col("qx")?, col("qy")?, col("qz")?,
        col("px")?, col("py")?, col("pz")?,
    );
    Ok(rows
        .iter()
        .map(|r| TrajectoryPoint {
            t: r[ct],
            pose: Pose::new(
                Rotation::from_quaternion_wxyz([r[cqw], r[cqx], r[cqy], r[cqz]]),
                Vector3::new(r[cpx], r[cpy], r[cpz]),
            ),
        })
        .collect())
}

fn cmd_evaluate(estimate: &Path, truth: &Path, out: &Path) -> Result<(), CliError> {
    let est = trajectory_from_csv(estimate)?;
    if est.len() < 2 {
        return Err(CliError::Config("estimate trajectory has fewer than two poses".into()));
    }
    let truth_records = read_dataset(truth)
        .map_err(|e| CliError::Config(format!("cannot read truth {}: {e}", truth.display())))?;
    let tru = truth_trajectory(&truth_records);
    if tru.is_empty() {
        return Err(CliError::Config("truth file contains no truth records".into()));
    }
    // Match tolerance: half the estimate's keyframe spacing.
    let mut diffs: Vec<f64> = est.windows(2).map(|w| w[1].t - w[0].t).collect();
    diffs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let tol = diffs[diffs.len() / 2] * 0.5;

    let map_eval_err = |e: EvalError| match e {
        EvalError::TimestampMismatch { .. } => CliError::Config(e.to_string()),
        EvalError::TooShort(_) => CliError::Config(e.to_string()),
    };
    let ate = absolute_trajectory_error(&est, &tru, tol).map_err(map_eval_err)?;
    let rpe = relative_position_error(&est, &tru, RPE_HORIZON, tol).map_err(map_eval_err)?;

    std::fs::create_dir_all(out).map_err(config_err)?;
    let ate_rows: Vec<Vec<f64>> = ate.errors.iter().map(|(t, e)| vec![*t, *e]).collect();
    write_csv(out.join("ate.csv"), &["t", "position_error"], &ate_rows).map_err(config_err)?;
    let rpe_rows: Vec<Vec<f64>> = rpe.errors.iter().map(|(t, e)| vec![*t, *e]).collect();
    write_csv(out.join("rpe.csv"), &["t", "position_error"], &rpe_rows).map_err(config_err)?;
    let cdf_rows: Vec<Vec<f64>> = rpe.cdf.iter().map(|(e, f)| vec![*e, *f]).collect();
    write_csv(out.join("rpe_cdf.csv"), &["position_error", "cumulative_fraction"], &cdf_rows)
        .map_err(config_err)?;
    let summary = format!(
        "ate_rmse = {:.6e}\nate_mean = {:.6e}\nate_max = {:.6e}\n\
         rpe_horizon = {}\nrpe_rmse = {:.6e}\nrpe_median = {:.6e}\nrpe_max = {:.6e}\n",
        ate.rmse, ate.mean, ate.max, rpe.horizon, rpe.rmse, rpe.median, rpe.max
    );
    std::fs::write(out.join("summary.txt"), &summary).map_err(config_err)?;
    print!("{summary}");
    Ok(())
}
