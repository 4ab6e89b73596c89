//! Command-line front end: `design`, `run`, `sweep`, and `verify`.
//!
//! Exit codes: 0 success, 1 input or validation error, 2 numerical
//! non-convergence or failed trace verification.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use botw_core::geometry::{frank_wolfe_design, read_arm_set, DESIGN_MAX_ITER_DEFAULT};
use botw_core::harness::{
    gaps_file_for, read_json, read_traces_csv, render_check, run_repetitions, summarize_run,
    sweep_horizons, verify_trace_invariants, write_corruption_csv, write_json, write_traces_csv,
    DesignFile, GapsFile, HarnessError, RunConfig,
};

#[derive(Parser)]
#[command(
    name = "botw",
    version,
    about = "Linear bandit simulator: optimal-design exploration with an entropy-adaptive learning rate"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute a near-optimal exploration design for an arm set.
    Design {
        /// Arm set file: CSV (id,x1,...,xd) or JSON.
        #[arg(long)]
        arms: PathBuf,
        /// Convergence slack: stop once g <= d(1+tol).
        #[arg(long, default_value_t = 1e-3)]
        tol: f64,
        /// Output JSON path (weights by id, g_value, iterations, converged).
        #[arg(long)]
        out: PathBuf,
    },
    /// Run seeded repetitions of one experiment config.
    Run {
        /// Experiment config JSON.
        #[arg(long)]
        config: PathBuf,
        /// Override the config's horizon_T.
        #[arg(long)]
        horizon: Option<usize>,
        /// Override the config's repetitions.
        #[arg(long)]
        reps: Option<usize>,
        /// Override the config's base_seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Trace CSV output (repetitions concatenated).
        #[arg(long = "out-trace")]
        out_trace: PathBuf,
        /// Summary JSON output.
        #[arg(long = "out-summary")]
        out_summary: PathBuf,
        /// Optional gap-profile JSON output (verification sidecar).
        #[arg(long = "out-gaps")]
        out_gaps: Option<PathBuf>,
        /// Optional applied-corruption CSV output (corrupted regime only).
        #[arg(long = "out-corruption")]
        out_corruption: Option<PathBuf>,
    },
    /// Run the config across a horizon grid and fit the log-log slope.
    Sweep {
        /// Experiment config JSON (horizon_T is replaced by each grid value).
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated horizons, strictly increasing powers of two.
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        grid: Vec<usize>,
        /// Summary JSON output.
        #[arg(long)]
        out: PathBuf,
        /// Override the config's repetitions.
        #[arg(long)]
        reps: Option<usize>,
        /// Override the config's base_seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Check a recorded trace against the trace inequalities.
    Verify {
        /// Trace CSV recorded at every_round granularity.
        #[arg(long)]
        trace: PathBuf,
        /// Gap-profile JSON for the instance the trace came from.
        #[arg(long)]
        gaps: PathBuf,
    },
}

fn exit_code_for(err: &HarnessError) -> u8 {
    match err {
        HarnessError::DesignNotConverged { .. } | HarnessError::NonPositiveRegret { .. } => 2,
        _ => 1,
    }
}

fn cmd_design(arms_path: &Path, tol: f64, out: &Path) -> Result<u8, HarnessError> {
    if !(tol > 0.0 && tol.is_finite()) {
        return Err(HarnessError::InvalidConfig {
            message: format!("--tol must be positive, got {}", tol),
        });
    }
    let arms = read_arm_set(arms_path)?;
    let design = frank_wolfe_design(&arms, tol, DESIGN_MAX_ITER_DEFAULT)?;
    let file = DesignFile::from_result(&arms, &design);
    write_json(out, &file)?;
    println!(
        "design: {} arms in dimension {}, g = {:.6} after {} iterations ({})",
        arms.len(),
        arms.dim(),
        design.g_value,
        design.iterations,
        if design.converged { "converged" } else { "NOT converged" },
    );
    Ok(if design.converged { 0 } else { 2 })
}

#[allow(clippy::too_many_arguments)]
fn cmd_run(
    config_path: &Path,
    horizon: Option<usize>,
    reps: Option<usize>,
    seed: Option<u64>,
    out_trace: &Path,
    out_summary: &Path,
    out_gaps: Option<&Path>,
    out_corruption: Option<&Path>,
) -> Result<u8, HarnessError> {
    let mut config: RunConfig = read_json(config_path)?;
    if let Some(t) = horizon {
        config.horizon = t;
    }
    if let Some(r) = reps {
        config.repetitions = r;
    }
    if let Some(s) = seed {
        config.base_seed = s;
    }
    config.validate()?;
    let arms = config.arm_set_source.load()?;
    let set = run_repetitions(&config)?;
    write_traces_csv(out_trace, &set.traces)?;
    let gaps = gaps_file_for(&config, &arms)?;
    let summary = summarize_run(&config, &set, &gaps);
    write_json(out_summary, &summary)?;
    if let Some(path) = out_gaps {
        write_json(path, &gaps)?;
    }
    if let Some(path) = out_corruption {
        write_corruption_csv(path, &set.traces)?;
    }
    let rows: usize = set.traces.iter().map(|t| t.rows.len()).sum();
    println!(
        "run: {} repetitions x horizon {} -> {} trace rows, g(pi) = {:.6}",
        config.repetitions, config.horizon, rows, set.g_pi
    );
    println!(
        "invariants: {}",
        if summary.invariants_passed { "PASS" } else { "FAIL (see summary)" }
    );
    Ok(0)
}

fn cmd_sweep(
    config_path: &Path,
    grid: &[usize],
    out: &Path,
    reps: Option<usize>,
    seed: Option<u64>,
) -> Result<u8, HarnessError> {
    let mut config: RunConfig = read_json(config_path)?;
    if let Some(r) = reps {
        config.repetitions = r;
    }
    if let Some(s) = seed {
        config.base_seed = s;
    }
    let summary = sweep_horizons(&config, grid)?;
    write_json(out, &summary)?;
    for stats in &summary.per_horizon {
        println!(
            "T = {:>8}: mean regret {:.4} (std {:.4}), mean final entropy {:.4}",
            stats.horizon,
            stats.mean_final_regret_expected,
            stats.std_final_regret_expected,
            stats.mean_final_entropy_q,
        );
    }
    println!(
        "slope: {:.4} (rms residual {:.4}), invariants: {}",
        summary.slope.expect("sweep fits a slope"),
        summary.slope_residual_rms.expect("sweep fits a slope"),
        if summary.invariants_passed { "PASS" } else { "FAIL" },
    );
    Ok(0)
}

fn cmd_verify(trace: &Path, gaps_path: &Path) -> Result<u8, HarnessError> {
    let segments = read_traces_csv(trace)?;
    let gaps: GapsFile = read_json(gaps_path)?;
    let report = verify_trace_invariants(&segments, &gaps);
    for check in &report.checks {
        println!("{}", render_check(check));
    }
    Ok(if report.passed { 0 } else { 2 })
}

fn dispatch(cli: Cli) -> Result<u8, HarnessError> {
    match cli.command {
        Command::Design { arms, tol, out } => cmd_design(&arms, tol, &out),
        Command::Run {
            config,
            horizon,
            reps,
            seed,
            out_trace,
            out_summary,
            out_gaps,
            out_corruption,
        } => cmd_run(
            &config,
            horizon,
            reps,
            seed,
            &out_trace,
            &out_summary,
            out_gaps.as_deref(),
            out_corruption.as_deref(),
        ),
        Command::Sweep { config, grid, out, reps, seed } => {
            cmd_sweep(&config, &grid, &out, reps, seed)
        }
        Command::Verify { trace, gaps } => cmd_verify(&trace, &gaps),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {}", err);
            ExitCode::from(exit_code_for(&err))
        }
    }
}
