use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use driftbench::config::{parse_file, parse_modes, parse_seeds, RunConfig};
use driftbench::error::{CliError, ConfigError};
use driftbench::problem::{format_matrix, load_problem, parse_problem, DEMO_5X4, ZERO_COST_DEMO};
use driftbench::{checks, runner};
use driftbench_core::ascoot::{bcd_solve, BcdOptions};

#[derive(Parser)]
#[command(name = "driftbench", version, about = "Continual test-time adaptation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (seed, mode) pair and write metrics.csv, events.jsonl and summary.json.
    Run {
        /// Flat `section.key = value` config; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated seeds, e.g. 0,1,2.
        #[arg(long)]
        seeds: Option<String>,
        /// Comma-separated modes, e.g. ctta_t,no_adapt,fixed_alpha(0.99).
        #[arg(long)]
        modes: Option<String>,
        /// Worker threads; 0 uses every core.
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Solve a transport problem by block coordinate descent.
    Ascoot {
        /// Problem file; see --demo for the bundled ones.
        problem: Option<PathBuf>,
        /// Bundled problem: zero_cost or 5x4.
        #[arg(long, conflicts_with = "problem")]
        demo: Option<String>,
        #[arg(long, default_value_t = 1.0)]
        lambda1: f64,
        #[arg(long, default_value_t = 0.05)]
        epsilon: f64,
        #[arg(long, default_value_t = BcdOptions::default().tol)]
        tol: f64,
        #[arg(long, default_value_t = BcdOptions::default().max_outer)]
        max_outer: usize,
        /// Directory for pi_s.txt and pi_f.txt.
        #[arg(long, default_value = "ascoot_out")]
        out: PathBuf,
    },
    /// Run the numerical checks and print one PASS/FAIL line each.
    Selftest {
        /// Smaller instance counts.
        #[arg(long)]
        quick: bool,
    },
}

fn flag_error(key: &str, message: String) -> CliError {
    ConfigError::new(key, None, message).into()
}

fn run_cmd(
    config: Option<PathBuf>,
    out: Option<PathBuf>,
    seeds: Option<String>,
    modes: Option<String>,
    jobs: Option<usize>,
) -> Result<(), CliError> {
    let mut cfg = match &config {
        Some(p) => parse_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(o) = out {
        cfg.out_dir = o;
    }
    if let Some(s) = seeds {
        cfg.seeds = parse_seeds(&s).map_err(|m| flag_error("--seeds", m))?;
    }
    if let Some(m) = modes {
        cfg.modes = parse_modes(&m, None).map_err(|m| flag_error("--modes", m))?;
    }
    if let Some(j) = jobs {
        cfg.jobs = j;
    }
    let summary = runner::run_experiment(&cfg)?;
    for (mode, s) in &summary.modes {
        println!("{mode:<20} mean online accuracy {:.4}", s.mean_accuracy);
    }
    println!("wrote {}", cfg.out_dir.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn ascoot_cmd(
    problem: Option<PathBuf>,
    demo: Option<String>,
    lambda1: f64,
    epsilon: f64,
    tol: f64,
    max_outer: usize,
    out: PathBuf,
) -> Result<(), CliError> {
    let prob = match (&problem, demo.as_deref()) {
        (Some(p), _) => load_problem(p, lambda1, epsilon)?,
        (None, name) => {
            let (label, text) = match name.unwrap_or("5x4") {
                "zero_cost" => ("<zero_cost>", ZERO_COST_DEMO),
                "5x4" => ("<5x4>", DEMO_5X4),
                other => return Err(flag_error("--demo", format!("unknown demo {other:?} (expected zero_cost or 5x4)"))),
            };
            parse_problem(text, lambda1, epsilon).map_err(|e| CliError::Parse {
                path: label.into(),
                message: e.to_string(),
            })?
        }
    };
    let opts = BcdOptions {
        tol,
        max_outer,
        ..BcdOptions::default()
    };
    let sol = bcd_solve(&prob, &opts)?;
    let h = &sol.history;
    for (k, j) in h.objectives.iter().enumerate() {
        println!("J_{k} = {j:.12e}");
        if k > 0 && *j > h.objectives[k - 1] + 1e-12 {
            println!("WARNING: objective increased at outer iteration {k}");
        }
    }
    println!("outer iterations: {}", h.outer_iterations());
    println!("sample column residual: {:.3e}", sol.pi_s.marginal_residual);
    println!("feature column residual: {:.3e}", sol.pi_f.marginal_residual);
    if sol.pi_s.pi.rows() * sol.pi_s.pi.cols() <= 64 {
        print!("{}", format_matrix("pi_s", &sol.pi_s.pi));
        print!("{}", format_matrix("pi_f", &sol.pi_f.pi));
    }
    std::fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
    runner::write_atomic(&out, "pi_s.txt", |w| w.write_all(format_matrix("pi_s", &sol.pi_s.pi).as_bytes()))?;
    runner::write_atomic(&out, "pi_f.txt", |w| w.write_all(format_matrix("pi_f", &sol.pi_f.pi).as_bytes()))?;
    if !h.converged {
        return Err(CliError::NotConverged(format!(
            "stopped after {} outer iterations",
            h.outer_iterations()
        )));
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DRIFTBENCH_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            out,
            seeds,
            modes,
            jobs,
        } => run_cmd(config, out, seeds, modes, jobs),
        Command::Ascoot {
            problem,
            demo,
            lambda1,
            epsilon,
            tol,
            max_outer,
            out,
        } => ascoot_cmd(problem, demo, lambda1, epsilon, tol, max_outer, out),
        Command::Selftest { quick } => {
            let outcomes = checks::all(quick);
            for o in &outcomes {
                println!("{}", o.line());
            }
            let failed = outcomes.iter().filter(|o| !o.passed).count();
            println!("{} passed, {failed} failed", outcomes.len() - failed);
            return if failed == 0 { ExitCode::SUCCESS } else { ExitCode::from(1) };
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
