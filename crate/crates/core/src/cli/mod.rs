//! Command-line front end: `run`, `verify` and `plot`.
//!
//! Exit codes: 0 on success or a passing check, 1 on usage, config or
//! environment errors, 2 on divergence or a failing check.

pub mod config;
pub mod plot;
pub mod run;
pub mod verify;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use rayon::prelude::*;

use crate::error::{Result, VglError};
use config::RunConfig;
use run::RunSummary;
use verify::{run_check, VerifyOptions};

pub const THREADS_ENV: &str = "VGL_LAB_THREADS";

#[derive(Debug, Parser)]
#[command(name = "vgl-lab", version, about = "Value-gradient learning experiments and property checks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train from a TOML config and write logs, weights and plots.
    Run {
        config: PathBuf,
        /// Overrides learner.seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides output.dir.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Expand the [sweep] section and run each combination in its own
        /// subdirectory, in parallel (capped by VGL_LAB_THREADS).
        #[arg(long)]
        sweep: bool,
    },
    /// Run a named property check and report the worst error.
    Verify {
        /// One of lambda-return, pgl-equivalence, extremality, bangbang,
        /// batch-online, lemma4, gradcheck.
        check: String,
        #[arg(long)]
        env: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Overrides the check's default tolerance.
        #[arg(long)]
        tol: Option<f64>,
        /// Where to write the JSON report; defaults to verify-<check>.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Regenerate the SVG plots of a run directory.
    Plot { dir: PathBuf },
}

/// Parses `args` (including the program name) and runs the command.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(command: Command) -> Result<i32> {
    match command {
        Command::Run { config, seed, out, sweep } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.learner.seed = s;
            }
            if let Some(dir) = out {
                cfg.output.dir = dir;
            }
            if sweep {
                run_sweep(&cfg)
            } else {
                let summary = run::execute(&cfg)?;
                print_summary("run", &summary);
                Ok(summary.exit_code())
            }
        }
        Command::Verify { check, env, seed, tol, out } => {
            let report = run_check(&check, &VerifyOptions { env, seed, tol })?;
            for row in report.rows.iter().filter(|r| !(r.error <= report.tolerance)) {
                println!("  {}: {:.3e}", row.label, row.error);
            }
            println!("{}", report.summary_line());
            let path = out.unwrap_or_else(|| PathBuf::from(format!("verify-{check}.json")));
            std::fs::write(&path, serde_json::to_string_pretty(&report)?)?;
            Ok(if report.pass { 0 } else { 2 })
        }
        Command::Plot { dir } => {
            for path in plot::render_dir(&dir)? {
                println!("wrote {}", path.display());
            }
            Ok(0)
        }
    }
}

fn print_summary(name: &str, s: &RunSummary) {
    println!(
        "{name}: {:?} after {} updates, total reward {:.10}, gradient residual {:.3e}, output {}",
        s.stop,
        s.iterations,
        s.final_reward,
        s.final_residual,
        s.dir.display()
    );
}

fn sweep_threads() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(VglError::Config(format!("{THREADS_ENV} must be a positive integer, got '{v}'"))),
        },
        Err(_) => Ok(None),
    }
}

/// Runs every sweep combination; the exit code is the worst of the runs.
fn run_sweep(cfg: &RunConfig) -> Result<i32> {
    if cfg.sweep.is_none() {
        return Err(VglError::Config("--sweep needs a [sweep] section".into()));
    }
    let runs = cfg.expand_sweep();
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = sweep_threads()? {
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| VglError::Config(e.to_string()))?;
    let results: Vec<(String, Result<RunSummary>)> =
        pool.install(|| runs.par_iter().map(|(name, c)| (name.clone(), run::execute(c))).collect());
    let mut code = 0;
    for (name, res) in results {
        match res {
            Ok(s) => {
                print_summary(&name, &s);
                code = code.max(s.exit_code());
            }
            Err(e) => {
                eprintln!("{name}: error: {e}");
                code = code.max(1);
            }
        }
    }
    Ok(code)
}
