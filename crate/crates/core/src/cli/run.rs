//! The `run` subcommand: train from a config and write the artifacts.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::approximator::{save_weights, weights_to_json, Approximator};
use crate::error::{Result, VglError};
use crate::learners::{train, LogRow, StopReason, LOG_HEADER};

use super::config::RunConfig;
use super::plot;

pub const LOG_FILE: &str = "run_log.csv";
pub const WEIGHTS_FILE: &str = "weights.bin";
pub const WEIGHTS_JSON_FILE: &str = "weights.json";
pub const TRAJECTORY_FILE: &str = "trajectory.csv";
pub const CONFIG_FILE: &str = "config.toml";
pub const LOG_VERSION_LINE: &str = "# vgl-lab log v1";

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub stop: StopReason,
    /// Updates applied.
    pub iterations: usize,
    pub final_reward: f64,
    pub final_residual: f64,
}

impl RunSummary {
    /// 0 when the run finished, 2 on divergence, 1 when a later iteration
    /// hit an error.
    pub fn exit_code(&self) -> i32 {
        match self.stop {
            StopReason::Completed | StopReason::Converged => 0,
            StopReason::Diverged => 2,
            StopReason::Failed(_) => 1,
        }
    }
}

pub fn write_log<W: Write>(rows: &[LogRow], mut out: W) -> Result<()> {
    writeln!(out, "{LOG_VERSION_LINE}")?;
    writeln!(out, "{LOG_HEADER}")?;
    for row in rows {
        writeln!(out, "{}", row.csv_line())?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_log(path: &Path) -> Result<Vec<LogRow>> {
    let bad = |reason: String| VglError::LogFormat {
        path: path.display().to_string(),
        reason,
    };
    let text = std::fs::read_to_string(path)?;
    if text.lines().next() != Some(LOG_VERSION_LINE) {
        return Err(bad(format!("first line must be '{LOG_VERSION_LINE}'")));
    }
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    reader
        .deserialize()
        .collect::<std::result::Result<Vec<LogRow>, _>>()
        .map_err(|e| bad(e.to_string()))
}

/// Trains and writes the config copy, run log, weights (binary and JSON),
/// final trajectory and plots into the output directory. The log is kept
/// even when the run diverges or fails part way.
pub fn execute(cfg: &RunConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let dir = cfg.output.dir.clone();
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join(CONFIG_FILE), cfg.to_toml_string()?)?;

    let env = cfg.env.build()?;
    let approx = Approximator::new(&cfg.approximator, env.as_ref())?;
    let outcome = train(&cfg.learner, env, &approx, cfg.tolerances, None)?;

    write_log(&outcome.log, BufWriter::new(File::create(dir.join(LOG_FILE))?))?;
    save_weights(&outcome.weights, &dir.join(WEIGHTS_FILE))?;
    std::fs::write(dir.join(WEIGHTS_JSON_FILE), weights_to_json(&outcome.weights)?)?;
    if cfg.output.trajectory {
        if let Some(traj) = &outcome.final_trajectory {
            traj.write_csv(BufWriter::new(File::create(dir.join(TRAJECTORY_FILE))?))?;
        }
    }
    if cfg.output.plots {
        plot::render_dir(&dir)?;
    }
    let last = outcome.log.last();
    Ok(RunSummary {
        dir,
        stop: outcome.stop,
        iterations: outcome.log.len().saturating_sub(1),
        final_reward: last.map_or(f64::NAN, |r| r.total_reward),
        final_residual: last.map_or(f64::NAN, |r| r.gradient_residual_norm),
    })
}
