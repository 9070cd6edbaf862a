//! TOML run configuration. Every section and field is optional; missing
//! values take the documented defaults.
//!
//! ```toml
//! [env]
//! name = "lqr1d"
//! action_cost = 0.1
//!
//! [approximator]
//! kind = "quadratic"
//!
//! [learner]
//! algorithm = "vgl_batch"
//! lambda = 1.0
//! alpha = 0.01
//! omega = { kind = "pgl" }
//!
//! [output]
//! dir = "runs/lqr1d"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::approximator::{Approximator, ApproximatorSpec};
use crate::error::{Result, VglError};
use crate::learners::LearnerConfig;
use crate::model::EnvSpec;
use crate::tolerances::Tolerances;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Write SVG plots next to the logs.
    pub plots: bool,
    /// Write the final greedy trajectory as CSV.
    pub trajectory: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/default"),
            plots: true,
            trajectory: true,
        }
    }
}

/// Lists of values to substitute into the learner section. An empty list
/// keeps the base value; the sweep is the Cartesian product.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub seed: Vec<u64>,
    pub lambda: Vec<f64>,
    pub alpha: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub env: EnvSpec,
    pub approximator: ApproximatorSpec,
    pub learner: LearnerConfig,
    pub output: OutputConfig,
    pub tolerances: Tolerances,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
}

impl RunConfig {
    /// Parses and validates. Syntax and schema errors carry the line and
    /// column of the offending field.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| VglError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| match e {
            VglError::Config(msg) => VglError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| VglError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let env = self.env.build()?;
        Approximator::new(&self.approximator, env.as_ref())?;
        self.learner.validate(env.as_ref())?;
        let t = &self.tolerances;
        let positive = [
            ("eps_stat", t.eps_stat),
            ("eps_sat", t.eps_sat),
            ("solver_tol", t.solver_tol),
            ("nsd_tol", t.nsd_tol),
            ("singular_condition", t.singular_condition),
            ("extremality_tol", t.extremality_tol),
            ("divergence_norm", t.divergence_norm),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(VglError::Config(format!("tolerances.{name} must be > 0, got {v}")));
            }
        }
        if t.solver_max_iter == 0 || t.multistart_points == 0 {
            return Err(VglError::Config(
                "tolerances.solver_max_iter and multistart_points must be >= 1".into(),
            ));
        }
        if let Some(s) = &self.sweep {
            for &l in &s.lambda {
                if !(0.0..=1.0).contains(&l) {
                    return Err(VglError::Config(format!("sweep.lambda entry {l} outside [0, 1]")));
                }
            }
            if s.alpha.iter().any(|a| !(*a >= 0.0 && a.is_finite())) {
                return Err(VglError::Config("sweep.alpha entries must be >= 0".into()));
            }
        }
        Ok(())
    }

    /// Expands the sweep into named configs, each writing to its own
    /// subdirectory of the output directory. Without a sweep section the
    /// result is the config itself.
    pub fn expand_sweep(&self) -> Vec<(String, RunConfig)> {
        let Some(s) = &self.sweep else {
            return vec![("run".into(), self.clone())];
        };
        let or_base = |v: &[f64], base: f64| if v.is_empty() { vec![base] } else { v.to_vec() };
        let seeds = if s.seed.is_empty() {
            vec![self.learner.seed]
        } else {
            s.seed.clone()
        };
        let mut out = Vec::new();
        for &lambda in &or_base(&s.lambda, self.learner.lambda) {
            for &alpha in &or_base(&s.alpha, self.learner.alpha) {
                for &seed in &seeds {
                    let mut cfg = self.clone();
                    cfg.sweep = None;
                    cfg.learner.lambda = lambda;
                    cfg.learner.alpha = alpha;
                    cfg.learner.seed = seed;
                    let name = format!("lambda={lambda}_alpha={alpha}_seed={seed}");
                    cfg.output.dir = self.output.dir.join(&name);
                    out.push((name, cfg));
                }
            }
        }
        out
    }
}
