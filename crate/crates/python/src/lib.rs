//! Python bindings. Configs use the same TOML schema as `vgl-lab run`;
//! vectors cross the boundary as lists of floats.

use nalgebra::DVector;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use vgl_lab::approximator::Weights;
use vgl_lab::cli::config::RunConfig;
use vgl_lab::cli::verify::{run_check, VerifyOptions, CHECKS};
use vgl_lab::error::VglError;
use vgl_lab::learners::{train as train_rs, StopReason};
use vgl_lab::model::EnvSpec;
use vgl_lab::policy::GreedyPolicy;
use vgl_lab::targets::{rollout, Trajectory};

fn err(e: VglError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn vector(v: Vec<f64>, expected: usize, what: &'static str) -> PyResult<DVector<f64>> {
    if v.len() != expected {
        return Err(err(VglError::DimensionMismatch { what, expected, got: v.len() }));
    }
    Ok(DVector::from_vec(v))
}

fn list(v: &DVector<f64>) -> Vec<f64> {
    v.iter().copied().collect()
}

fn parse_config(config: &str) -> PyResult<RunConfig> {
    RunConfig::from_toml_str(config).map_err(err)
}

fn stop_name(stop: &StopReason) -> String {
    match stop {
        StopReason::Completed => "completed".into(),
        StopReason::Converged => "converged".into(),
        StopReason::Diverged => "diverged".into(),
        StopReason::Failed(msg) => format!("failed: {msg}"),
    }
}

fn trajectory_dict<'py>(py: Python<'py>, traj: &Trajectory, gamma: f64) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("states", traj.states.iter().map(list).collect::<Vec<_>>())?;
    d.set_item("actions", traj.actions.iter().map(list).collect::<Vec<_>>())?;
    d.set_item("rewards", traj.rewards.clone())?;
    d.set_item("saturated", traj.saturated.clone())?;
    d.set_item("total_reward", traj.total_reward(gamma))?;
    Ok(d)
}

/// One of the built-in environments, by name.
#[pyclass(name = "Env", frozen)]
struct PyEnv {
    spec: EnvSpec,
}

#[pymethods]
impl PyEnv {
    #[new]
    fn new(name: &str) -> PyResult<Self> {
        let spec = EnvSpec::by_name(name).map_err(err)?;
        spec.build().map_err(err)?;
        Ok(Self { spec })
    }

    #[staticmethod]
    fn names() -> Vec<&'static str> {
        EnvSpec::NAMES.to_vec()
    }

    #[getter]
    fn name(&self) -> &'static str {
        self.spec.name()
    }

    #[getter]
    fn state_dim(&self) -> PyResult<usize> {
        Ok(self.spec.build().map_err(err)?.state_dim())
    }

    #[getter]
    fn action_dim(&self) -> PyResult<usize> {
        Ok(self.spec.build().map_err(err)?.action_dim())
    }

    #[getter]
    fn horizon(&self) -> PyResult<usize> {
        Ok(self.spec.build().map_err(err)?.horizon())
    }

    fn default_start(&self) -> PyResult<Vec<f64>> {
        Ok(list(&self.spec.build().map_err(err)?.default_start()))
    }

    /// `(next_state, reward)`.
    fn step(&self, x: Vec<f64>, a: Vec<f64>) -> PyResult<(Vec<f64>, f64)> {
        let env = self.spec.build().map_err(err)?;
        let x = vector(x, env.state_dim(), "state")?;
        let a = vector(a, env.action_dim(), "action")?;
        let (y, r) = env.step(&x, &a).map_err(err)?;
        Ok((list(&y), r))
    }

    fn __repr__(&self) -> String {
        format!("Env('{}')", self.spec.name())
    }
}

/// Greedy policy over a value approximator, with its own weights.
#[pyclass(name = "Policy")]
struct PyPolicy {
    policy: GreedyPolicy,
    weights: Weights,
}

#[pymethods]
impl PyPolicy {
    /// `config` is run-config TOML; the env, approximator, gamma, seed and
    /// tolerances sections are used.
    #[new]
    #[pyo3(signature = (config = ""))]
    fn new(config: &str) -> PyResult<Self> {
        let cfg = parse_config(config)?;
        let env = cfg.env.build().map_err(err)?;
        let approx = vgl_lab::approximator::Approximator::new(&cfg.approximator, env.as_ref()).map_err(err)?;
        let weights = approx.init_weights(cfg.learner.seed);
        let policy = GreedyPolicy::new(env, approx, cfg.learner.gamma, cfg.tolerances).map_err(err)?;
        Ok(Self { policy, weights })
    }

    #[getter]
    fn dim(&self) -> usize {
        self.policy.approx().dim()
    }

    #[getter]
    fn gamma(&self) -> f64 {
        self.policy.gamma()
    }

    #[getter]
    fn get_weights(&self) -> Vec<f64> {
        list(&self.weights)
    }

    #[setter]
    fn set_weights(&mut self, w: Vec<f64>) -> PyResult<()> {
        self.weights = vector(w, self.policy.approx().dim(), "weights")?;
        Ok(())
    }

    fn value(&self, x: Vec<f64>) -> PyResult<f64> {
        let x = vector(x, self.policy.env().state_dim(), "state")?;
        self.policy.value_at(&x, &self.weights).map_err(err)
    }

    fn gradient(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        let x = vector(x, self.policy.env().state_dim(), "state")?;
        Ok(list(&self.policy.gradient_at(&x, &self.weights).map_err(err)?))
    }

    /// Maximizer of Q over the action box, with Q and its action
    /// derivatives there.
    fn greedy_action<'py>(&self, py: Python<'py>, x: Vec<f64>) -> PyResult<Bound<'py, PyDict>> {
        let x = vector(x, self.policy.env().state_dim(), "state")?;
        let g = self.policy.greedy_action(&x, &self.weights).map_err(err)?;
        let d = PyDict::new(py);
        d.set_item("action", list(&g.action))?;
        d.set_item("saturated", g.saturated.clone())?;
        d.set_item("q", g.q)?;
        d.set_item("dq_da", list(&g.dq_da))?;
        let rows: Vec<Vec<f64>> = g.d2q_da2.row_iter().map(|r| r.iter().copied().collect()).collect();
        d.set_item("d2q_da2", rows)?;
        Ok(d)
    }

    /// Greedy episode from `x0`, or from the environment's default start.
    #[pyo3(signature = (x0 = None))]
    fn rollout<'py>(&self, py: Python<'py>, x0: Option<Vec<f64>>) -> PyResult<Bound<'py, PyDict>> {
        let env = self.policy.env();
        let x0 = match x0 {
            Some(v) => vector(v, env.state_dim(), "state")?,
            None => env.default_start(),
        };
        let traj = rollout(&self.policy, &x0, &self.weights).map_err(err)?;
        trajectory_dict(py, &traj, self.policy.gamma())
    }
}

/// Trains with a run config and returns the log, final weights and stop
/// reason. Nothing is written to disk.
#[pyfunction]
#[pyo3(signature = (config = ""))]
fn train<'py>(py: Python<'py>, config: &str) -> PyResult<Bound<'py, PyDict>> {
    let cfg = parse_config(config)?;
    let env = cfg.env.build().map_err(err)?;
    let approx = vgl_lab::approximator::Approximator::new(&cfg.approximator, env.as_ref()).map_err(err)?;
    let out = py
        .detach(|| train_rs(&cfg.learner, env, &approx, cfg.tolerances, None))
        .map_err(err)?;
    let log = PyDict::new(py);
    log.set_item("iteration", out.log.iter().map(|r| r.iteration).collect::<Vec<_>>())?;
    log.set_item("total_reward", out.log.iter().map(|r| r.total_reward).collect::<Vec<_>>())?;
    log.set_item("value_residual_norm", out.log.iter().map(|r| r.value_residual_norm).collect::<Vec<_>>())?;
    log.set_item("gradient_residual_norm", out.log.iter().map(|r| r.gradient_residual_norm).collect::<Vec<_>>())?;
    log.set_item("max_drda", out.log.iter().map(|r| r.max_drda).collect::<Vec<_>>())?;
    log.set_item("saturated_fraction", out.log.iter().map(|r| r.saturated_fraction).collect::<Vec<_>>())?;
    let d = PyDict::new(py);
    d.set_item("log", log)?;
    d.set_item("weights", list(&out.weights))?;
    d.set_item("stop", stop_name(&out.stop))?;
    match &out.final_trajectory {
        Some(t) => d.set_item("trajectory", trajectory_dict(py, t, cfg.learner.gamma)?)?,
        None => d.set_item("trajectory", py.None())?,
    }
    Ok(d)
}

/// Runs one of the command-line property checks.
#[pyfunction]
#[pyo3(signature = (check, seed = 0, env = None, tol = None))]
fn verify<'py>(
    py: Python<'py>,
    check: &str,
    seed: u64,
    env: Option<String>,
    tol: Option<f64>,
) -> PyResult<Bound<'py, PyDict>> {
    let opts = VerifyOptions { env, seed, tol };
    let report = py.detach(|| run_check(check, &opts)).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("check", &report.check)?;
    d.set_item("instances", report.instances)?;
    d.set_item("max_error", report.max_error)?;
    d.set_item("tolerance", report.tolerance)?;
    d.set_item("pass", report.pass)?;
    d.set_item("summary", report.summary_line())?;
    Ok(d)
}

#[pymodule]
fn vgl_lab_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyEnv>()?;
    m.add_class::<PyPolicy>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    m.add("CHECKS", CHECKS.to_vec())?;
    Ok(())
}
