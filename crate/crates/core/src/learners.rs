//! Weight updates: value learning on target values, value-gradient
//! learning in batch and online (eligibility trace) form, and policy
//! gradient ascent through the greedy policy. Updates are returned, never
//! applied; `train` owns the iteration loop.

use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::approximator::{Approximator, Weights};
use crate::error::{Result, VglError};
use crate::model::{check_dim, Environment, ModelJacobians, State};
use crate::policy::{condition_number, GreedyActionResult, GreedyPolicy};
use crate::targets::{
    check_lambda, reward_derivatives, rollout, target_gradients_with, target_values_from,
    trajectory_gradients, trajectory_values, Trajectory,
};
use crate::tolerances::Tolerances;

/// Per-step weighting of the gradient residual.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OmegaSpec {
    #[default]
    Identity,
    Diagonal {
        d: Vec<f64>,
    },
    /// The choice under which the full-return update is exactly policy
    /// gradient ascent.
    Pgl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Vl,
    #[default]
    VglBatch,
    VglOnline,
    Bptt,
}

/// Where each training episode starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StartSampler {
    /// A single start; the environment default when `state` is omitted.
    Fixed {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        state: Option<Vec<f64>>,
    },
    /// Uniform over a box in the physical state components (everything
    /// except the step counter, which starts at zero).
    UniformBox { low: Vec<f64>, high: Vec<f64> },
}

impl Default for StartSampler {
    fn default() -> Self {
        StartSampler::Fixed { state: None }
    }
}

impl StartSampler {
    pub fn validate(&self, env: &dyn Environment) -> Result<()> {
        let physical = env.state_dim() - 1;
        match self {
            StartSampler::Fixed { state: Some(s) } => {
                check_dim("fixed start state", env.state_dim(), s.len())?;
                if env.is_terminal(&DVector::from_column_slice(s)) {
                    return Err(VglError::Config("fixed start state is terminal".into()));
                }
            }
            StartSampler::Fixed { state: None } => {}
            StartSampler::UniformBox { low, high } => {
                check_dim("sampler low", physical, low.len())?;
                check_dim("sampler high", physical, high.len())?;
                if low.iter().zip(high).any(|(l, h)| !(l <= h)) {
                    return Err(VglError::Config("sampler box needs low <= high".into()));
                }
            }
        }
        Ok(())
    }

    pub fn sample(&self, env: &dyn Environment, rng: &mut ChaCha8Rng) -> State {
        match self {
            StartSampler::Fixed { state: Some(s) } => DVector::from_column_slice(s),
            StartSampler::Fixed { state: None } => env.default_start(),
            StartSampler::UniformBox { low, high } => {
                let ti = env.time_index();
                let mut x = DVector::zeros(env.state_dim());
                let mut k = 0;
                for i in 0..env.state_dim() {
                    if i != ti {
                        x[i] = if low[k] == high[k] {
                            low[k]
                        } else {
                            rng.random_range(low[k]..high[k])
                        };
                        k += 1;
                    }
                }
                x
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearnerConfig {
    pub algorithm: Algorithm,
    pub lambda: f64,
    pub gamma: f64,
    /// Step size. For bptt with the default MLP on lqr1d and nav2d-unbound,
    /// steps up to the default 1e-3 give a non-decreasing return at every
    /// update; from about 3e-3 the first updates can overshoot.
    pub alpha: f64,
    pub omega: OmegaSpec,
    pub iterations: usize,
    pub sampler: StartSampler,
    pub seed: u64,
    /// Online learner only: apply each step's increment immediately.
    pub true_online: bool,
    /// Stop early once the gradient residual norm falls below this.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stop_residual: Option<f64>,
    /// Record elapsed milliseconds in the run log; off by default so logs
    /// are byte-reproducible.
    pub log_wall_time: bool,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::VglBatch,
            lambda: 1.0,
            gamma: 1.0,
            alpha: 1e-3,
            omega: OmegaSpec::Identity,
            iterations: 1000,
            sampler: StartSampler::default(),
            seed: 0,
            true_online: false,
            stop_residual: None,
            log_wall_time: false,
        }
    }
}

impl LearnerConfig {
    pub fn validate(&self, env: &dyn Environment) -> Result<()> {
        check_lambda(self.lambda)?;
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(VglError::Config(format!("learner.gamma must lie in [0, 1], got {}", self.gamma)));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(VglError::Config(format!("learner.alpha must be >= 0, got {}", self.alpha)));
        }
        if let OmegaSpec::Diagonal { d } = &self.omega {
            check_dim("omega diagonal", env.state_dim(), d.len())?;
            if d.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
                return Err(VglError::Config("omega diagonal entries must be > 0".into()));
            }
        }
        if let Some(r) = self.stop_residual {
            if !(r > 0.0) {
                return Err(VglError::Config("learner.stop_residual must be > 0".into()));
            }
        }
        self.sampler.validate(env)
    }
}

#[derive(Debug, Clone)]
pub struct UpdateReport {
    pub delta_w: Weights,
    /// `V'_t - V_t` for `t < F`; filled by the value learner.
    pub value_residuals: Vec<f64>,
    /// `G'_t - G_t` for `t < F`; filled by the batch gradient learner.
    pub gradient_residuals: Vec<DVector<f64>>,
    pub total_reward: f64,
    pub saturated_components: usize,
    /// Largest action-Hessian condition number met while building a pgl
    /// omega; 1 for the fixed kinds.
    pub omega_condition_max: f64,
}

impl UpdateReport {
    fn new(dim: usize, traj_reward: f64, saturated: usize) -> Self {
        Self {
            delta_w: DVector::zeros(dim),
            value_residuals: Vec::new(),
            gradient_residuals: Vec::new(),
            total_reward: traj_reward,
            saturated_components: saturated,
            omega_condition_max: 1.0,
        }
    }
}

// ---- omega ---------------------------------------------------------------

/// `-(df/da)^T (d2Q/da2)^{-1} (df/da)` at one greedy step.
pub fn pgl_matrix(
    policy: &GreedyPolicy,
    greedy: &GreedyActionResult,
    df_da: &DMatrix<f64>,
    step: usize,
) -> Result<(DMatrix<f64>, f64)> {
    if greedy.any_saturated() {
        return Err(VglError::OmegaSaturated { step });
    }
    let cond = condition_number(&greedy.d2q_da2);
    if !(cond <= policy.tolerances().singular_condition) {
        return Err(VglError::OmegaSingular { step, condition: cond });
    }
    let inv = greedy
        .d2q_da2
        .clone()
        .try_inverse()
        .ok_or(VglError::OmegaSingular { step, condition: cond })?;
    let m = -(df_da.transpose() * inv * df_da);
    Ok(((&m + m.transpose()) * 0.5, cond))
}

/// Omega at step `t` given the previous step's solver output and model
/// Jacobians. For pgl the matrix weighting the residual at `t` is built at
/// `t - 1` and scaled by `gamma^(t+1)`; it vanishes at `t = 0`.
fn omega_at(
    spec: &OmegaSpec,
    policy: &GreedyPolicy,
    t: usize,
    prev: Option<(&GreedyActionResult, &ModelJacobians)>,
) -> Result<(DMatrix<f64>, f64)> {
    let n = policy.env().state_dim();
    match spec {
        OmegaSpec::Identity => Ok((DMatrix::identity(n, n), 1.0)),
        OmegaSpec::Diagonal { d } => {
            check_dim("omega diagonal", n, d.len())?;
            Ok((DMatrix::from_diagonal(&DVector::from_column_slice(d)), 1.0))
        }
        OmegaSpec::Pgl => {
            if t == 0 {
                return Ok((DMatrix::zeros(n, n), 1.0));
            }
            let (greedy, jac) = prev.ok_or_else(|| {
                VglError::Usage("pgl omega needs the greedy solution of the previous step".into())
            })?;
            let (m, cond) = pgl_matrix(policy, greedy, &jac.df_da, t - 1)?;
            Ok((m * policy.gamma().powi(t as i32 + 1), cond))
        }
    }
}

/// The n x n matrix weighting the gradient residual at step `t`.
pub fn make_omega(
    spec: &OmegaSpec,
    policy: &GreedyPolicy,
    traj: &Trajectory,
    t: usize,
) -> Result<DMatrix<f64>> {
    let prev = if t == 0 {
        None
    } else {
        let g = traj.greedy[t - 1].as_ref().ok_or_else(|| {
            VglError::Usage("pgl omega needs a greedy trajectory, not a replay".into())
        })?;
        Some((g, &traj.jacobians[t - 1]))
    };
    Ok(omega_at(spec, policy, t, prev)?.0)
}

// ---- updates -------------------------------------------------------------

/// `alpha sum_t dV/dw_t (V'_t - V_t)`.
pub fn vl_update(
    policy: &GreedyPolicy,
    traj: &Trajectory,
    w: &Weights,
    lambda: f64,
    alpha: f64,
) -> Result<UpdateReport> {
    let values = trajectory_values(policy, traj, w)?;
    let vt = target_values_from(&traj.rewards, &values, lambda, policy.gamma())?;
    let mut report = UpdateReport::new(w.len(), traj.total_reward(policy.gamma()), traj.saturated_count());
    for t in 0..traj.horizon() {
        let res = vt[t] - values[t];
        report.value_residuals.push(res);
        if res != 0.0 {
            report.delta_w += policy.approx().weight_gradient(&traj.states[t], w)? * res;
        }
    }
    report.delta_w *= alpha;
    Ok(report)
}

/// Batch value-gradient update
/// `alpha sum_{t<F} (dG/dw)_t Omega_t (G'_t - G_t)`, built from
/// Jacobian-vector products only.
pub fn vgl_batch_update(
    policy: &GreedyPolicy,
    traj: &Trajectory,
    w: &Weights,
    lambda: f64,
    alpha: f64,
    omega: &OmegaSpec,
) -> Result<UpdateReport> {
    check_lambda(lambda)?;
    let grads = trajectory_gradients(policy, traj, w)?;
    let gt = target_gradients_with(policy, traj, w, lambda, &grads)?;
    vgl_batch_with_targets(policy, traj, w, alpha, omega, &grads, &gt)
}

fn vgl_batch_with_targets(
    policy: &GreedyPolicy,
    traj: &Trajectory,
    w: &Weights,
    alpha: f64,
    omega: &OmegaSpec,
    grads: &[DVector<f64>],
    gt: &[DVector<f64>],
) -> Result<UpdateReport> {
    let mut report = UpdateReport::new(w.len(), traj.total_reward(policy.gamma()), traj.saturated_count());
    for t in 0..traj.horizon() {
        let res = &gt[t] - &grads[t];
        let prev = match t {
            0 => None,
            _ => traj.greedy[t - 1].as_ref().map(|g| (g, &traj.jacobians[t - 1])),
        };
        let weighted = match omega {
            OmegaSpec::Identity => None,
            _ => {
                let (om, cond) = omega_at(omega, policy, t, prev)?;
                report.omega_condition_max = report.omega_condition_max.max(cond);
                Some(om * &res)
            }
        };
        let dir = weighted.as_ref().unwrap_or(&res);
        if dir.iter().any(|&v| v != 0.0) {
            report.delta_w += policy.gradient_jvp_at(&traj.states[t], w, dir)?;
        }
        report.gradient_residuals.push(res);
    }
    report.delta_w *= alpha;
    Ok(report)
}

/// Eligibility trace for the online gradient learner, `dim(w) x n`.
#[derive(Debug, Clone)]
pub struct EligibilityTrace {
    pub e: DMatrix<f64>,
}

impl EligibilityTrace {
    pub fn new(dim_w: usize, n: usize) -> Self {
        Self {
            e: DMatrix::zeros(dim_w, n),
        }
    }

    /// `E += (dG/dw)_t Omega_t`, one Jacobian-vector product per column.
    pub fn accumulate(&mut self, policy: &GreedyPolicy, x: &State, w: &Weights, omega: &DMatrix<f64>) -> Result<()> {
        for j in 0..omega.ncols() {
            let col = omega.column(j).clone_owned();
            if col.iter().any(|&v| v != 0.0) {
                let jvp = policy.gradient_jvp_at(x, w, &col)?;
                let mut target = self.e.column_mut(j);
                target += jvp;
            }
        }
        Ok(())
    }

    /// `E <- lambda gamma E Df/Dx`.
    pub fn decay(&mut self, factor: f64, df: &DMatrix<f64>) {
        self.e = &self.e * df * factor;
    }
}

/// Online value-gradient update from `x0`. With `true_online`, each step's
/// increment is applied before the next greedy action is chosen and the
/// returned `delta_w` is the net change.
pub fn vgl_online_update(
    policy: &GreedyPolicy,
    x0: &State,
    w: &Weights,
    lambda: f64,
    alpha: f64,
    omega: &OmegaSpec,
    true_online: bool,
) -> Result<UpdateReport> {
    check_lambda(lambda)?;
    let env = policy.env();
    check_dim("state", env.state_dim(), x0.len())?;
    if env.is_terminal(x0) {
        return Err(VglError::Usage(format!("online start {:?} is terminal", x0.as_slice())));
    }
    let gamma = policy.gamma();
    let mut w_cur = w.clone();
    let mut report = UpdateReport::new(w.len(), 0.0, 0);
    let mut trace = EligibilityTrace::new(w.len(), env.state_dim());
    let mut rewards = Vec::with_capacity(env.horizon());
    let mut prev: Option<(GreedyActionResult, ModelJacobians)> = None;
    let mut x = x0.clone();
    let mut t = 0;
    while !env.is_terminal(&x) {
        if t >= env.max_horizon() {
            return Err(VglError::EpisodicViolation {
                max_horizon: env.max_horizon(),
            });
        }
        let g = policy.greedy_action(&x, &w_cur)?;
        let (y, r) = env.step(&x, &g.action)?;
        rewards.push(r);
        report.saturated_components += g.saturated.iter().filter(|&&s| s).count();
        let jac = env.jacobians(&x, &g.action);

        let (om, cond) = omega_at(omega, policy, t, prev.as_ref().map(|(g, j)| (g, j)))?;
        report.omega_condition_max = report.omega_condition_max.max(cond);
        trace.accumulate(policy, &x, &w_cur, &om)?;

        let (dr, df) = if lambda == 0.0 {
            (jac.dr_dx.clone(), jac.df_dx.clone())
        } else {
            let pi_x = policy.policy_state_jacobian_with(&x, &g, &y, &jac, &w_cur).map_err(|e| match e {
                VglError::DerivativeUndefined(reason) => VglError::TargetUndefined { step: t, reason },
                other => other,
            })?;
            (&jac.dr_dx + &pi_x * &jac.dr_da, &jac.df_dx + &pi_x * &jac.df_da)
        };
        let mut delta = dr - policy.gradient_at(&x, &w_cur)?;
        if !env.is_terminal(&y) {
            delta += &df * policy.gradient_at(&y, &w_cur)? * gamma;
        }
        let step_dw = &trace.e * delta * alpha;
        if true_online {
            w_cur += &step_dw;
        }
        report.delta_w += step_dw;
        trace.decay(lambda * gamma, &df);

        prev = Some((g, jac));
        x = y;
        t += 1;
    }
    report.total_reward = crate::targets::discounted_sum(&rewards, gamma);
    Ok(report)
}

/// Exact policy-gradient ascent step `alpha dV^pi(x_0)/dw` through the
/// greedy policy, with the value gradient from the full-return targets.
pub fn bptt_update(policy: &GreedyPolicy, traj: &Trajectory, w: &Weights, alpha: f64) -> Result<UpdateReport> {
    let gamma = policy.gamma();
    let env = policy.env();
    for (t, sat) in traj.saturated.iter().enumerate() {
        if sat.iter().any(|&s| s) {
            return Err(VglError::UnsupportedSaturation { step: t });
        }
    }
    let grads = trajectory_gradients(policy, traj, w)?;
    let gt = target_gradients_with(policy, traj, w, 1.0, &grads).map_err(|e| match e {
        VglError::TargetUndefined { step, reason } => VglError::GradientUndefined { step, reason },
        other => other,
    })?;
    let mut report = UpdateReport::new(w.len(), traj.total_reward(gamma), 0);
    for t in 0..traj.horizon() {
        let greedy = traj.greedy[t]
            .as_ref()
            .ok_or_else(|| VglError::Usage("bptt needs a greedy trajectory, not a replay".into()))?;
        let (_, inv) = policy.restricted_hessian_inverse(greedy).map_err(|e| match e {
            VglError::DerivativeUndefined(reason) => VglError::GradientUndefined { step: t, reason },
            other => other,
        })?;
        let jac = &traj.jacobians[t];
        // dpi/dw u = -gamma (dG/dw)(x_{t+1}) (df/da)^T (d2Q/da2)^{-1} u
        let u = &jac.dr_da + &jac.df_da * &gt[t + 1] * gamma;
        let dir = jac.df_da.transpose() * (inv * u);
        let scale = -gamma.powi(t as i32 + 1);
        if !env.is_terminal(&traj.states[t + 1]) {
            report.delta_w += policy.gradient_jvp_at(&traj.states[t + 1], w, &dir)? * scale;
        }
    }
    report.delta_w *= alpha;
    Ok(report)
}

/// One update of the configured algorithm on a trajectory rolled out under
/// `w`. The online learner re-rolls from the trajectory's start.
pub fn update(policy: &GreedyPolicy, traj: &Trajectory, w: &Weights, cfg: &LearnerConfig) -> Result<UpdateReport> {
    match cfg.algorithm {
        Algorithm::Vl => vl_update(policy, traj, w, cfg.lambda, cfg.alpha),
        Algorithm::VglBatch => vgl_batch_update(policy, traj, w, cfg.lambda, cfg.alpha, &cfg.omega),
        Algorithm::VglOnline => vgl_online_update(
            policy,
            &traj.states[0],
            w,
            cfg.lambda,
            cfg.alpha,
            &cfg.omega,
            cfg.true_online,
        ),
        Algorithm::Bptt => bptt_update(policy, traj, w, cfg.alpha),
    }
}

// ---- training loop -------------------------------------------------------

/// One row of the run log, describing the weights at that iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    pub total_reward: f64,
    pub value_residual_norm: f64,
    pub gradient_residual_norm: f64,
    #[serde(rename = "max_dRda")]
    pub max_drda: f64,
    pub saturated_fraction: f64,
    pub wall_time_ms: u64,
}

pub const LOG_HEADER: &str =
    "iteration,total_reward,value_residual_norm,gradient_residual_norm,max_dRda,saturated_fraction,wall_time_ms";

impl LogRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{:e},{:e},{:e},{:e},{:e},{}",
            self.iteration,
            self.total_reward,
            self.value_residual_norm,
            self.gradient_residual_norm,
            self.max_drda,
            self.saturated_fraction,
            self.wall_time_ms
        )
    }
}

/// Largest `|G'_t - G_t|` over `t = 1..F-1`. The start step is excluded:
/// its value gradient never influences the trajectory. A single-step
/// trajectory falls back to `t = 0`.
pub fn gradient_residual_norm(g_target: &[DVector<f64>], grads: &[DVector<f64>]) -> f64 {
    let f = g_target.len().saturating_sub(1);
    let first = if f > 1 { 1 } else { 0 };
    (first..f)
        .map(|t| (&g_target[t] - &grads[t]).norm())
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq)]
pub enum StopReason {
    Completed,
    Converged,
    Diverged,
    Failed(String),
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub weights: Weights,
    pub log: Vec<LogRow>,
    pub stop: StopReason,
    /// Greedy trajectory under the final weights, when it could be built.
    pub final_trajectory: Option<Trajectory>,
}

/// Metrics for one trajectory at the configured lambda, plus the targets
/// the batch learner can reuse.
struct Evaluation {
    row: LogRow,
    grads: Vec<DVector<f64>>,
    g_target: Option<Vec<DVector<f64>>>,
}

fn evaluate(policy: &GreedyPolicy, traj: &Trajectory, w: &Weights, lambda: f64, iteration: usize) -> Result<Evaluation> {
    let gamma = policy.gamma();
    let values = trajectory_values(policy, traj, w)?;
    let vt = target_values_from(&traj.rewards, &values, lambda, gamma)?;
    let value_residual_norm = (0..traj.horizon())
        .map(|t| (vt[t] - values[t]).abs())
        .fold(0.0, f64::max);
    let grads = trajectory_gradients(policy, traj, w)?;
    let g_target = match target_gradients_with(policy, traj, w, lambda, &grads) {
        Ok(g) => Some(g),
        Err(VglError::TargetUndefined { .. }) => None,
        Err(e) => return Err(e),
    };
    let gradient_residual_norm = g_target
        .as_ref()
        .map_or(f64::NAN, |gt| gradient_residual_norm(gt, &grads));
    let derivs = reward_derivatives(traj, gamma);
    let components = traj.horizon() * policy.env().action_dim();
    Ok(Evaluation {
        row: LogRow {
            iteration,
            total_reward: traj.total_reward(gamma),
            value_residual_norm,
            gradient_residual_norm,
            max_drda: derivs.max_unsaturated_action_derivative(traj),
            saturated_fraction: traj.saturated_count() as f64 / components.max(1) as f64,
            wall_time_ms: 0,
        },
        grads,
        g_target,
    })
}

/// Iterated rollout and update. Row `k` of the log describes the weights
/// after `k` updates. Deterministic given the config.
pub fn train(
    cfg: &LearnerConfig,
    env: Arc<dyn Environment>,
    approx: &Approximator,
    tol: Tolerances,
    w0: Option<Weights>,
) -> Result<TrainOutcome> {
    cfg.validate(env.as_ref())?;
    let policy = GreedyPolicy::new(Arc::clone(&env), approx.clone(), cfg.gamma, tol)?;
    let mut w = w0.unwrap_or_else(|| approx.init_weights(cfg.seed));
    check_dim("initial weights", approx.dim(), w.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let clock = Instant::now();
    let mut log = Vec::with_capacity(cfg.iterations + 1);
    let mut final_trajectory = None;

    let mut iteration = 0;
    let stop = loop {
        let x0 = cfg.sampler.sample(env.as_ref(), &mut rng);
        let step = (|| -> Result<(Trajectory, Evaluation)> {
            let traj = rollout(&policy, &x0, &w)?;
            let eval = evaluate(&policy, &traj, &w, cfg.lambda, iteration)?;
            Ok((traj, eval))
        })();
        let (traj, mut eval) = match step {
            Ok(v) => v,
            Err(e) if iteration == 0 => return Err(e),
            Err(e) => break StopReason::Failed(e.to_string()),
        };
        if cfg.log_wall_time {
            eval.row.wall_time_ms = clock.elapsed().as_millis() as u64;
        }
        let residual = eval.row.gradient_residual_norm;
        log.push(eval.row.clone());
        if iteration == cfg.iterations {
            final_trajectory = Some(traj);
            break StopReason::Completed;
        }
        if cfg.stop_residual.is_some_and(|tol| residual < tol) {
            final_trajectory = Some(traj);
            break StopReason::Converged;
        }

        let report = match (cfg.algorithm, &eval.g_target) {
            (Algorithm::VglBatch, Some(gt)) => {
                vgl_batch_with_targets(&policy, &traj, &w, cfg.alpha, &cfg.omega, &eval.grads, gt)
            }
            _ => update(&policy, &traj, &w, cfg),
        };
        let report = match report {
            Ok(r) => r,
            Err(e) if iteration == 0 => return Err(e),
            Err(e) => break StopReason::Failed(e.to_string()),
        };
        w += &report.delta_w;
        iteration += 1;
        if w.iter().any(|v| !v.is_finite()) || w.norm() > tol.divergence_norm {
            break StopReason::Diverged;
        }
    };
    Ok(TrainOutcome {
        weights: w,
        log,
        stop,
        final_trajectory,
    })
}
