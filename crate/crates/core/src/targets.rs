//! Greedy rollouts and every quantity derived from a cached trajectory:
//! target values, the directly summed lambda-return, target value
//! gradients, the open-loop total reward and its derivatives, and the
//! local-extremality classification.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::approximator::Weights;
use crate::error::{Result, VglError};
use crate::model::{check_dim, Action, Environment, ModelJacobians, State};
use crate::policy::{GreedyActionResult, GreedyPolicy};

/// A cached episode `x_0 .. x_F`.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub states: Vec<State>,
    pub actions: Vec<Action>,
    pub rewards: Vec<f64>,
    pub saturated: Vec<Vec<bool>>,
    pub jacobians: Vec<ModelJacobians>,
    /// Solver output per step; `None` for open-loop replays.
    pub greedy: Vec<Option<GreedyActionResult>>,
}

impl Trajectory {
    /// Number of transitions `F`.
    pub fn horizon(&self) -> usize {
        self.actions.len()
    }

    pub fn is_greedy(&self) -> bool {
        self.greedy.iter().all(Option::is_some)
    }

    /// Discounted sum of the recorded rewards.
    pub fn total_reward(&self, gamma: f64) -> f64 {
        discounted_sum(&self.rewards, gamma)
    }

    /// Follows a fixed action sequence from `x0`. The bounds are enforced.
    pub fn replay(env: &dyn Environment, x0: &State, actions: &[Action]) -> Result<Self> {
        check_dim("state", env.state_dim(), x0.len())?;
        let mut traj = Self::empty(x0.clone(), actions.len());
        let mut x = x0.clone();
        for a in actions {
            let (y, r) = env.step(&x, a)?;
            traj.push(env, &x, a.clone(), r, vec![false; a.len()], None);
            x = y;
            traj.states.push(x.clone());
        }
        if !env.is_terminal(&x) {
            return Err(VglError::EpisodicViolation {
                max_horizon: env.max_horizon(),
            });
        }
        Ok(traj)
    }

    /// Number of saturated action components over the whole trajectory.
    pub fn saturated_count(&self) -> usize {
        self.saturated.iter().flatten().filter(|&&s| s).count()
    }

    fn empty(x0: State, cap: usize) -> Self {
        let mut states = Vec::with_capacity(cap + 1);
        states.push(x0);
        Self {
            states,
            actions: Vec::with_capacity(cap),
            rewards: Vec::with_capacity(cap),
            saturated: Vec::with_capacity(cap),
            jacobians: Vec::with_capacity(cap),
            greedy: Vec::with_capacity(cap),
        }
    }

    fn push(
        &mut self,
        env: &dyn Environment,
        x: &State,
        a: Action,
        r: f64,
        saturated: Vec<bool>,
        greedy: Option<GreedyActionResult>,
    ) {
        self.jacobians.push(env.jacobians(x, &a));
        self.actions.push(a);
        self.rewards.push(r);
        self.saturated.push(saturated);
        self.greedy.push(greedy);
    }

    /// CSV, one row per state: `t, x.., a.., r, sat..`. The final row has
    /// empty action, reward and saturation cells.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let n = self.states[0].len();
        let m = self.actions.first().map_or(0, |a| a.len());
        writeln!(out, "# vgl-lab log v1")?;
        let mut header = vec!["t".to_string()];
        header.extend((0..n).map(|i| format!("x{i}")));
        header.extend((0..m).map(|i| format!("a{i}")));
        header.push("r".into());
        header.extend((0..m).map(|i| format!("sat{i}")));
        writeln!(out, "{}", header.join(","))?;
        for (t, x) in self.states.iter().enumerate() {
            let mut row = vec![t.to_string()];
            row.extend(x.iter().map(|v| format!("{v:e}")));
            if t < self.horizon() {
                row.extend(self.actions[t].iter().map(|v| format!("{v:e}")));
                row.push(format!("{:e}", self.rewards[t]));
                row.extend(self.saturated[t].iter().map(|&s| (s as u8).to_string()));
            } else {
                row.extend(std::iter::repeat_n(String::new(), 2 * m + 1));
            }
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Rolls out the greedy policy of `w` from `x0` until a terminal state.
pub fn rollout(policy: &GreedyPolicy, x0: &State, w: &Weights) -> Result<Trajectory> {
    let env = policy.env();
    check_dim("state", env.state_dim(), x0.len())?;
    if env.is_terminal(x0) {
        return Err(VglError::Usage(format!(
            "rollout start {:?} is terminal",
            x0.as_slice()
        )));
    }
    let mut traj = Trajectory::empty(x0.clone(), env.horizon());
    let mut x = x0.clone();
    while !env.is_terminal(&x) {
        if traj.horizon() >= env.max_horizon() {
            return Err(VglError::EpisodicViolation {
                max_horizon: env.max_horizon(),
            });
        }
        let g = policy.greedy_action(&x, w)?;
        let (y, r) = env.step(&x, &g.action)?;
        traj.push(env, &x, g.action.clone(), r, g.saturated.clone(), Some(g));
        x = y;
        traj.states.push(x.clone());
    }
    Ok(traj)
}

pub fn discounted_sum(rewards: &[f64], gamma: f64) -> f64 {
    rewards.iter().rev().fold(0.0, |acc, r| r + gamma * acc)
}

pub(crate) fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(VglError::InvalidLambda(lambda));
    }
    Ok(())
}

// ---- values --------------------------------------------------------------

/// `V(x_t)` for `t = 0..=F`, zero at the terminal state.
pub fn trajectory_values(policy: &GreedyPolicy, traj: &Trajectory, w: &Weights) -> Result<Vec<f64>> {
    traj.states.iter().map(|x| policy.value_at(x, w)).collect()
}

/// `G(x_t)` for `t = 0..=F`, zero at the terminal state.
pub fn trajectory_gradients(
    policy: &GreedyPolicy,
    traj: &Trajectory,
    w: &Weights,
) -> Result<Vec<DVector<f64>>> {
    traj.states.iter().map(|x| policy.gradient_at(x, w)).collect()
}

/// Backward recursion `V'_t = r_t + gamma (lambda V'_{t+1} + (1 - lambda) V_{t+1})`
/// over raw sequences; `values` has one more entry than `rewards` and its
/// last entry is ignored (`V'_F = 0`).
pub fn target_values_from(rewards: &[f64], values: &[f64], lambda: f64, gamma: f64) -> Result<Vec<f64>> {
    check_lambda(lambda)?;
    check_dim("values", rewards.len() + 1, values.len())?;
    let f = rewards.len();
    let mut out = vec![0.0; f + 1];
    for t in (0..f).rev() {
        let v_next = if t + 1 == f { 0.0 } else { values[t + 1] };
        out[t] = rewards[t] + gamma * (lambda * out[t + 1] + (1.0 - lambda) * v_next);
    }
    Ok(out)
}

/// Direct mixture of n-step returns truncated at the horizon:
/// `sum_{n<N} (1 - lambda) lambda^{n-1} R^(n) + lambda^{N-1} R^(N)`.
pub fn lambda_return_from(rewards: &[f64], values: &[f64], lambda: f64, gamma: f64) -> Result<Vec<f64>> {
    check_lambda(lambda)?;
    check_dim("values", rewards.len() + 1, values.len())?;
    let f = rewards.len();
    let value = |k: usize| if k >= f { 0.0 } else { values[k] };
    let mut out = Vec::with_capacity(f);
    for t in 0..f {
        let big_n = f - t;
        let mut total = 0.0;
        let mut partial = 0.0;
        for n in 1..=big_n {
            partial += gamma.powi(n as i32 - 1) * rewards[t + n - 1];
            let r_n = partial + gamma.powi(n as i32) * value(t + n);
            let weight = if n < big_n {
                (1.0 - lambda) * lambda.powi(n as i32 - 1)
            } else {
                lambda.powi(n as i32 - 1)
            };
            total += weight * r_n;
        }
        out.push(total);
    }
    Ok(out)
}

/// `V'_0 .. V'_F` for a trajectory, using the policy's discount.
pub fn target_values(policy: &GreedyPolicy, traj: &Trajectory, w: &Weights, lambda: f64) -> Result<Vec<f64>> {
    let values = trajectory_values(policy, traj, w)?;
    target_values_from(&traj.rewards, &values, lambda, policy.gamma())
}

/// `R^lambda_0 .. R^lambda_{F-1}` for a trajectory, by direct summation.
pub fn lambda_return(policy: &GreedyPolicy, traj: &Trajectory, w: &Weights, lambda: f64) -> Result<Vec<f64>> {
    let values = trajectory_values(policy, traj, w)?;
    lambda_return_from(&traj.rewards, &values, lambda, policy.gamma())
}

// ---- value gradients -----------------------------------------------------

/// Total derivatives along the policy at one step:
/// `Dr/Dx = dr/dx + (dpi/dx) dr/da` and `Df/Dx = df/dx + (dpi/dx) df/da`.
#[derive(Debug, Clone)]
pub struct TotalDerivatives {
    pub dr: DVector<f64>,
    pub df: DMatrix<f64>,
}

/// Total derivatives at step `t`. Errors with `TargetUndefined` when the
/// policy is not differentiable there.
pub fn total_derivatives(
    policy: &GreedyPolicy,
    traj: &Trajectory,
    w: &Weights,
    t: usize,
) -> Result<TotalDerivatives> {
    let greedy = traj.greedy[t].as_ref().ok_or_else(|| {
        VglError::Usage("policy derivatives need a greedy trajectory, not a replay".into())
    })?;
    let jac = &traj.jacobians[t];
    let pi_x = policy
        .policy_state_jacobian_with(&traj.states[t], greedy, &traj.states[t + 1], jac, w)
        .map_err(|e| match e {
            VglError::DerivativeUndefined(reason) => VglError::TargetUndefined { step: t, reason },
            other => other,
        })?;
    let mut dr = jac.dr_dx.clone();
    dr.gemv(1.0, &pi_x, &jac.dr_da, 1.0);
    let mut df = jac.df_dx.clone();
    df.gemm(1.0, &pi_x, &jac.df_da, 1.0);
    Ok(TotalDerivatives { dr, df })
}

/// Backward recursion for `G'_0 .. G'_F` with `G'_F = 0`:
/// `G'_t = Dr/Dx + gamma Df/Dx (lambda G'_{t+1} + (1 - lambda) G_{t+1})`.
/// For `lambda = 0` the partial form `dr/dx + gamma df/dx G_{t+1}` is used
/// and the policy Jacobian is never evaluated.
pub fn target_gradients(
    policy: &GreedyPolicy,
    traj: &Trajectory,
    w: &Weights,
    lambda: f64,
) -> Result<Vec<DVector<f64>>> {
    check_lambda(lambda)?;
    let grads = trajectory_gradients(policy, traj, w)?;
    target_gradients_with(policy, traj, w, lambda, &grads)
}

pub(crate) fn target_gradients_with(
    policy: &GreedyPolicy,
    traj: &Trajectory,
    w: &Weights,
    lambda: f64,
    grads: &[DVector<f64>],
) -> Result<Vec<DVector<f64>>> {
    let f = traj.horizon();
    let n = traj.states[0].len();
    let gamma = policy.gamma();
    let mut out = vec![DVector::zeros(n); f + 1];
    // Blend vector lambda G'_{t+1} + (1 - lambda) G_{t+1}; zero past the end.
    let mut p = DVector::zeros(n);
    for t in (0..f).rev() {
        let mut g = if lambda == 0.0 {
            let jac = &traj.jacobians[t];
            let mut g = jac.dr_dx.clone();
            g.gemv(gamma, &jac.df_dx, &p, 1.0);
            g
        } else {
            let d = total_derivatives(policy, traj, w, t)?;
            let mut g = d.dr;
            g.gemv(gamma, &d.df, &p, 1.0);
            g
        };
        p.copy_from(&g);
        p.axpy(1.0 - lambda, &grads[t], lambda);
        std::mem::swap(&mut out[t], &mut g);
    }
    Ok(out)
}

/// Targets for one trajectory.
#[derive(Debug, Clone)]
pub struct TargetBundle {
    pub v_target: Vec<f64>,
    pub g_target: Vec<DVector<f64>>,
    pub lambda: f64,
    pub gamma: f64,
}

pub fn targets(policy: &GreedyPolicy, traj: &Trajectory, w: &Weights, lambda: f64) -> Result<TargetBundle> {
    Ok(TargetBundle {
        v_target: target_values(policy, traj, w, lambda)?,
        g_target: target_gradients(policy, traj, w, lambda)?,
        lambda,
        gamma: policy.gamma(),
    })
}

// ---- total reward --------------------------------------------------------

/// Open-loop total reward of an action sequence. Bounds are not enforced
/// so perturbation oracles may probe just outside the box; the sequence
/// must end exactly at a terminal state.
pub fn total_reward(env: &dyn Environment, x0: &State, actions: &[Action], gamma: f64) -> Result<f64> {
    let mut x = x0.clone();
    let mut rewards = Vec::with_capacity(actions.len());
    for a in actions {
        let (y, r) = env.evaluate(&x, a)?;
        rewards.push(r);
        x = y;
    }
    if !env.is_terminal(&x) {
        return Err(VglError::EpisodicViolation {
            max_horizon: env.max_horizon(),
        });
    }
    Ok(discounted_sum(&rewards, gamma))
}

/// Derivatives of the open-loop total reward along a trajectory.
#[derive(Debug, Clone)]
pub struct RewardDerivatives {
    /// `dR/dx_t` for `t = 0..=F`; the last entry is zero.
    pub dr_dx: Vec<DVector<f64>>,
    /// `dR/da_t` for `t = 0..F`.
    pub dr_da: Vec<DVector<f64>>,
}

impl RewardDerivatives {
    /// Largest `|dR/da|` over components not flagged saturated.
    pub fn max_unsaturated_action_derivative(&self, traj: &Trajectory) -> f64 {
        let mut best = 0.0f64;
        for (d, sat) in self.dr_da.iter().zip(&traj.saturated) {
            for (v, &s) in d.iter().zip(sat) {
                if !s {
                    best = best.max(v.abs());
                }
            }
        }
        best
    }
}

/// Costate recursion with actions held fixed. Entry `t` differentiates
/// the tail sum `sum_{k>=t} gamma^{k-t} r_k`.
pub fn reward_derivatives(traj: &Trajectory, gamma: f64) -> RewardDerivatives {
    let f = traj.horizon();
    let n = traj.states[0].len();
    let mut dr_dx = vec![DVector::zeros(n); f + 1];
    let mut dr_da = Vec::with_capacity(f);
    for t in (0..f).rev() {
        let jac = &traj.jacobians[t];
        dr_da.push(&jac.dr_da + &jac.df_da * &dr_dx[t + 1] * gamma);
        dr_dx[t] = &jac.dr_dx + &jac.df_dx * &dr_dx[t + 1] * gamma;
    }
    dr_da.reverse();
    RewardDerivatives { dr_dx, dr_da }
}

// ---- extremality ---------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ComponentClass {
    Stationary,
    SaturatedHigh,
    SaturatedLow,
    Violation,
}

#[derive(Debug, Clone)]
pub struct ExtremalityReport {
    /// `classes[t][i]` for step `t`, component `i`.
    pub classes: Vec<Vec<ComponentClass>>,
    pub violations: usize,
    pub tol: f64,
}

impl ExtremalityReport {
    pub fn pass(&self) -> bool {
        self.violations == 0
    }

    pub fn count(&self, class: ComponentClass) -> usize {
        self.classes.iter().flatten().filter(|&&c| c == class).count()
    }
}

/// Classifies each action component against the local-extremality
/// conditions: `dR/da = 0`, or pinned at `+1` with `dR/da > 0`, or pinned
/// at `-1` with `dR/da < 0`.
pub fn extremality_check(
    env: &dyn Environment,
    traj: &Trajectory,
    derivs: &RewardDerivatives,
    tol: f64,
) -> ExtremalityReport {
    let bounded = env.bounded();
    let mut violations = 0;
    let classes = traj
        .actions
        .iter()
        .zip(&derivs.dr_da)
        .map(|(a, d)| {
            (0..a.len())
                .map(|i| {
                    let c = if d[i].abs() <= tol {
                        ComponentClass::Stationary
                    } else if bounded[i] && a[i] == 1.0 && d[i] > 0.0 {
                        ComponentClass::SaturatedHigh
                    } else if bounded[i] && a[i] == -1.0 && d[i] < 0.0 {
                        ComponentClass::SaturatedLow
                    } else {
                        ComponentClass::Violation
                    };
                    if c == ComponentClass::Violation {
                        violations += 1;
                    }
                    c
                })
                .collect()
        })
        .collect();
    ExtremalityReport {
        classes,
        violations,
        tol,
    }
}
