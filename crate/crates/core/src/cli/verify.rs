//! Property checks runnable from the command line. Each check builds its
//! own random instances from `--seed` and reports the worst error against
//! a single tolerance.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::approximator::{Approximator, ApproximatorKind, ApproximatorSpec, Weights};
use crate::error::{Result, VglError};
use crate::learners::{
    bptt_update, train, vgl_batch_update, vgl_online_update, Algorithm, LearnerConfig, OmegaSpec,
    StopReason,
};
use crate::model::{EnvSpec, Environment, State};
use crate::policy::GreedyPolicy;
use crate::targets::{
    extremality_check, lambda_return, reward_derivatives, rollout, target_gradients, target_values,
    total_reward, ComponentClass, RewardDerivatives, Trajectory,
};
use crate::tolerances::Tolerances;

pub const CHECKS: [&str; 7] = [
    "lambda-return",
    "pgl-equivalence",
    "extremality",
    "bangbang",
    "batch-online",
    "lemma4",
    "gradcheck",
];

#[derive(Debug, Clone, Serialize)]
pub struct InstanceRow {
    pub label: String,
    pub error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerificationReport {
    pub check: String,
    pub instances: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub rows: Vec<InstanceRow>,
}

impl VerificationReport {
    /// `pass` holds iff the largest error is within tolerance; a NaN error
    /// counts as a failure.
    pub fn new(check: &str, tolerance: f64, rows: Vec<InstanceRow>) -> Self {
        let max_error = rows.iter().map(|r| if r.error.is_nan() { f64::INFINITY } else { r.error }).fold(0.0, f64::max);
        Self {
            check: check.to_string(),
            instances: rows.len(),
            max_error,
            tolerance,
            pass: !rows.is_empty() && max_error <= tolerance,
            rows,
        }
    }

    pub fn summary_line(&self) -> String {
        format!(
            "{} {}: {} instances, max error {:.3e}, tolerance {:.1e}",
            if self.pass { "PASS" } else { "FAIL" },
            self.check,
            self.instances,
            self.max_error,
            self.tolerance
        )
    }
}

#[derive(Debug, Clone, Default)]
pub struct VerifyOptions {
    pub env: Option<String>,
    pub seed: u64,
    pub tol: Option<f64>,
}

pub fn run_check(name: &str, opts: &VerifyOptions) -> Result<VerificationReport> {
    let tol = |default: f64| opts.tol.unwrap_or(default);
    match name {
        "lambda-return" => lambda_return_check(opts, tol(1e-10)),
        "pgl-equivalence" => pgl_equivalence_check(opts, tol(1e-6)),
        "extremality" => extremality_check_run(opts, tol(1e-4)),
        "bangbang" => bangbang_check(opts, tol(0.0)),
        "batch-online" => batch_online_check(opts, tol(1e-12)),
        "lemma4" => lemma4_check(opts, tol(1e-10)),
        "gradcheck" => gradcheck(opts, tol(1e-4)),
        other => Err(VglError::Usage(format!("unknown check '{other}' (expected one of {CHECKS:?})"))),
    }
}

// ---- shared helpers ------------------------------------------------------

fn envs_for(opts: &VerifyOptions, default: &[&str]) -> Result<Vec<EnvSpec>> {
    match &opts.env {
        Some(name) => Ok(vec![EnvSpec::by_name(name)?]),
        None => default.iter().map(|n| EnvSpec::by_name(n)).collect(),
    }
}

fn make_policy(env: &EnvSpec, spec: &ApproximatorSpec, gamma: f64) -> Result<GreedyPolicy> {
    let env = env.build()?;
    let approx = Approximator::new(spec, env.as_ref())?;
    GreedyPolicy::new(env, approx, gamma, Tolerances::default())
}

fn mlp() -> ApproximatorSpec {
    ApproximatorSpec::default()
}

/// Non-terminal state with physical components uniform in `[-r, r]` at a
/// uniformly drawn step.
pub fn random_state(env: &dyn Environment, rng: &mut ChaCha8Rng, r: f64) -> State {
    let physical: Vec<f64> = (0..env.state_dim() - 1).map(|_| rng.random_range(-r..r)).collect();
    let k = rng.random_range(0..env.horizon());
    env.state_at_step(&physical, k)
}

fn random_weights(approx: &Approximator, rng: &mut ChaCha8Rng, scale: f64) -> Weights {
    DVector::from_fn(approx.dim(), |_, _| rng.random_range(-scale..scale))
}

fn rel(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm() / (1.0 + b.norm())
}

fn mat_rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / (1.0 + b.norm())
}

/// Central-difference Jacobian with entry `(i, j) = d out_j / d in_i`.
pub fn central_jacobian(
    x: &DVector<f64>,
    h: f64,
    mut f: impl FnMut(&DVector<f64>) -> Result<DVector<f64>>,
) -> Result<DMatrix<f64>> {
    let mut rows = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp[i] += h;
        let mut xm = x.clone();
        xm[i] -= h;
        rows.push(((f(&xp)? - f(&xm)?) / (2.0 * h)).transpose());
    }
    Ok(DMatrix::from_rows(&rows))
}

fn scalar(v: f64) -> DVector<f64> {
    DVector::from_element(1, v)
}

// ---- checks --------------------------------------------------------------

fn lambda_return_check(opts: &VerifyOptions, tol: f64) -> Result<VerificationReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut rows = Vec::new();
    for env in envs_for(opts, &EnvSpec::NAMES)? {
        let p = make_policy(&env, &mlp(), 1.0)?;
        for i in 0..50 {
            let w = random_weights(p.approx(), &mut rng, 0.2);
            let x0 = random_state(p.env(), &mut rng, 1.5);
            let gamma = if i % 2 == 0 { 1.0 } else { rng.random_range(0.5..1.0) };
            let p = p.with_gamma(gamma)?;
            let traj = rollout(&p, &x0, &w)?;
            let mut err = 0.0f64;
            for lambda in [0.0, 0.3, 0.5, 0.7, 1.0] {
                let a = target_values(&p, &traj, &w, lambda)?;
                let b = lambda_return(&p, &traj, &w, lambda)?;
                err = a.iter().zip(&b).fold(err, |e, (u, v)| e.max((u - v).abs()));
            }
            rows.push(InstanceRow {
                label: format!("{} #{i} gamma={gamma:.3}", env.name()),
                error: err,
            });
        }
    }
    Ok(VerificationReport::new("lambda-return", tol, rows))
}

fn pgl_equivalence_check(opts: &VerifyOptions, tol: f64) -> Result<VerificationReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut rows = Vec::new();
    for env in envs_for(opts, &["lqr1d", "nav2d-unbound"])? {
        let p = make_policy(&env, &mlp(), 1.0)?;
        if p.env().any_bounded() {
            return Err(VglError::Usage(format!("pgl-equivalence needs unbound actions, {} is bounded", env.name())));
        }
        for i in 0..20 {
            let w = random_weights(p.approx(), &mut rng, 0.3);
            let traj = rollout(&p, &p.env().default_start(), &w)?;
            let vgl = vgl_batch_update(&p, &traj, &w, 1.0, 1.0, &OmegaSpec::Pgl)?;
            let bptt = bptt_update(&p, &traj, &w, 1.0)?;
            rows.push(InstanceRow {
                label: format!("{} #{i}", env.name()),
                error: rel(&vgl.delta_w, &bptt.delta_w),
            });
        }
    }
    Ok(VerificationReport::new("pgl-equivalence", tol, rows))
}

/// Training recipe used by the extremality check: an unmasked quadratic
/// from zero weights, identity omega, stopping at residual 1e-6.
pub fn extremality_recipe(lambda: f64, seed: u64) -> (ApproximatorSpec, LearnerConfig) {
    let approx = ApproximatorSpec {
        kind: ApproximatorKind::Quadratic,
        terminal_mask: false,
        init_scale: 0.0,
        ..Default::default()
    };
    let learner = LearnerConfig {
        algorithm: Algorithm::VglBatch,
        lambda,
        alpha: 0.01,
        iterations: 20_000,
        seed,
        stop_residual: Some(1e-6),
        ..Default::default()
    };
    (approx, learner)
}

/// Distance of each action component from the local-extremality
/// conditions: zero when correctly saturated, `|dR/da|` otherwise.
pub fn extremality_distance(env: &dyn Environment, traj: &Trajectory, derivs: &RewardDerivatives, tol: f64) -> f64 {
    let report = extremality_check(env, traj, derivs, tol);
    let mut worst = 0.0f64;
    for (classes, d) in report.classes.iter().zip(&derivs.dr_da) {
        for (c, v) in classes.iter().zip(d.iter()) {
            if !matches!(c, ComponentClass::SaturatedHigh | ComponentClass::SaturatedLow) {
                worst = worst.max(v.abs());
            }
        }
    }
    worst
}

fn extremality_check_run(opts: &VerifyOptions, tol: f64) -> Result<VerificationReport> {
    let env_spec = match &opts.env {
        Some(name) => EnvSpec::by_name(name)?,
        None => EnvSpec::by_name("lqr1d")?,
    };
    let env = env_spec.build()?;
    let mut rows = Vec::new();
    for lambda in [0.0, 1.0] {
        let (aspec, cfg) = extremality_recipe(lambda, opts.seed);
        let approx = Approximator::new(&aspec, env.as_ref())?;
        let out = train(&cfg, Arc::clone(&env), &approx, Tolerances::default(), None)?;
        let last = out.log.last().map(|r| r.gradient_residual_norm).unwrap_or(f64::NAN);
        let (error, note) = match (&out.stop, &out.final_trajectory) {
            (StopReason::Converged, Some(traj)) => {
                let d = reward_derivatives(traj, cfg.gamma);
                (extremality_distance(env.as_ref(), traj, &d, tol), "converged")
            }
            _ => (f64::INFINITY, "not converged"),
        };
        rows.push(InstanceRow {
            label: format!(
                "{} lambda={lambda} {note} after {} updates, residual {last:.3e}",
                env_spec.name(),
                out.log.len() - 1
            ),
            error,
        });
    }
    Ok(VerificationReport::new("extremality", tol, rows))
}

/// Training recipe used by the bang-bang check: mlp, one-step targets,
/// fixed budget.
pub fn bangbang_recipe(seed: u64) -> (ApproximatorSpec, LearnerConfig) {
    let learner = LearnerConfig {
        algorithm: Algorithm::VglBatch,
        lambda: 0.0,
        alpha: 0.003,
        iterations: 20_000,
        seed,
        ..Default::default()
    };
    (ApproximatorSpec::default(), learner)
}

/// Moves each saturated component of `traj` a distance `delta` into the
/// box, one at a time, and returns `(step, component, R_perturbed - R)`.
pub fn interior_perturbations(
    env: &dyn Environment,
    traj: &Trajectory,
    gamma: f64,
    delta: f64,
) -> Result<Vec<(usize, usize, f64)>> {
    let x0 = &traj.states[0];
    let base = total_reward(env, x0, &traj.actions, gamma)?;
    let mut out = Vec::new();
    for (t, sat) in traj.saturated.iter().enumerate() {
        for (i, &s) in sat.iter().enumerate() {
            if s {
                let mut actions = traj.actions.clone();
                actions[t][i] -= delta * actions[t][i].signum();
                out.push((t, i, total_reward(env, x0, &actions, gamma)? - base));
            }
        }
    }
    Ok(out)
}

fn bangbang_check(opts: &VerifyOptions, tol: f64) -> Result<VerificationReport> {
    let env_spec = EnvSpec::by_name(opts.env.as_deref().unwrap_or("bangbang1d"))?;
    let env = env_spec.build()?;
    if !env.any_bounded() {
        return Err(VglError::Usage(format!("bangbang needs bounded actions, {} is unbound", env_spec.name())));
    }
    let (aspec, cfg) = bangbang_recipe(opts.seed);
    let approx = Approximator::new(&aspec, env.as_ref())?;
    let out = train(&cfg, Arc::clone(&env), &approx, Tolerances::default(), None)?;
    let traj = out
        .final_trajectory
        .as_ref()
        .ok_or_else(|| VglError::Usage(format!("training stopped early: {:?}", out.stop)))?;
    let tail = &out.log[out.log.len() * 3 / 4..];
    let settled = tail
        .iter()
        .all(|r| r.total_reward == tail[0].total_reward && r.saturated_fraction == tail[0].saturated_fraction);
    let d = reward_derivatives(traj, cfg.gamma);
    let report = extremality_check(env.as_ref(), traj, &d, Tolerances::default().extremality_tol);
    let last = out.log.last().map_or(f64::NAN, |r| r.gradient_residual_norm);
    let mut rows = vec![
        InstanceRow {
            label: format!("action sequence settled over final quarter (residual {last:.3e})"),
            error: if settled { 0.0 } else { 1.0 },
        },
        InstanceRow {
            label: format!(
                "extremality violations ({} saturated components)",
                report.count(ComponentClass::SaturatedHigh) + report.count(ComponentClass::SaturatedLow)
            ),
            error: report.violations as f64,
        },
    ];
    for (t, i, change) in interior_perturbations(env.as_ref(), traj, cfg.gamma, 1e-3)? {
        rows.push(InstanceRow {
            label: format!("perturb t={t} component {i}: reward change {change:.3e}"),
            error: if change < 0.0 { 0.0 } else { 1.0 },
        });
    }
    Ok(VerificationReport::new("bangbang", tol, rows))
}

fn batch_online_check(opts: &VerifyOptions, tol: f64) -> Result<VerificationReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let names: Vec<&str> = match &opts.env {
        Some(n) => vec![n.as_str()],
        None => EnvSpec::NAMES.to_vec(),
    };
    let mut rows = Vec::new();
    for i in 0..30 {
        let name = names[i % names.len()];
        let env = EnvSpec::by_name(name)?;
        let kind = if rng.random_bool(0.5) {
            ApproximatorKind::Mlp
        } else {
            ApproximatorKind::Quadratic
        };
        let spec = ApproximatorSpec { kind, ..Default::default() };
        let gamma = if rng.random_bool(0.5) { 1.0 } else { rng.random_range(0.6..1.0) };
        let p = make_policy(&env, &spec, gamma)?;
        let w = random_weights(p.approx(), &mut rng, 0.2);
        let x0 = random_state(p.env(), &mut rng, 1.5);
        // Bang-bang's last action never matters, so its policy Jacobian is
        // undefined there and only one-step targets exist.
        let lambda = if name == "bangbang1d" {
            0.0
        } else {
            [0.0, 0.25, 0.5, 0.9, 1.0, rng.random_range(0.0..1.0)][rng.random_range(0..6)]
        };
        let n = p.env().state_dim();
        let omega = match rng.random_range(0..3) {
            0 => OmegaSpec::Identity,
            1 => OmegaSpec::Diagonal {
                d: (0..n).map(|_| rng.random_range(0.1..2.0)).collect(),
            },
            _ if !p.env().any_bounded() => OmegaSpec::Pgl,
            _ => OmegaSpec::Identity,
        };
        let traj = rollout(&p, &x0, &w)?;
        let batch = vgl_batch_update(&p, &traj, &w, lambda, 1.0, &omega)?;
        let online = vgl_online_update(&p, &x0, &w, lambda, 1.0, &omega, false)?;
        rows.push(InstanceRow {
            label: format!("{name} {kind:?} lambda={lambda:.3} gamma={gamma:.3} omega={omega:?}"),
            error: rel(&online.delta_w, &batch.delta_w),
        });
    }
    Ok(VerificationReport::new("batch-online", tol, rows))
}

fn lemma4_check(opts: &VerifyOptions, tol: f64) -> Result<VerificationReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let envs = envs_for(opts, &EnvSpec::NAMES)?;
    let mut rows = Vec::new();
    let mut attempts = 0;
    while rows.len() < 120 && attempts < 2000 {
        attempts += 1;
        let env = &envs[attempts % envs.len()];
        let p = make_policy(env, &mlp(), 1.0)?;
        let w = random_weights(p.approx(), &mut rng, 0.5);
        let x = random_state(p.env(), &mut rng, 2.0);
        let Ok(g) = p.greedy_action(&x, &w) else { continue };
        let pi_x = match p.policy_state_jacobian_at(&x, &g, &w) {
            Ok(j) => j,
            Err(VglError::DerivativeUndefined(_)) => continue,
            Err(e) => return Err(e),
        };
        rows.push(InstanceRow {
            label: format!("{} saturated={:?}", env.name(), g.saturated),
            error: (pi_x * &g.dq_da).norm(),
        });
    }
    Ok(VerificationReport::new("lemma4", tol, rows))
}

/// Finite-difference checks of the model, approximator, policy and target
/// derivatives; relative errors `|analytic - fd| / (1 + |fd|)`.
fn gradcheck(opts: &VerifyOptions, tol: f64) -> Result<VerificationReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let envs = envs_for(opts, &EnvSpec::NAMES)?;
    let h = 1e-5;
    let mut rows = Vec::new();
    for (k, env) in envs.iter().cycle().take(4 * envs.len().max(5)).enumerate() {
        let kind = if k % 2 == 0 {
            ApproximatorKind::Mlp
        } else {
            ApproximatorKind::Quadratic
        };
        let p = make_policy(env, &ApproximatorSpec { kind, ..Default::default() }, 1.0)?;
        let e = p.env();
        let ap = p.approx();
        let w = random_weights(ap, &mut rng, 0.3);
        let x = random_state(e, &mut rng, 1.5);
        let a = DVector::from_fn(e.action_dim(), |_, _| rng.random_range(-0.9..0.9));
        let tag = |what: &str| format!("{} {kind:?} {what}", env.name());

        let jac = e.jacobians(&x, &a);
        let fd_fx = central_jacobian(&x, h, |v| Ok(e.transition(v, &a)))?;
        let fd_fa = central_jacobian(&a, h, |v| Ok(e.transition(&x, v)))?;
        let fd_rx = central_jacobian(&x, h, |v| Ok(scalar(e.reward(v, &a))))?;
        let fd_ra = central_jacobian(&a, h, |v| Ok(scalar(e.reward(&x, v))))?;
        rows.push(InstanceRow { label: tag("df/dx"), error: mat_rel(&jac.df_dx, &fd_fx) });
        rows.push(InstanceRow { label: tag("df/da"), error: mat_rel(&jac.df_da, &fd_fa) });
        rows.push(InstanceRow { label: tag("dr/dx"), error: rel(&jac.dr_dx, &fd_rx.column(0).into_owned()) });
        rows.push(InstanceRow { label: tag("dr/da"), error: rel(&jac.dr_da, &fd_ra.column(0).into_owned()) });

        let g = ap.state_gradient(&x, &w)?;
        let fd_g = central_jacobian(&x, h, |v| Ok(scalar(ap.value(v, &w)?)))?;
        rows.push(InstanceRow { label: tag("dV/dx"), error: rel(&g, &fd_g.column(0).into_owned()) });
        let gw = ap.weight_gradient(&x, &w)?;
        let fd_gw = central_jacobian(&w, h, |v| Ok(scalar(ap.value(&x, v)?)))?;
        rows.push(InstanceRow { label: tag("dV/dw"), error: rel(&gw, &fd_gw.column(0).into_owned()) });
        let hess = ap.state_hessian(&x, &w)?;
        let fd_h = central_jacobian(&x, h, |v| ap.state_gradient(v, &w))?;
        rows.push(InstanceRow { label: tag("d2V/dx2"), error: mat_rel(&hess, &fd_h) });
        let dgdw = ap.full_gradient_weight_jacobian(&x, &w)?;
        let fd_dgdw = central_jacobian(&w, h, |v| ap.state_gradient(&x, v))?;
        rows.push(InstanceRow { label: tag("dG/dw"), error: mat_rel(&dgdw, &fd_dgdw) });

        let qa = p.q_action_gradient(&x, &a, &w)?;
        let fd_qa = central_jacobian(&a, h, |v| Ok(scalar(p.q_value(&x, v, &w)?)))?;
        rows.push(InstanceRow { label: tag("dQ/da"), error: rel(&qa, &fd_qa.column(0).into_owned()) });
        let qaa = p.q_action_hessian(&x, &a, &w)?;
        let fd_qaa = central_jacobian(&a, h, |v| p.q_action_gradient(&x, v, &w))?;
        rows.push(InstanceRow { label: tag("d2Q/da2"), error: mat_rel(&qaa, &fd_qaa) });
        let qxa = p.q_state_action_hessian(&x, &a, &w)?;
        let fd_qxa = central_jacobian(&x, h, |v| p.q_action_gradient(v, &a, &w))?;
        rows.push(InstanceRow { label: tag("d2Q/dxda"), error: mat_rel(&qxa, &fd_qxa) });

        // Policy derivatives on the unbound environments, where the greedy
        // action is smooth in x and w.
        if !e.any_bounded() {
            if let Ok(greedy) = p.greedy_action(&x, &w) {
                if let (Ok(pi_x), Ok(pi_w)) = (
                    p.policy_state_jacobian_at(&x, &greedy, &w),
                    p.policy_weight_jacobian_at(&x, &greedy, &w),
                ) {
                    let fd_x = central_jacobian(&x, h, |v| Ok(p.greedy_action(v, &w)?.action))?;
                    let fd_w = central_jacobian(&w, h, |v| Ok(p.greedy_action(&x, v)?.action))?;
                    rows.push(InstanceRow { label: tag("dpi/dx"), error: mat_rel(&pi_x, &fd_x) });
                    rows.push(InstanceRow { label: tag("dpi/dw"), error: mat_rel(&pi_w, &fd_w) });
                }
            }
            // Full-return target gradients equal the closed-loop return's
            // gradient at every step.
            let x0 = e.default_start();
            if let Ok(traj) = rollout(&p, &x0, &w) {
                if let Ok(gt) = target_gradients(&p, &traj, &w, 1.0) {
                    for t in [0, traj.horizon() / 2] {
                        let fd = central_jacobian(&traj.states[t], h, |v| {
                            Ok(scalar(rollout(&p, v, &w)?.total_reward(p.gamma())))
                        })?;
                        rows.push(InstanceRow {
                            label: tag(&format!("G'_{t} (lambda=1)")),
                            error: rel(&gt[t], &fd.column(0).into_owned()),
                        });
                    }
                }
            }
        }
    }
    Ok(VerificationReport::new("gradcheck", tol, rows))
}
