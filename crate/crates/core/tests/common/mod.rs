//! Oracles shared by the integration tests. Nothing here calls the
//! library's own derivative or target code: values come from direct
//! sums, finite differences and a scalar Riccati recursion.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use vgl_lab::approximator::Weights;
use vgl_lab::model::{Action, Environment, State};
use vgl_lab::policy::GreedyPolicy;

/// Central-difference Jacobian, entry `(i, j) = d out_j / d in_i`.
pub fn fd_jacobian(x: &DVector<f64>, h: f64, mut f: impl FnMut(&DVector<f64>) -> DVector<f64>) -> DMatrix<f64> {
    let mut out: Option<DMatrix<f64>> = None;
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp[i] += h;
        let mut xm = x.clone();
        xm[i] -= h;
        let d = (f(&xp) - f(&xm)) / (2.0 * h);
        let m = out.get_or_insert_with(|| DMatrix::zeros(x.len(), d.len()));
        m.set_row(i, &d.transpose());
    }
    out.unwrap_or_else(|| DMatrix::zeros(0, 0))
}

pub fn fd_gradient(x: &DVector<f64>, h: f64, mut f: impl FnMut(&DVector<f64>) -> f64) -> DVector<f64> {
    fd_jacobian(x, h, |v| DVector::from_element(1, f(v))).column(0).into_owned()
}

pub fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / (1.0 + b.norm())
}

pub fn rel_err_v(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm() / (1.0 + b.norm())
}

/// `sum_k gamma^k r_k`.
pub fn discounted(rewards: &[f64], gamma: f64) -> f64 {
    rewards.iter().rev().fold(0.0, |acc, r| r + gamma * acc)
}

/// Lambda-return built term by term from n-step returns:
/// `R^lambda_t = (1 - lambda) sum_{n=1}^{F-t-1} lambda^{n-1} R^(n)_t
///  + lambda^{F-t-1} R^(F-t)_t`, where `R^(n)_t` bootstraps from
/// `values[t + n]` and the final term is the pure Monte Carlo return.
pub fn lambda_return_oracle(rewards: &[f64], values: &[f64], lambda: f64, gamma: f64) -> Vec<f64> {
    let f = rewards.len();
    let n_step = |t: usize, n: usize| -> f64 {
        let mut g = 0.0;
        for k in 0..n {
            g += gamma.powi(k as i32) * rewards[t + k];
        }
        if t + n < f {
            g += gamma.powi(n as i32) * values[t + n];
        }
        g
    };
    let mut out = Vec::with_capacity(f + 1);
    for t in 0..f {
        let horizon = f - t;
        let mut v = 0.0;
        for n in 1..horizon {
            v += (1.0 - lambda) * lambda.powi(n as i32 - 1) * n_step(t, n);
        }
        v += lambda.powi(horizon as i32 - 1) * n_step(t, horizon);
        out.push(v);
    }
    out.push(0.0);
    out
}

/// Optimal total reward of `x' = x + a`, `r = -(x^2 + c a^2)` over `F`
/// steps from `x0`, by the scalar backward Riccati recursion
/// `P_F = 0`, `P_t = 1 + c P_{t+1} / (c + P_{t+1})`, value `-P_0 x0^2`.
pub fn riccati_optimum(c: f64, horizon: usize, x0: f64) -> f64 {
    let mut p = 0.0;
    for _ in 0..horizon {
        p = 1.0 + c * p / (c + p);
    }
    -p * x0 * x0
}

/// Open-loop return of an action sequence, stepping the raw model.
pub fn open_loop_return(env: &dyn Environment, x0: &State, actions: &[Action], gamma: f64) -> f64 {
    let mut x = x0.clone();
    let mut rewards = Vec::with_capacity(actions.len());
    for a in actions {
        rewards.push(env.reward(&x, a));
        x = env.transition(&x, a);
    }
    assert!(env.is_terminal(&x), "action sequence must end at a terminal state");
    discounted(&rewards, gamma)
}

/// Closed-loop return of the greedy policy from `x`, by direct rollout.
pub fn closed_loop_return(p: &GreedyPolicy, x: &State, w: &Weights) -> f64 {
    let env = p.env();
    let mut x = x.clone();
    let mut rewards = Vec::new();
    while !env.is_terminal(&x) {
        let a = p.greedy_action(&x, w).expect("greedy action").action;
        rewards.push(env.reward(&x, &a));
        x = env.transition(&x, &a);
    }
    discounted(&rewards, p.gamma())
}

/// Costate recursion `p_F = 0`, `p_t = dr/dx + gamma df/dx p_{t+1}` with
/// model Jacobians taken by finite differences.
pub fn costates(env: &dyn Environment, states: &[State], actions: &[Action], gamma: f64, h: f64) -> Vec<DVector<f64>> {
    let f = actions.len();
    let n = states[0].len();
    let mut out = vec![DVector::zeros(n); f + 1];
    for t in (0..f).rev() {
        let a = &actions[t];
        let r_x = fd_gradient(&states[t], h, |x| env.reward(x, a));
        let f_x = fd_jacobian(&states[t], h, |x| env.transition(x, a));
        out[t] = r_x + f_x * &out[t + 1] * gamma;
    }
    out
}

/// A non-terminal state with physical components uniform in `[-r, r]`
/// at a uniformly drawn step.
pub fn random_state(env: &dyn Environment, rng: &mut ChaCha8Rng, r: f64) -> State {
    let physical: Vec<f64> = (0..env.state_dim() - 1).map(|_| rng.random_range(-r..r)).collect();
    env.state_at_step(&physical, rng.random_range(0..env.horizon()))
}

pub fn random_vector(len: usize, rng: &mut ChaCha8Rng, scale: f64) -> DVector<f64> {
    DVector::from_fn(len, |_, _| rng.random_range(-scale..scale))
}

/// Least-squares slope of `log y` against `log x`.
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}
