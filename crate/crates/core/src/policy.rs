//! Greedy policy on the approximate Q function and its derivatives.
//!
//! `Q(x, a, w) = r(x, a) + gamma * V(f(x, a), w)`, maximized over the
//! action box by projected Newton ascent with a multi-start guard. The
//! policy Jacobians come from implicit differentiation of the stationarity
//! condition on the unsaturated block; saturated columns are zero.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::approximator::{Approximator, Weights};
use crate::error::{Result, VglError};
use crate::model::{check_dim, Action, Environment, ModelJacobians, State};
use crate::tolerances::Tolerances;

#[derive(Debug, Clone, PartialEq)]
pub struct GreedyActionResult {
    pub action: Action,
    pub saturated: Vec<bool>,
    /// Q at the maximizer.
    pub q: f64,
    pub dq_da: DVector<f64>,
    pub d2q_da2: DMatrix<f64>,
}

impl GreedyActionResult {
    pub fn unsaturated_indices(&self) -> Vec<usize> {
        (0..self.saturated.len()).filter(|&i| !self.saturated[i]).collect()
    }

    pub fn any_saturated(&self) -> bool {
        self.saturated.iter().any(|&s| s)
    }
}

/// Q, its action gradient and action Hessian at one point.
#[derive(Debug, Clone)]
struct QLocal {
    q: f64,
    grad: DVector<f64>,
    hess: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct GreedyPolicy {
    env: Arc<dyn Environment>,
    approx: Approximator,
    gamma: f64,
    tol: Tolerances,
}

impl GreedyPolicy {
    pub fn new(
        env: Arc<dyn Environment>,
        approx: Approximator,
        gamma: f64,
        tol: Tolerances,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&gamma) {
            return Err(VglError::Config(format!("gamma must lie in [0, 1], got {gamma}")));
        }
        check_dim("approximator input", env.state_dim(), approx.input_dim())?;
        Ok(Self {
            env,
            approx,
            gamma,
            tol,
        })
    }

    pub fn env(&self) -> &dyn Environment {
        self.env.as_ref()
    }

    pub fn env_arc(&self) -> Arc<dyn Environment> {
        Arc::clone(&self.env)
    }

    pub fn approx(&self) -> &Approximator {
        &self.approx
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn tolerances(&self) -> &Tolerances {
        &self.tol
    }

    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        Self::new(self.env_arc(), self.approx.clone(), gamma, self.tol)
    }

    pub fn with_tolerances(&self, tol: Tolerances) -> Self {
        Self { tol, ..self.clone() }
    }

    // ---- value-function lookups with the terminal convention ------------

    /// `V(x, w)`, zero on terminal states.
    pub fn value_at(&self, x: &State, w: &Weights) -> Result<f64> {
        if self.env.is_terminal(x) {
            return Ok(0.0);
        }
        self.approx.value(x, w)
    }

    /// `G(x, w)`, zero on terminal states.
    pub fn gradient_at(&self, x: &State, w: &Weights) -> Result<DVector<f64>> {
        if self.env.is_terminal(x) {
            return Ok(DVector::zeros(self.env.state_dim()));
        }
        self.approx.state_gradient(x, w)
    }

    /// `dG/dx`, zero on terminal states.
    pub fn hessian_at(&self, x: &State, w: &Weights) -> Result<DMatrix<f64>> {
        let n = self.env.state_dim();
        if self.env.is_terminal(x) {
            return Ok(DMatrix::zeros(n, n));
        }
        self.approx.state_hessian(x, w)
    }

    /// `(dG/dw) v`, zero on terminal states.
    pub fn gradient_jvp_at(&self, x: &State, w: &Weights, v: &DVector<f64>) -> Result<DVector<f64>> {
        if self.env.is_terminal(x) {
            return Ok(DVector::zeros(self.approx.dim()));
        }
        self.approx.gradient_weight_jacobian_product(x, w, v)
    }

    fn require_nonterminal(&self, x: &State) -> Result<()> {
        check_dim("state", self.env.state_dim(), x.len())?;
        if self.env.is_terminal(x) {
            return Err(VglError::Usage(format!(
                "Q is undefined at terminal state {:?}",
                x.as_slice()
            )));
        }
        Ok(())
    }

    // ---- Q and its derivatives -------------------------------------------

    pub fn q_value(&self, x: &State, a: &Action, w: &Weights) -> Result<f64> {
        self.require_nonterminal(x)?;
        let (y, r) = self.env.evaluate(x, a)?;
        Ok(r + self.gamma * self.value_at(&y, w)?)
    }

    /// `dQ/da = dr/da + gamma (df/da) G(f(x, a))`.
    pub fn q_action_gradient(&self, x: &State, a: &Action, w: &Weights) -> Result<DVector<f64>> {
        Ok(self.q_local(x, a, w)?.grad)
    }

    /// `d2Q/da2 = d2r/da2 + gamma [sum_k d2f^k/da2 G^k + (df/da) (dG/dx) (df/da)^T]`.
    pub fn q_action_hessian(&self, x: &State, a: &Action, w: &Weights) -> Result<DMatrix<f64>> {
        Ok(self.q_local(x, a, w)?.hess)
    }

    /// `d2Q/dx da`, n x m.
    pub fn q_state_action_hessian(&self, x: &State, a: &Action, w: &Weights) -> Result<DMatrix<f64>> {
        self.require_nonterminal(x)?;
        let (y, _) = self.env.evaluate(x, a)?;
        let jac = self.env.jacobians(x, a);
        self.q_state_action_hessian_with(x, a, &y, &jac, w)
    }

    /// As `q_state_action_hessian`, reusing the successor state and model
    /// Jacobians already known to the caller.
    fn q_state_action_hessian_with(
        &self,
        x: &State,
        a: &Action,
        y: &State,
        jac: &ModelJacobians,
        w: &Weights,
    ) -> Result<DMatrix<f64>> {
        let sec = self.env.second_derivs(x, a);
        let n = self.env.state_dim();
        let (g_next, h_next) = if self.env.is_terminal(y) {
            (DVector::zeros(n), DMatrix::zeros(n, n))
        } else {
            let (_, g, h) = self.approx.value_gradient_hessian(y, w)?;
            (g, h)
        };
        let mut out = &jac.df_dx * &h_next * jac.df_da.transpose() * self.gamma;
        if !sec.d2f_dxda.is_empty() {
            out += sec.d2f_dxda_contracted(&g_next) * self.gamma;
        }
        out += sec.d2r_dxda;
        Ok(out)
    }

    fn q_local(&self, x: &State, a: &Action, w: &Weights) -> Result<QLocal> {
        self.require_nonterminal(x)?;
        let (y, r) = self.env.evaluate(x, a)?;
        let jac = self.env.jacobians(x, a);
        let sec = self.env.second_derivs(x, a);
        let (v_next, g_next, h_next) = if self.env.is_terminal(&y) {
            let n = self.env.state_dim();
            (0.0, DVector::zeros(n), DMatrix::zeros(n, n))
        } else {
            self.approx.value_gradient_hessian(&y, w)?
        };
        let grad = &jac.dr_da + (&jac.df_da * &g_next) * self.gamma;
        let contracted = sec.d2f_da2_contracted(&g_next);
        let hess = sec.d2r_da2
            + (contracted + &jac.df_da * &h_next * jac.df_da.transpose())
                * self.gamma;
        Ok(QLocal {
            q: r + self.gamma * v_next,
            grad,
            hess,
        })
    }

    // ---- greedy action ---------------------------------------------------

    /// Maximizes Q over the action box. Deterministic in `(x, w)`.
    pub fn greedy_action(&self, x: &State, w: &Weights) -> Result<GreedyActionResult> {
        self.require_nonterminal(x)?;
        let m = self.env.action_dim();
        let bounded = self.env.bounded();

        // Primary start: box-clamped Newton step from the origin.
        let zero = DVector::zeros(m);
        let at_zero = self.q_local(x, &zero, w)?;
        let mut primary = match (-&at_zero.hess).cholesky() {
            Some(ch) => ch.solve(&at_zero.grad),
            None => zero.clone(),
        };
        self.clamp(&mut primary);

        let mut starts = vec![primary];
        starts.extend(self.multistart_grid(m, bounded));

        let mut best: Option<(QLocal, Action)> = None;
        let mut failures = Vec::new();
        for (idx, start) in starts.into_iter().enumerate() {
            match self.projected_newton(x, w, start)? {
                Ok((a, local)) => {
                    let better = match &best {
                        None => true,
                        Some((b, _)) => local.q > b.q + 1e-12 * (1.0 + b.q.abs()),
                    };
                    if better {
                        best = Some((local, a));
                    }
                }
                Err(reason) => failures.push(format!("start {idx}: {reason}")),
            }
        }

        let (local, action) = best.ok_or_else(|| {
            VglError::SolverFailure(format!(
                "x={:?}: {}",
                x.as_slice(),
                failures.join("; ")
            ))
        })?;
        let saturated = (0..m)
            .map(|i| bounded[i] && action[i].abs() == 1.0 && local.grad[i].abs() > self.tol.eps_sat)
            .collect();
        Ok(GreedyActionResult {
            action,
            saturated,
            q: local.q,
            dq_da: local.grad,
            d2q_da2: local.hess,
        })
    }

    fn clamp(&self, a: &mut Action) {
        for (ai, &b) in a.iter_mut().zip(self.env.bounded()) {
            if b {
                *ai = ai.clamp(-1.0, 1.0);
            }
        }
    }

    fn multistart_grid(&self, m: usize, bounded: &[bool]) -> Vec<Action> {
        let p = self.tol.multistart_points;
        if p == 0 {
            return Vec::new();
        }
        let axis: Vec<f64> = if p == 1 {
            vec![0.0]
        } else {
            (0..p).map(|k| -1.0 + 2.0 * k as f64 / (p - 1) as f64).collect()
        };
        let _ = bounded;
        // Full tensor grid for small action spaces, per-axis sweeps otherwise.
        if m <= 2 {
            let mut out = vec![DVector::zeros(m)];
            for i in 0..m {
                let mut next = Vec::with_capacity(out.len() * p);
                for base in &out {
                    for &v in &axis {
                        let mut a = base.clone();
                        a[i] = v;
                        next.push(a);
                    }
                }
                out = next;
            }
            out
        } else {
            let mut out = Vec::new();
            for i in 0..m {
                for &v in &axis {
                    let mut a = DVector::zeros(m);
                    a[i] = v;
                    out.push(a);
                }
            }
            out
        }
    }

    fn projected_gradient(&self, a: &Action, g: &DVector<f64>) -> DVector<f64> {
        let bounded = self.env.bounded();
        DVector::from_fn(a.len(), |i, _| {
            let pinned = bounded[i] && ((a[i] >= 1.0 && g[i] > 0.0) || (a[i] <= -1.0 && g[i] < 0.0));
            if pinned {
                0.0
            } else {
                g[i]
            }
        })
    }

    /// Projected-gradient test scaled by the curvature, so that the
    /// implied action error stays near `solver_tol` when Q is steep.
    fn is_stationary(&self, pg: &DVector<f64>, hess: &DMatrix<f64>) -> bool {
        pg.norm() < self.tol.solver_tol * hess.amax().max(1.0)
    }

    /// Up to two extra Newton steps on the interior components once the
    /// stopping test has passed, so dQ/da on them sits at round-off rather
    /// than at the stopping threshold. A step is kept only if it stays
    /// inside the box and does not lower Q or raise the gradient.
    fn polish(&self, x: &State, w: &Weights, mut a: Action, mut local: QLocal) -> Result<(Action, QLocal)> {
        let bounded = self.env.bounded();
        for _ in 0..2 {
            let free: Vec<usize> = (0..a.len()).filter(|&i| !bounded[i] || a[i].abs() < 1.0).collect();
            if free.is_empty() {
                break;
            }
            let g_free = DVector::from_fn(free.len(), |k, _| local.grad[free[k]]);
            if g_free.amax() == 0.0 {
                break;
            }
            let h_free = DMatrix::from_fn(free.len(), free.len(), |p, q| local.hess[(free[p], free[q])]);
            let Some(ch) = (-h_free).cholesky() else { break };
            let d = ch.solve(&g_free);
            let mut cand = a.clone();
            for (k, &i) in free.iter().enumerate() {
                cand[i] += d[k];
            }
            if free.iter().any(|&i| bounded[i] && cand[i].abs() >= 1.0) {
                break;
            }
            let c_local = self.q_local(x, &cand, w)?;
            let c_free = DVector::from_fn(free.len(), |k, _| c_local.grad[free[k]]);
            let slack = 1e-13 * (1.0 + local.q.abs());
            if c_local.q < local.q - slack || c_free.norm() >= g_free.norm() {
                break;
            }
            a = cand;
            local = c_local;
        }
        Ok((a, local))
    }

    /// Inner solve from one start. The outer `Result` carries model errors,
    /// the inner one a certification failure.
    #[allow(clippy::type_complexity)]
    fn projected_newton(
        &self,
        x: &State,
        w: &Weights,
        start: Action,
    ) -> Result<std::result::Result<(Action, QLocal), String>> {
        let mut a = start;
        self.clamp(&mut a);
        let mut local = self.q_local(x, &a, w)?;
        let mut converged = false;
        for _ in 0..self.tol.solver_max_iter {
            let pg = self.projected_gradient(&a, &local.grad);
            if self.is_stationary(&pg, &local.hess) {
                converged = true;
                break;
            }
            let free: Vec<usize> = (0..a.len()).filter(|&i| pg[i] != 0.0).collect();
            let g_free = DVector::from_fn(free.len(), |k, _| local.grad[free[k]]);
            let h_free = DMatrix::from_fn(free.len(), free.len(), |p, q| local.hess[(free[p], free[q])]);
            let (d_free, newton) = match (-&h_free).cholesky() {
                Some(ch) => (ch.solve(&g_free), true),
                None => (g_free.clone(), false),
            };
            let mut dir = DVector::zeros(a.len());
            for (k, &i) in free.iter().enumerate() {
                dir[i] = d_free[k];
            }

            let mut step = 1.0;
            let mut accepted = None;
            for _ in 0..60 {
                let mut cand = &a + &dir * step;
                self.clamp(&mut cand);
                let c_local = self.q_local(x, &cand, w)?;
                let gain = local.grad.dot(&(&cand - &a));
                let slack = 1e-13 * (1.0 + local.q.abs());
                if c_local.q >= local.q + 1e-4 * gain - slack && (c_local.q > local.q - slack) {
                    accepted = Some((cand, c_local));
                    break;
                }
                step *= 0.5;
            }
            match accepted {
                Some((cand, c_local)) => {
                    let moved = (&cand - &a).amax();
                    a = cand;
                    local = c_local;
                    if moved == 0.0 {
                        break;
                    }
                }
                None => break,
            }
            if !newton && a.iter().any(|v| !v.is_finite()) {
                break;
            }
        }
        if !converged {
            let pg = self.projected_gradient(&a, &local.grad);
            if self.is_stationary(&pg, &local.hess) {
                converged = true;
            } else {
                return Ok(Err(format!(
                    "no convergence (projected gradient {:.3e} at a={:?})",
                    pg.norm(),
                    a.as_slice()
                )));
            }
        }
        debug_assert!(converged);
        let (a, local) = self.polish(x, w, a, local)?;
        // Second-order certificate on the components not pinned at a bound.
        let pg_free: Vec<usize> = {
            let bounded = self.env.bounded();
            (0..a.len())
                .filter(|&i| {
                    !(bounded[i] && a[i].abs() == 1.0 && local.grad[i].abs() > self.tol.eps_sat)
                })
                .collect()
        };
        if !pg_free.is_empty() {
            let h = DMatrix::from_fn(pg_free.len(), pg_free.len(), |p, q| local.hess[(pg_free[p], pg_free[q])]);
            let top = SymmetricEigen::new(h).eigenvalues.max();
            if top > self.tol.nsd_tol {
                return Ok(Err(format!(
                    "stationary point is not a maximum (largest Hessian eigenvalue {top:.3e})"
                )));
            }
        }
        Ok(Ok((a, local)))
    }

    // ---- policy derivatives ----------------------------------------------

    /// Inverse of the Hessian restricted to the unsaturated components,
    /// together with those component indices.
    pub fn restricted_hessian_inverse(&self, greedy: &GreedyActionResult) -> Result<(Vec<usize>, DMatrix<f64>)> {
        let unsat = greedy.unsaturated_indices();
        if unsat.is_empty() {
            return Ok((unsat, DMatrix::zeros(0, 0)));
        }
        let h = if unsat.len() == greedy.d2q_da2.nrows() {
            greedy.d2q_da2.clone()
        } else {
            DMatrix::from_fn(unsat.len(), unsat.len(), |p, q| greedy.d2q_da2[(unsat[p], unsat[q])])
        };
        let cond = condition_number(&h);
        if !(cond <= self.tol.singular_condition) {
            return Err(VglError::DerivativeUndefined(format!(
                "restricted action Hessian singular (condition number {cond:.3e})"
            )));
        }
        let inv = h
            .try_inverse()
            .ok_or_else(|| VglError::DerivativeUndefined("restricted action Hessian not invertible".into()))?;
        Ok((unsat, inv))
    }

    /// `dpi/dx`, n x m.
    pub fn policy_state_jacobian(&self, x: &State, w: &Weights) -> Result<DMatrix<f64>> {
        let greedy = self.greedy_action(x, w)?;
        self.policy_state_jacobian_at(x, &greedy, w)
    }

    pub fn policy_state_jacobian_at(
        &self,
        x: &State,
        greedy: &GreedyActionResult,
        w: &Weights,
    ) -> Result<DMatrix<f64>> {
        let (y, _) = self.env.evaluate(x, &greedy.action)?;
        let jac = self.env.jacobians(x, &greedy.action);
        self.policy_state_jacobian_with(x, greedy, &y, &jac, w)
    }

    /// As `policy_state_jacobian_at` along a stored trajectory step, where
    /// `y` is the successor of `x` and `jac` its model Jacobians.
    pub fn policy_state_jacobian_with(
        &self,
        x: &State,
        greedy: &GreedyActionResult,
        y: &State,
        jac: &ModelJacobians,
        w: &Weights,
    ) -> Result<DMatrix<f64>> {
        let n = self.env.state_dim();
        let m = self.env.action_dim();
        let (unsat, inv) = self.restricted_hessian_inverse(greedy)?;
        if unsat.is_empty() {
            return Ok(DMatrix::zeros(n, m));
        }
        let qxa = self.q_state_action_hessian_with(x, &greedy.action, y, jac, w)?;
        if unsat.len() == m {
            return Ok(-(qxa * inv));
        }
        let mut out = DMatrix::zeros(n, m);
        let qxu = DMatrix::from_fn(n, unsat.len(), |i, k| qxa[(i, unsat[k])]);
        let block = -(qxu * inv);
        for (k, &j) in unsat.iter().enumerate() {
            out.set_column(j, &block.column(k));
        }
        Ok(out)
    }

    /// `dpi/dw`, dim(w) x m.
    pub fn policy_weight_jacobian(&self, x: &State, w: &Weights) -> Result<DMatrix<f64>> {
        let greedy = self.greedy_action(x, w)?;
        self.policy_weight_jacobian_at(x, &greedy, w)
    }

    pub fn policy_weight_jacobian_at(
        &self,
        x: &State,
        greedy: &GreedyActionResult,
        w: &Weights,
    ) -> Result<DMatrix<f64>> {
        let m = self.env.action_dim();
        let mut out = DMatrix::zeros(self.approx.dim(), m);
        let (unsat, inv) = self.restricted_hessian_inverse(greedy)?;
        if unsat.is_empty() {
            return Ok(out);
        }
        let (y, _) = self.env.evaluate(x, &greedy.action)?;
        let jac = self.env.jacobians(x, &greedy.action);
        // Column j of d2Q/dw da is gamma (dG/dw)(y) (df/da^j)^T.
        let mut qwu = DMatrix::zeros(self.approx.dim(), unsat.len());
        for (k, &j) in unsat.iter().enumerate() {
            let dir = jac.df_da.row(j).transpose();
            qwu.set_column(k, &(self.gradient_jvp_at(&y, w, &dir)? * self.gamma));
        }
        let block = -(qwu * inv);
        for (k, &j) in unsat.iter().enumerate() {
            out.set_column(j, &block.column(k));
        }
        Ok(out)
    }

    /// Model Jacobians at a step, exposed for the learners.
    pub fn model_jacobians(&self, x: &State, a: &Action) -> ModelJacobians {
        self.env.jacobians(x, a)
    }
}

/// Ratio of largest to smallest eigenvalue magnitude of a symmetric matrix;
/// infinite when the smallest is zero.
pub fn condition_number(h: &DMatrix<f64>) -> f64 {
    if h.is_empty() {
        return 1.0;
    }
    if h.len() == 1 {
        return if h[0] == 0.0 { f64::INFINITY } else { 1.0 };
    }
    let eig = SymmetricEigen::new(h.clone()).eigenvalues;
    let max = eig.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let min = eig.iter().fold(f64::INFINITY, |acc, v| acc.min(v.abs()));
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}
