use serde::{Deserialize, Serialize};

/// Numeric thresholds shared by the solver, the derivative code and the
/// diagnostics. Every field can be overridden from the `[tolerances]`
/// section of a run config.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    /// |dQ/da^i| at or below this counts as stationary.
    pub eps_stat: f64,
    /// |dQ/da^i| above this at a bound counts as saturated.
    pub eps_sat: f64,
    /// Projected-gradient norm at which the greedy solver stops.
    pub solver_tol: f64,
    pub solver_max_iter: usize,
    /// Starting points per action component for the multi-start guard.
    pub multistart_points: usize,
    /// Largest eigenvalue allowed for a Hessian block to count as
    /// negative semi-definite.
    pub nsd_tol: f64,
    /// Condition number above which a Hessian block is treated as singular.
    pub singular_condition: f64,
    /// Tolerance on dR/da used by the extremality diagnostic.
    pub extremality_tol: f64,
    /// Weight norm at which training stops and reports divergence.
    pub divergence_norm: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            eps_stat: 1e-8,
            eps_sat: 1e-8,
            solver_tol: 1e-10,
            solver_max_iter: 100,
            multistart_points: 9,
            nsd_tol: 1e-8,
            singular_condition: 1e12,
            extremality_tol: 1e-4,
            divergence_norm: 1e6,
        }
    }
}
