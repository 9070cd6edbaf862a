//! Deterministic episodic environments with analytic derivatives.
//!
//! Every shipped environment augments its physical state with a normalized
//! time component `tau = t / F` so that a fixed horizon can be expressed as
//! a state predicate while the policy stays memoryless. `tau` advances by
//! `1 / F` per step; the terminal test has half a step of slack so rounding
//! in the accumulated sum never matters.
//!
//! Derivative orientation: a vector appearing in the numerator is a row,
//! so `df_dx[(i, j)] = d f^j / d x^i` and `df_da[(i, j)] = d f^j / d a^i`.

use std::fmt::Debug;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, VglError};

pub type State = DVector<f64>;
pub type Action = DVector<f64>;

/// First derivatives of the model functions at one `(x, a)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelJacobians {
    /// n x n, entry (i, j) = d f^j / d x^i.
    pub df_dx: DMatrix<f64>,
    /// m x n, entry (i, j) = d f^j / d a^i.
    pub df_da: DMatrix<f64>,
    pub dr_dx: DVector<f64>,
    pub dr_da: DVector<f64>,
}

/// Second derivatives of the model functions at one `(x, a)`.
///
/// The second derivatives of `f` are stored per output component `k`;
/// an empty vector means they are identically zero (control-affine
/// dynamics with state-independent input matrix).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSecondDerivs {
    /// m x m, symmetric.
    pub d2r_da2: DMatrix<f64>,
    /// n x m, entry (i, j) = d^2 r / d x^i d a^j.
    pub d2r_dxda: DMatrix<f64>,
    /// For each output k: m x m matrix of d^2 f^k / d a d a.
    pub d2f_da2: Vec<DMatrix<f64>>,
    /// For each output k: n x m matrix of d^2 f^k / d x d a.
    pub d2f_dxda: Vec<DMatrix<f64>>,
}

impl ModelSecondDerivs {
    /// `sum_k d^2 f^k / da da * v^k`, an m x m matrix.
    pub fn d2f_da2_contracted(&self, v: &DVector<f64>) -> DMatrix<f64> {
        let m = self.d2r_da2.nrows();
        let mut out = DMatrix::zeros(m, m);
        for (k, block) in self.d2f_da2.iter().enumerate() {
            out += block * v[k];
        }
        out
    }

    /// `sum_k d^2 f^k / dx da * v^k`, an n x m matrix.
    pub fn d2f_dxda_contracted(&self, v: &DVector<f64>) -> DMatrix<f64> {
        let (n, m) = self.d2r_dxda.shape();
        let mut out = DMatrix::zeros(n, m);
        for (k, block) in self.d2f_dxda.iter().enumerate() {
            out += block * v[k];
        }
        out
    }
}

/// A deterministic model `x' = f(x, a)`, `r = r(x, a)` with a terminal
/// predicate. Implementations must be pure.
pub trait Environment: Debug + Send + Sync {
    fn name(&self) -> &str;
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    /// Per action component: whether the `[-1, 1]` constraint applies.
    fn bounded(&self) -> &[bool];
    fn gamma_default(&self) -> f64 {
        1.0
    }
    fn max_horizon(&self) -> usize;
    /// Index of the normalized-time component of the state.
    fn time_index(&self) -> usize;
    /// Fixed horizon `F`, in steps.
    fn horizon(&self) -> usize;
    fn default_start(&self) -> State;

    /// Raw `f(x, a)`, no precondition checks.
    fn transition(&self, x: &State, a: &Action) -> State;
    /// Raw `r(x, a)`, no precondition checks.
    fn reward(&self, x: &State, a: &Action) -> f64;
    fn jacobians(&self, x: &State, a: &Action) -> ModelJacobians;
    fn second_derivs(&self, x: &State, a: &Action) -> ModelSecondDerivs;

    /// Increment of the time component per step, `1 / F`.
    fn time_step(&self) -> f64 {
        1.0 / self.horizon() as f64
    }

    fn is_terminal(&self, x: &State) -> bool {
        x[self.time_index()] >= 1.0 - 0.5 * self.time_step()
    }

    /// State at elapsed step `k` with the given physical components.
    fn state_at_step(&self, physical: &[f64], k: usize) -> State {
        let ti = self.time_index();
        let mut x = DVector::zeros(self.state_dim());
        let mut p = physical.iter();
        for i in 0..self.state_dim() {
            x[i] = if i == ti {
                k as f64 * self.time_step()
            } else {
                *p.next().expect("physical state has state_dim - 1 entries")
            };
        }
        x
    }

    fn any_bounded(&self) -> bool {
        self.bounded().iter().any(|&b| b)
    }

    /// `f` and `r` with the non-terminal and finiteness checks but without
    /// the action-bound check, so open-loop perturbation oracles can step
    /// slightly outside the box.
    fn evaluate(&self, x: &State, a: &Action) -> Result<(State, f64)> {
        check_dim("state", self.state_dim(), x.len())?;
        check_dim("action", self.action_dim(), a.len())?;
        if self.is_terminal(x) {
            return Err(VglError::Usage(format!(
                "{}: cannot step from terminal state {:?}",
                self.name(),
                x.as_slice()
            )));
        }
        let next = self.transition(x, a);
        let r = self.reward(x, a);
        if !r.is_finite() || next.iter().any(|v| !v.is_finite()) {
            return Err(VglError::EnvDefinition(format!(
                "{}: non-finite output at x={:?}, a={:?}",
                self.name(),
                x.as_slice(),
                a.as_slice()
            )));
        }
        Ok((next, r))
    }

    /// One model step. The action must respect the bounds.
    fn step(&self, x: &State, a: &Action) -> Result<(State, f64)> {
        check_dim("action", self.action_dim(), a.len())?;
        for (i, (&ai, &b)) in a.iter().zip(self.bounded()).enumerate() {
            if b && !(-1.0..=1.0).contains(&ai) {
                return Err(VglError::Usage(format!(
                    "{}: action component {i} = {ai} outside [-1, 1]",
                    self.name()
                )));
            }
        }
        self.evaluate(x, a)
    }
}

pub(crate) fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(VglError::DimensionMismatch {
            what,
            expected,
            got,
        });
    }
    Ok(())
}

/// Scalar chain `x' = x + a`, `r = -(x^2 + c a^2)`,
/// unbound action. Solvable by a scalar Riccati recursion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Lqr1dParams {
    pub action_cost: f64,
    pub horizon: usize,
    pub start: f64,
}

impl Default for Lqr1dParams {
    fn default() -> Self {
        Self {
            action_cost: 0.1,
            horizon: 10,
            start: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Lqr1d {
    params: Lqr1dParams,
}

impl Lqr1d {
    pub fn new(params: Lqr1dParams) -> Result<Self> {
        if params.action_cost <= 0.0 || !params.action_cost.is_finite() {
            return Err(VglError::Config("lqr1d.action_cost must be > 0".into()));
        }
        if params.horizon == 0 {
            return Err(VglError::Config("lqr1d.horizon must be >= 1".into()));
        }
        Ok(Self { params })
    }

    pub fn params(&self) -> &Lqr1dParams {
        &self.params
    }
}

impl Environment for Lqr1d {
    fn name(&self) -> &str {
        "lqr1d"
    }
    fn state_dim(&self) -> usize {
        2
    }
    fn action_dim(&self) -> usize {
        1
    }
    fn bounded(&self) -> &[bool] {
        &[false]
    }
    fn max_horizon(&self) -> usize {
        self.params.horizon
    }
    fn time_index(&self) -> usize {
        1
    }
    fn horizon(&self) -> usize {
        self.params.horizon
    }
    fn default_start(&self) -> State {
        DVector::from_vec(vec![self.params.start, 0.0])
    }

    fn transition(&self, x: &State, a: &Action) -> State {
        DVector::from_vec(vec![x[0] + a[0], x[1] + self.time_step()])
    }

    fn reward(&self, x: &State, a: &Action) -> f64 {
        -(x[0] * x[0] + self.params.action_cost * a[0] * a[0])
    }

    fn jacobians(&self, x: &State, a: &Action) -> ModelJacobians {
        let mut df_da = DMatrix::zeros(1, 2);
        df_da[(0, 0)] = 1.0;
        ModelJacobians {
            df_dx: DMatrix::identity(2, 2),
            df_da,
            dr_dx: DVector::from_vec(vec![-2.0 * x[0], 0.0]),
            dr_da: DVector::from_element(1, -2.0 * self.params.action_cost * a[0]),
        }
    }

    fn second_derivs(&self, _x: &State, _a: &Action) -> ModelSecondDerivs {
        ModelSecondDerivs {
            d2r_da2: DMatrix::from_element(1, 1, -2.0 * self.params.action_cost),
            d2r_dxda: DMatrix::zeros(2, 1),
            d2f_da2: Vec::new(),
            d2f_dxda: Vec::new(),
        }
    }
}

/// `x' = x + s a`, `r = -x^2`, `a` in `[-1, 1]`. Far from the origin the
/// optimal control is pinned at a bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BangBang1dParams {
    pub step_size: f64,
    pub horizon: usize,
    pub start: f64,
}

impl Default for BangBang1dParams {
    fn default() -> Self {
        Self {
            step_size: 0.1,
            horizon: 20,
            start: 2.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BangBang1d {
    params: BangBang1dParams,
}

impl BangBang1d {
    pub fn new(params: BangBang1dParams) -> Result<Self> {
        if params.step_size <= 0.0 || !params.step_size.is_finite() {
            return Err(VglError::Config("bangbang1d.step_size must be > 0".into()));
        }
        if params.horizon == 0 {
            return Err(VglError::Config("bangbang1d.horizon must be >= 1".into()));
        }
        Ok(Self { params })
    }
}

impl Environment for BangBang1d {
    fn name(&self) -> &str {
        "bangbang1d"
    }
    fn state_dim(&self) -> usize {
        2
    }
    fn action_dim(&self) -> usize {
        1
    }
    fn bounded(&self) -> &[bool] {
        &[true]
    }
    fn max_horizon(&self) -> usize {
        self.params.horizon
    }
    fn time_index(&self) -> usize {
        1
    }
    fn horizon(&self) -> usize {
        self.params.horizon
    }
    fn default_start(&self) -> State {
        DVector::from_vec(vec![self.params.start, 0.0])
    }

    fn transition(&self, x: &State, a: &Action) -> State {
        DVector::from_vec(vec![x[0] + self.params.step_size * a[0], x[1] + self.time_step()])
    }

    fn reward(&self, x: &State, _a: &Action) -> f64 {
        -x[0] * x[0]
    }

    fn jacobians(&self, x: &State, _a: &Action) -> ModelJacobians {
        let mut df_da = DMatrix::zeros(1, 2);
        df_da[(0, 0)] = self.params.step_size;
        ModelJacobians {
            df_dx: DMatrix::identity(2, 2),
            df_da,
            dr_dx: DVector::from_vec(vec![-2.0 * x[0], 0.0]),
            dr_da: DVector::zeros(1),
        }
    }

    fn second_derivs(&self, _x: &State, _a: &Action) -> ModelSecondDerivs {
        ModelSecondDerivs {
            d2r_da2: DMatrix::zeros(1, 1),
            d2r_dxda: DMatrix::zeros(2, 1),
            d2f_da2: Vec::new(),
            d2f_dxda: Vec::new(),
        }
    }
}

/// Planar navigation towards a goal: `p' = p + s a`,
/// `r = -(|p - g|^2 + c |a|^2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Nav2dParams {
    pub step_size: f64,
    pub action_cost: f64,
    pub horizon: usize,
    pub start: [f64; 2],
    pub goal: [f64; 2],
}

impl Default for Nav2dParams {
    fn default() -> Self {
        Self {
            step_size: 0.25,
            action_cost: 0.1,
            horizon: 15,
            start: [1.5, -1.0],
            goal: [0.0, 0.0],
        }
    }
}

#[derive(Debug, Clone)]
pub struct Nav2d {
    params: Nav2dParams,
    bounded: [bool; 2],
    name: &'static str,
}

impl Nav2d {
    pub fn new(params: Nav2dParams, bounded: bool) -> Result<Self> {
        if params.step_size <= 0.0 || !params.step_size.is_finite() {
            return Err(VglError::Config("nav2d.step_size must be > 0".into()));
        }
        if params.action_cost <= 0.0 || !params.action_cost.is_finite() {
            return Err(VglError::Config("nav2d.action_cost must be > 0".into()));
        }
        if params.horizon == 0 {
            return Err(VglError::Config("nav2d.horizon must be >= 1".into()));
        }
        Ok(Self {
            params,
            bounded: [bounded; 2],
            name: if bounded { "nav2d" } else { "nav2d-unbound" },
        })
    }
}

impl Environment for Nav2d {
    fn name(&self) -> &str {
        self.name
    }
    fn state_dim(&self) -> usize {
        3
    }
    fn action_dim(&self) -> usize {
        2
    }
    fn bounded(&self) -> &[bool] {
        &self.bounded
    }
    fn max_horizon(&self) -> usize {
        self.params.horizon
    }
    fn time_index(&self) -> usize {
        2
    }
    fn horizon(&self) -> usize {
        self.params.horizon
    }
    fn default_start(&self) -> State {
        DVector::from_vec(vec![self.params.start[0], self.params.start[1], 0.0])
    }

    fn transition(&self, x: &State, a: &Action) -> State {
        let s = self.params.step_size;
        DVector::from_vec(vec![x[0] + s * a[0], x[1] + s * a[1], x[2] + self.time_step()])
    }

    fn reward(&self, x: &State, a: &Action) -> f64 {
        let g = self.params.goal;
        let dx = x[0] - g[0];
        let dy = x[1] - g[1];
        -(dx * dx + dy * dy + self.params.action_cost * (a[0] * a[0] + a[1] * a[1]))
    }

    fn jacobians(&self, x: &State, a: &Action) -> ModelJacobians {
        let s = self.params.step_size;
        let g = self.params.goal;
        let c = self.params.action_cost;
        let mut df_da = DMatrix::zeros(2, 3);
        df_da[(0, 0)] = s;
        df_da[(1, 1)] = s;
        ModelJacobians {
            df_dx: DMatrix::identity(3, 3),
            df_da,
            dr_dx: DVector::from_vec(vec![-2.0 * (x[0] - g[0]), -2.0 * (x[1] - g[1]), 0.0]),
            dr_da: DVector::from_vec(vec![-2.0 * c * a[0], -2.0 * c * a[1]]),
        }
    }

    fn second_derivs(&self, _x: &State, _a: &Action) -> ModelSecondDerivs {
        ModelSecondDerivs {
            d2r_da2: DMatrix::identity(2, 2) * (-2.0 * self.params.action_cost),
            d2r_dxda: DMatrix::zeros(3, 2),
            d2f_da2: Vec::new(),
            d2f_dxda: Vec::new(),
        }
    }
}

/// Serializable environment selection, used by the run config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", try_from = "EnvTable")]
pub enum EnvSpec {
    #[serde(rename = "lqr1d")]
    Lqr1d(Lqr1dParams),
    #[serde(rename = "bangbang1d")]
    BangBang1d(BangBang1dParams),
    #[serde(rename = "nav2d")]
    Nav2d(Nav2dParams),
    #[serde(rename = "nav2d-unbound")]
    Nav2dUnbound(Nav2dParams),
}

/// Flat form of `[env]` used for deserialization. Unlike an internally
/// tagged enum it is not buffered, so unknown keys are reported at their
/// own line.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct EnvTable {
    name: String,
    action_cost: Option<f64>,
    step_size: Option<f64>,
    horizon: Option<usize>,
    start: Option<StartValue>,
    goal: Option<[f64; 2]>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum StartValue {
    Scalar(f64),
    Point([f64; 2]),
}

impl TryFrom<EnvTable> for EnvSpec {
    type Error = String;

    fn try_from(t: EnvTable) -> std::result::Result<Self, String> {
        let name = t.name.clone();
        let reject = |field: &str, present: bool| -> std::result::Result<(), String> {
            match present {
                true => Err(format!("field `{field}` does not apply to environment '{name}'")),
                false => Ok(()),
            }
        };
        let scalar_start = |start: Option<StartValue>, default: f64| match start {
            None => Ok(default),
            Some(StartValue::Scalar(v)) => Ok(v),
            Some(StartValue::Point(_)) => Err(format!("environment '{name}' expects a scalar `start`")),
        };
        let spec = EnvSpec::by_name(&t.name).map_err(|e| e.to_string())?;
        Ok(match spec {
            EnvSpec::Lqr1d(d) => {
                reject("step_size", t.step_size.is_some())?;
                reject("goal", t.goal.is_some())?;
                EnvSpec::Lqr1d(Lqr1dParams {
                    action_cost: t.action_cost.unwrap_or(d.action_cost),
                    horizon: t.horizon.unwrap_or(d.horizon),
                    start: scalar_start(t.start, d.start)?,
                })
            }
            EnvSpec::BangBang1d(d) => {
                reject("action_cost", t.action_cost.is_some())?;
                reject("goal", t.goal.is_some())?;
                EnvSpec::BangBang1d(BangBang1dParams {
                    step_size: t.step_size.unwrap_or(d.step_size),
                    horizon: t.horizon.unwrap_or(d.horizon),
                    start: scalar_start(t.start, d.start)?,
                })
            }
            EnvSpec::Nav2d(d) | EnvSpec::Nav2dUnbound(d) => {
                let start = match t.start {
                    None => d.start,
                    Some(StartValue::Point(p)) => p,
                    Some(StartValue::Scalar(_)) => {
                        return Err(format!("environment '{name}' expects `start = [x, y]`"))
                    }
                };
                let p = Nav2dParams {
                    step_size: t.step_size.unwrap_or(d.step_size),
                    action_cost: t.action_cost.unwrap_or(d.action_cost),
                    horizon: t.horizon.unwrap_or(d.horizon),
                    start,
                    goal: t.goal.unwrap_or(d.goal),
                };
                if name == "nav2d" {
                    EnvSpec::Nav2d(p)
                } else {
                    EnvSpec::Nav2dUnbound(p)
                }
            }
        })
    }
}

impl Default for EnvSpec {
    fn default() -> Self {
        EnvSpec::Lqr1d(Lqr1dParams::default())
    }
}

impl EnvSpec {
    pub const NAMES: [&'static str; 4] = ["lqr1d", "bangbang1d", "nav2d", "nav2d-unbound"];

    /// Default parameters for a named environment.
    pub fn by_name(name: &str) -> Result<Self> {
        Ok(match name {
            "lqr1d" => EnvSpec::Lqr1d(Default::default()),
            "bangbang1d" => EnvSpec::BangBang1d(Default::default()),
            "nav2d" => EnvSpec::Nav2d(Default::default()),
            "nav2d-unbound" => EnvSpec::Nav2dUnbound(Default::default()),
            other => {
                return Err(VglError::Config(format!(
                    "unknown environment '{other}' (expected one of {:?})",
                    Self::NAMES
                )))
            }
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            EnvSpec::Lqr1d(_) => "lqr1d",
            EnvSpec::BangBang1d(_) => "bangbang1d",
            EnvSpec::Nav2d(_) => "nav2d",
            EnvSpec::Nav2dUnbound(_) => "nav2d-unbound",
        }
    }

    pub fn build(&self) -> Result<Arc<dyn Environment>> {
        Ok(match self {
            EnvSpec::Lqr1d(p) => Arc::new(Lqr1d::new(p.clone())?),
            EnvSpec::BangBang1d(p) => Arc::new(BangBang1d::new(p.clone())?),
            EnvSpec::Nav2d(p) => Arc::new(Nav2d::new(p.clone(), true)?),
            EnvSpec::Nav2dUnbound(p) => Arc::new(Nav2d::new(p.clone(), false)?),
        })
    }
}
