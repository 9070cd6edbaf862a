//! Smooth parametric value function `V(x, w)` and its derivatives.
//!
//! Two kinds are provided: a quadratic form in the state (linear in `w`)
//! and a single-hidden-layer tanh network. When terminal masking is on,
//! the raw output is multiplied by the remaining-horizon fraction
//! `1 - tau`, and the value is exactly zero on terminal states.
//!
//! The mixed second derivative `dG/dw` is never materialized on the hot
//! path. [`Approximator::gradient_weight_jacobian_product`] evaluates
//! `(dG/dw) v` with one directional pass over the weights, which is the
//! forward-over-reverse product specialised to these two architectures.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VglError};
use crate::model::{check_dim, Environment, State};

pub type Weights = DVector<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ApproximatorKind {
    Quadratic,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ApproximatorSpec {
    pub kind: ApproximatorKind,
    /// Hidden width, mlp only.
    pub hidden: usize,
    pub terminal_mask: bool,
    /// Initial weights are uniform in `[-init_scale, init_scale]`.
    pub init_scale: f64,
}

impl Default for ApproximatorSpec {
    fn default() -> Self {
        Self {
            kind: ApproximatorKind::Mlp,
            hidden: 12,
            terminal_mask: true,
            init_scale: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct TerminalMask {
    time_index: usize,
    /// Terminal once the time component reaches this.
    threshold: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Approximator {
    kind: ApproximatorKind,
    n: usize,
    hidden: usize,
    mask: Option<TerminalMask>,
    init_scale: f64,
}

/// Per-point quantities of the raw (unmasked) function.
struct RawEval {
    value: f64,
    grad: DVector<f64>,
}

impl Approximator {
    pub fn new(spec: &ApproximatorSpec, env: &dyn Environment) -> Result<Self> {
        if spec.kind == ApproximatorKind::Mlp && spec.hidden == 0 {
            return Err(VglError::Config("approximator.hidden must be >= 1".into()));
        }
        if !(spec.init_scale >= 0.0 && spec.init_scale.is_finite()) {
            return Err(VglError::Config("approximator.init_scale must be >= 0".into()));
        }
        Ok(Self {
            kind: spec.kind,
            n: env.state_dim(),
            hidden: spec.hidden,
            mask: spec.terminal_mask.then(|| TerminalMask {
                time_index: env.time_index(),
                threshold: 1.0 - 0.5 * env.time_step(),
            }),
            init_scale: spec.init_scale,
        })
    }

    /// Unmasked approximator over `n` inputs, mainly for tests.
    pub fn unmasked(kind: ApproximatorKind, n: usize, hidden: usize) -> Self {
        Self {
            kind,
            n,
            hidden,
            mask: None,
            init_scale: 0.1,
        }
    }

    pub fn kind(&self) -> ApproximatorKind {
        self.kind
    }

    pub fn input_dim(&self) -> usize {
        self.n
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn dim(&self) -> usize {
        match self.kind {
            ApproximatorKind::Quadratic => 1 + self.n + self.n * (self.n + 1) / 2,
            ApproximatorKind::Mlp => self.hidden * (self.n + 2) + 1,
        }
    }

    /// Seeded uniform initialization in `[-init_scale, init_scale]`.
    pub fn init_weights(&self, seed: u64) -> Weights {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = self.init_scale;
        DVector::from_fn(self.dim(), |_, _| {
            if s == 0.0 {
                0.0
            } else {
                rng.random_range(-s..=s)
            }
        })
    }

    fn check(&self, x: &State, w: &Weights) -> Result<()> {
        check_dim("approximator input", self.n, x.len())?;
        check_dim("weight vector", self.dim(), w.len())
    }

    fn is_masked_out(&self, x: &State) -> bool {
        match self.mask {
            Some(m) => x[m.time_index] >= m.threshold,
            None => false,
        }
    }

    /// Mask factor and the index/slope of its gradient.
    fn mask_factor(&self, x: &State) -> Option<(f64, usize, f64)> {
        self.mask
            .map(|m| (1.0 - x[m.time_index], m.time_index, -1.0))
    }

    pub fn value(&self, x: &State, w: &Weights) -> Result<f64> {
        self.check(x, w)?;
        if self.is_masked_out(x) {
            return Ok(0.0);
        }
        let raw = self.raw_value(x, w);
        Ok(match self.mask_factor(x) {
            Some((m, _, _)) => m * raw,
            None => raw,
        })
    }

    /// `G(x, w) = dV/dx`.
    pub fn state_gradient(&self, x: &State, w: &Weights) -> Result<DVector<f64>> {
        self.check(x, w)?;
        if self.is_masked_out(x) {
            return Ok(DVector::zeros(self.n));
        }
        let RawEval { value, grad } = self.raw_value_grad(x, w);
        Ok(match self.mask_factor(x) {
            Some((m, k, dm)) => {
                let mut g = grad * m;
                g[k] += value * dm;
                g
            }
            None => grad,
        })
    }

    pub fn weight_gradient(&self, x: &State, w: &Weights) -> Result<DVector<f64>> {
        self.check(x, w)?;
        if self.is_masked_out(x) {
            return Ok(DVector::zeros(self.dim()));
        }
        let g = self.raw_weight_gradient(x, w);
        Ok(match self.mask_factor(x) {
            Some((m, _, _)) => g * m,
            None => g,
        })
    }

    /// `(dG/dw) v`, a dim(w)-vector, in O(dim(w)) work.
    pub fn gradient_weight_jacobian_product(
        &self,
        x: &State,
        w: &Weights,
        v: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        self.check(x, w)?;
        check_dim("direction", self.n, v.len())?;
        let mut out = DVector::zeros(self.dim());
        if self.is_masked_out(x) {
            return Ok(out);
        }
        self.raw_gradient_jvp_into(x, w, v, &mut out);
        if let Some((m, k, dm)) = self.mask_factor(x) {
            out *= m;
            let along = dm * v[k];
            if along != 0.0 {
                out.axpy(along, &self.raw_weight_gradient(x, w), 1.0);
            }
        }
        Ok(out)
    }

    /// Full `dG/dw`, dim(w) x n, entry (i, j) = dG^j / dw^i. Built from n
    /// directional passes.
    pub fn full_gradient_weight_jacobian(&self, x: &State, w: &Weights) -> Result<DMatrix<f64>> {
        self.check(x, w)?;
        let mut out = DMatrix::zeros(self.dim(), self.n);
        for j in 0..self.n {
            let e = DVector::from_fn(self.n, |i, _| if i == j { 1.0 } else { 0.0 });
            out.set_column(j, &self.gradient_weight_jacobian_product(x, w, &e)?);
        }
        Ok(out)
    }

    /// Value, state gradient and state Hessian in one call.
    pub fn value_gradient_hessian(&self, x: &State, w: &Weights) -> Result<(f64, DVector<f64>, DMatrix<f64>)> {
        self.check(x, w)?;
        if self.is_masked_out(x) {
            return Ok((0.0, DVector::zeros(self.n), DMatrix::zeros(self.n, self.n)));
        }
        let RawEval { value, grad } = self.raw_value_grad(x, w);
        let h = self.raw_hessian(x, w);
        let (value, grad, hess) = match self.mask_factor(x) {
            Some((m, k, dm)) => {
                let mut out = h * m;
                for i in 0..self.n {
                    out[(i, k)] += dm * grad[i];
                    out[(k, i)] += dm * grad[i];
                }
                let mut g = grad * m;
                g[k] += value * dm;
                (value * m, g, out)
            }
            None => (value, grad, h),
        };
        Ok((value, grad, symmetrized(hess)))
    }

    /// `dG/dx`, symmetric n x n.
    pub fn state_hessian(&self, x: &State, w: &Weights) -> Result<DMatrix<f64>> {
        self.check(x, w)?;
        if self.is_masked_out(x) {
            return Ok(DMatrix::zeros(self.n, self.n));
        }
        let h = self.raw_hessian(x, w);
        let out = match self.mask_factor(x) {
            Some((m, k, dm)) => {
                let RawEval { grad, .. } = self.raw_value_grad(x, w);
                let mut out = h * m;
                for i in 0..self.n {
                    out[(i, k)] += dm * grad[i];
                    out[(k, i)] += dm * grad[i];
                }
                out
            }
            None => h,
        };
        Ok(symmetrized(out))
    }

    // ---- raw (unmasked) evaluations -------------------------------------

    fn raw_value(&self, x: &State, w: &Weights) -> f64 {
        match self.kind {
            ApproximatorKind::Quadratic => {
                let n = self.n;
                let mut acc = w[0];
                for i in 0..n {
                    acc += w[1 + i] * x[i];
                }
                let mut p = 1 + n;
                for i in 0..n {
                    for j in i..n {
                        acc += w[p] * x[i] * x[j];
                        p += 1;
                    }
                }
                acc
            }
            ApproximatorKind::Mlp => {
                let lay = self.mlp_layout();
                let mut acc = w[lay.out_bias];
                for h in 0..self.hidden {
                    acc += w[lay.out_w + h] * self.pre_activation(x, w, h).tanh();
                }
                acc
            }
        }
    }

    fn raw_value_grad(&self, x: &State, w: &Weights) -> RawEval {
        let n = self.n;
        match self.kind {
            ApproximatorKind::Quadratic => {
                let mut grad = DVector::zeros(n);
                for i in 0..n {
                    grad[i] = w[1 + i];
                }
                let mut p = 1 + n;
                for i in 0..n {
                    for j in i..n {
                        if i == j {
                            grad[i] += 2.0 * w[p] * x[i];
                        } else {
                            grad[i] += w[p] * x[j];
                            grad[j] += w[p] * x[i];
                        }
                        p += 1;
                    }
                }
                RawEval {
                    value: self.raw_value(x, w),
                    grad,
                }
            }
            ApproximatorKind::Mlp => {
                let lay = self.mlp_layout();
                let mut value = w[lay.out_bias];
                let mut grad = DVector::zeros(n);
                for h in 0..self.hidden {
                    let s = self.pre_activation(x, w, h).tanh();
                    let vh = w[lay.out_w + h];
                    value += vh * s;
                    let coef = vh * (1.0 - s * s);
                    for i in 0..n {
                        grad[i] += coef * w[h * n + i];
                    }
                }
                RawEval { value, grad }
            }
        }
    }

    fn raw_weight_gradient(&self, x: &State, w: &Weights) -> DVector<f64> {
        let n = self.n;
        let mut out = DVector::zeros(self.dim());
        match self.kind {
            ApproximatorKind::Quadratic => {
                out[0] = 1.0;
                for i in 0..n {
                    out[1 + i] = x[i];
                }
                let mut p = 1 + n;
                for i in 0..n {
                    for j in i..n {
                        out[p] = x[i] * x[j];
                        p += 1;
                    }
                }
            }
            ApproximatorKind::Mlp => {
                let lay = self.mlp_layout();
                for h in 0..self.hidden {
                    let s = self.pre_activation(x, w, h).tanh();
                    let vh = w[lay.out_w + h];
                    let ds = vh * (1.0 - s * s);
                    for i in 0..n {
                        out[h * n + i] = ds * x[i];
                    }
                    out[lay.hidden_bias + h] = ds;
                    out[lay.out_w + h] = s;
                }
                out[lay.out_bias] = 1.0;
            }
        }
        out
    }

    /// Writes `d(grad_x raw . v)/dw` into `out`.
    fn raw_gradient_jvp_into(&self, x: &State, w: &Weights, v: &DVector<f64>, out: &mut DVector<f64>) {
        let n = self.n;
        match self.kind {
            ApproximatorKind::Quadratic => {
                for i in 0..n {
                    out[1 + i] = v[i];
                }
                let mut p = 1 + n;
                for i in 0..n {
                    for j in i..n {
                        out[p] = if i == j {
                            2.0 * x[i] * v[i]
                        } else {
                            x[j] * v[i] + x[i] * v[j]
                        };
                        p += 1;
                    }
                }
            }
            ApproximatorKind::Mlp => {
                let lay = self.mlp_layout();
                for h in 0..self.hidden {
                    let row = &w.as_slice()[h * n..(h + 1) * n];
                    let mut z = w[lay.hidden_bias + h];
                    let mut c = 0.0;
                    for i in 0..n {
                        z += row[i] * x[i];
                        c += row[i] * v[i];
                    }
                    let s = z.tanh();
                    let d1 = 1.0 - s * s;
                    let d2 = -2.0 * s * d1;
                    let vh = w[lay.out_w + h];
                    for i in 0..n {
                        out[h * n + i] = vh * (d2 * x[i] * c + d1 * v[i]);
                    }
                    out[lay.hidden_bias + h] = vh * d2 * c;
                    out[lay.out_w + h] = d1 * c;
                }
                out[lay.out_bias] = 0.0;
            }
        }
    }

    fn raw_hessian(&self, x: &State, w: &Weights) -> DMatrix<f64> {
        let n = self.n;
        let mut hess = DMatrix::zeros(n, n);
        match self.kind {
            ApproximatorKind::Quadratic => {
                let mut p = 1 + n;
                for i in 0..n {
                    for j in i..n {
                        if i == j {
                            hess[(i, i)] += 2.0 * w[p];
                        } else {
                            hess[(i, j)] += w[p];
                            hess[(j, i)] += w[p];
                        }
                        p += 1;
                    }
                }
            }
            ApproximatorKind::Mlp => {
                let lay = self.mlp_layout();
                for h in 0..self.hidden {
                    let s = self.pre_activation(x, w, h).tanh();
                    let coef = w[lay.out_w + h] * (-2.0 * s * (1.0 - s * s));
                    for i in 0..n {
                        for j in 0..n {
                            hess[(i, j)] += coef * w[h * n + i] * w[h * n + j];
                        }
                    }
                }
            }
        }
        hess
    }

    fn pre_activation(&self, x: &State, w: &Weights, h: usize) -> f64 {
        let n = self.n;
        let mut z = w[self.hidden * n + h];
        for i in 0..n {
            z += w[h * n + i] * x[i];
        }
        z
    }

    fn mlp_layout(&self) -> MlpLayout {
        let hn = self.hidden * self.n;
        MlpLayout {
            hidden_bias: hn,
            out_w: hn + self.hidden,
            out_bias: hn + 2 * self.hidden,
        }
    }
}

/// Offsets into the flat mlp weight vector. Input weights come first,
/// row-major (`hidden x n`), starting at 0.
struct MlpLayout {
    hidden_bias: usize,
    out_w: usize,
    out_bias: usize,
}

/// Exact symmetry; the two triangles accumulate in different orders.
fn symmetrized(mut h: DMatrix<f64>) -> DMatrix<f64> {
    for i in 0..h.nrows() {
        for j in 0..i {
            let v = 0.5 * (h[(i, j)] + h[(j, i)]);
            h[(i, j)] = v;
            h[(j, i)] = v;
        }
    }
    h
}

// ---- weight files ---------------------------------------------------------

const WEIGHTS_MAGIC: &[u8; 4] = b"VGLW";
const WEIGHTS_VERSION: u32 = 1;

/// Binary layout: 4-byte magic `VGLW`, u32 version, u64 dim, then `dim`
/// f64 values, all little-endian.
pub fn write_weights_bin(w: &Weights, mut out: impl Write) -> Result<()> {
    out.write_all(WEIGHTS_MAGIC)?;
    out.write_all(&WEIGHTS_VERSION.to_le_bytes())?;
    out.write_all(&(w.len() as u64).to_le_bytes())?;
    for v in w.iter() {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_weights_bin(mut input: impl Read) -> Result<Weights> {
    let mut header = [0u8; 16];
    input
        .read_exact(&mut header)
        .map_err(|e| VglError::WeightsFormat(format!("short header: {e}")))?;
    if &header[0..4] != WEIGHTS_MAGIC {
        return Err(VglError::WeightsFormat("bad magic".into()));
    }
    let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if version != WEIGHTS_VERSION {
        return Err(VglError::WeightsFormat(format!("unsupported version {version}")));
    }
    let dim = u64::from_le_bytes(header[8..16].try_into().unwrap()) as usize;
    let mut body = Vec::new();
    input.read_to_end(&mut body)?;
    if body.len() != dim * 8 {
        return Err(VglError::WeightsFormat(format!(
            "expected {} payload bytes, found {}",
            dim * 8,
            body.len()
        )));
    }
    Ok(DVector::from_iterator(
        dim,
        body.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap())),
    ))
}

#[derive(Debug, Serialize, Deserialize)]
struct WeightsJson {
    version: u32,
    dim: usize,
    weights: Vec<f64>,
}

pub fn weights_to_json(w: &Weights) -> Result<String> {
    Ok(serde_json::to_string_pretty(&WeightsJson {
        version: WEIGHTS_VERSION,
        dim: w.len(),
        weights: w.iter().copied().collect(),
    })?)
}

pub fn weights_from_json(s: &str) -> Result<Weights> {
    let parsed: WeightsJson = serde_json::from_str(s)?;
    if parsed.dim != parsed.weights.len() {
        return Err(VglError::WeightsFormat(format!(
            "dim {} does not match {} listed weights",
            parsed.dim,
            parsed.weights.len()
        )));
    }
    Ok(DVector::from_vec(parsed.weights))
}

pub fn save_weights(w: &Weights, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_weights_bin(w, std::io::BufWriter::new(file))
}

pub fn load_weights(path: &Path) -> Result<Weights> {
    read_weights_bin(std::io::BufReader::new(std::fs::File::open(path)?))
}
