//! Box-constrained nonlinear programming.
//!
//! The inner solver is a PANOC-type proximal-gradient method: projected
//! gradient steps blended with L-BFGS directions through a line search on the
//! forward-backward envelope (FBE). General constraints are handled by an
//! outer loop that mixes an augmented Lagrangian on `F1(u) in C` (interval
//! sets) with a quadratic penalty on residuals `F2(u) = 0`.

mod alm;
mod lbfgs;
mod panoc;

pub use alm::{alm_pm_solve, alm_pm_solve_warm, AlmWarmStart};
pub use lbfgs::{lbfgs_direction, LbfgsHistory};
pub use panoc::{panoc_minimize, panoc_solve, InnerSolution};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid bounds: {0}")]
    InvalidBounds(String),
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite {what} at iterate {iterate:?}")]
    NonFinite { what: &'static str, iterate: Vec<f64> },
    #[error("problem evaluation failed: {0}")]
    Evaluation(String),
}

/// Elementwise bounds; entries may be infinite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxBounds {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl BoxBounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self, SolverError> {
        if lower.len() != upper.len() {
            return Err(SolverError::DimensionMismatch {
                expected: lower.len(),
                got: upper.len(),
            });
        }
        for (i, (lo, hi)) in lower.iter().zip(&upper).enumerate() {
            if lo.is_nan() || hi.is_nan() || lo > hi {
                return Err(SolverError::InvalidBounds(format!("entry {i}: [{lo}, {hi}]")));
            }
        }
        Ok(Self { lower, upper })
    }

    pub fn unbounded(n: usize) -> Self {
        Self {
            lower: vec![f64::NEG_INFINITY; n],
            upper: vec![f64::INFINITY; n],
        }
    }

    /// The same `[lo, hi]` block repeated `times` times.
    pub fn repeated(lo: &[f64], hi: &[f64], times: usize) -> Result<Self, SolverError> {
        Self::new(lo.repeat(times), hi.repeat(times))
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn contains(&self, u: &[f64]) -> bool {
        u.len() == self.dim()
            && u
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (lo, hi))| *lo <= *v && *v <= *hi)
    }

    /// In-place elementwise clamp.
    pub fn project_in_place(&self, u: &mut [f64]) {
        for (v, (lo, hi)) in u.iter_mut().zip(self.lower.iter().zip(&self.upper)) {
            *v = v.max(*lo).min(*hi);
        }
    }
}

/// Euclidean projection onto the box.
pub fn project_box(u: &[f64], bounds: &BoxBounds) -> Result<Vec<f64>, SolverError> {
    if u.len() != bounds.dim() {
        return Err(SolverError::DimensionMismatch {
            expected: bounds.dim(),
            got: u.len(),
        });
    }
    let mut out = u.to_vec();
    bounds.project_in_place(&mut out);
    Ok(out)
}

/// Target set of the augmented-Lagrangian mapping: a product of intervals.
pub type IntervalSet = BoxBounds;

/// Multipliers and penalty the augmented cost is evaluated with.
#[derive(Debug, Clone, Copy)]
pub struct AlmTerms<'a> {
    pub multipliers: &'a [f64],
    pub penalty: f64,
}

/// A smooth problem over a box, optionally with `F1(u) in C` (augmented
/// Lagrangian) and `F2(u) = 0` (penalty) constraints.
///
/// Evaluators must be deterministic. The penalty residuals are expected to be
/// clamped already, e.g. `max(0, g(u))` for `g(u) <= 0`.
pub trait NlpProblem {
    fn dim(&self) -> usize;

    fn bounds(&self) -> &BoxBounds;

    /// Writes the gradient and returns the cost.
    fn cost_grad(&self, u: &[f64], grad: &mut [f64]) -> Result<f64, SolverError>;

    /// Cost alone; override when it is cheaper than [`Self::cost_grad`].
    fn cost(&self, u: &[f64]) -> Result<f64, SolverError> {
        let mut scratch = vec![0.0; u.len()];
        self.cost_grad(u, &mut scratch)
    }

    fn alm_dim(&self) -> usize {
        0
    }

    /// `C` for the augmented-Lagrangian mapping; required when `alm_dim() > 0`.
    fn alm_set(&self) -> Option<&IntervalSet> {
        None
    }

    fn pm_dim(&self) -> usize {
        0
    }

    /// Writes `F1(u)` and `F2(u)`.
    fn constraint_maps(&self, _u: &[f64], _f1: &mut [f64], _f2: &mut [f64]) -> Result<(), SolverError> {
        Ok(())
    }

    /// Accumulates `J1(u)^T w1 + J2(u)^T w2` into `out`.
    fn constraint_maps_jt(
        &self,
        _u: &[f64],
        _w1: &[f64],
        _w2: &[f64],
        _out: &mut [f64],
    ) -> Result<(), SolverError> {
        Ok(())
    }

    /// Value of [`Self::augmented_cost_grad`] without the gradient.
    fn augmented_cost(&self, u: &[f64], terms: AlmTerms<'_>) -> Result<f64, SolverError> {
        let mut scratch = vec![0.0; u.len()];
        self.augmented_cost_grad(u, terms, &mut scratch)
    }

    /// `f(u) + c/2 dist^2(F1(u) + y/c, C) + c/2 |F2(u)|^2` and its gradient.
    ///
    /// Implementations that can share work between the cost and the
    /// constraint mappings should override this.
    fn augmented_cost_grad(&self, u: &[f64], terms: AlmTerms<'_>, grad: &mut [f64]) -> Result<f64, SolverError> {
        let mut value = self.cost_grad(u, grad)?;
        let (n1, n2) = (self.alm_dim(), self.pm_dim());
        if n1 + n2 == 0 {
            return Ok(value);
        }
        let c = terms.penalty;
        let mut f1 = vec![0.0; n1];
        let mut f2 = vec![0.0; n2];
        self.constraint_maps(u, &mut f1, &mut f2)?;
        let mut w1 = vec![0.0; n1];
        if n1 > 0 {
            let set = self
                .alm_set()
                .ok_or_else(|| SolverError::InvalidConfig("alm_dim > 0 but no target set".into()))?;
            for i in 0..n1 {
                let w = f1[i] + terms.multipliers[i] / c;
                let r = w - w.max(set.lower()[i]).min(set.upper()[i]);
                value += 0.5 * c * r * r;
                w1[i] = c * r;
            }
        }
        let mut w2 = vec![0.0; n2];
        for i in 0..n2 {
            value += 0.5 * c * f2[i] * f2[i];
            w2[i] = c * f2[i];
        }
        self.constraint_maps_jt(u, &w1, &w2, grad)?;
        Ok(value)
    }
}

type CostFn<'a> = Box<dyn Fn(&[f64], &mut [f64]) -> f64 + 'a>;
type MapFn<'a> = Box<dyn Fn(&[f64], &mut [f64]) + 'a>;
type JtFn<'a> = Box<dyn Fn(&[f64], &[f64], &mut [f64]) + 'a>;

/// Constraint mapping given as closures: value and transposed-Jacobian product
/// (the latter accumulates into its output).
pub struct ConstraintMap<'a> {
    pub dim: usize,
    pub map: MapFn<'a>,
    pub jt: JtFn<'a>,
}

/// [`NlpProblem`] assembled from closures.
pub struct FnProblem<'a> {
    bounds: BoxBounds,
    cost: CostFn<'a>,
    alm: Option<(ConstraintMap<'a>, IntervalSet)>,
    pm: Option<ConstraintMap<'a>>,
}

impl<'a> FnProblem<'a> {
    pub fn new(bounds: BoxBounds, cost: impl Fn(&[f64], &mut [f64]) -> f64 + 'a) -> Self {
        Self {
            bounds,
            cost: Box::new(cost),
            alm: None,
            pm: None,
        }
    }

    pub fn with_alm(mut self, map: ConstraintMap<'a>, set: IntervalSet) -> Result<Self, SolverError> {
        if set.dim() != map.dim {
            return Err(SolverError::DimensionMismatch {
                expected: map.dim,
                got: set.dim(),
            });
        }
        self.alm = Some((map, set));
        Ok(self)
    }

    pub fn with_pm(mut self, map: ConstraintMap<'a>) -> Self {
        self.pm = Some(map);
        self
    }
}

impl NlpProblem for FnProblem<'_> {
    fn dim(&self) -> usize {
        self.bounds.dim()
    }

    fn bounds(&self) -> &BoxBounds {
        &self.bounds
    }

    fn cost_grad(&self, u: &[f64], grad: &mut [f64]) -> Result<f64, SolverError> {
        Ok((self.cost)(u, grad))
    }

    fn alm_dim(&self) -> usize {
        self.alm.as_ref().map_or(0, |(m, _)| m.dim)
    }

    fn alm_set(&self) -> Option<&IntervalSet> {
        self.alm.as_ref().map(|(_, s)| s)
    }

    fn pm_dim(&self) -> usize {
        self.pm.as_ref().map_or(0, |m| m.dim)
    }

    fn constraint_maps(&self, u: &[f64], f1: &mut [f64], f2: &mut [f64]) -> Result<(), SolverError> {
        if let Some((m, _)) = &self.alm {
            (m.map)(u, f1);
        }
        if let Some(m) = &self.pm {
            (m.map)(u, f2);
        }
        Ok(())
    }

    fn constraint_maps_jt(&self, u: &[f64], w1: &[f64], w2: &[f64], out: &mut [f64]) -> Result<(), SolverError> {
        if let Some((m, _)) = &self.alm {
            (m.jt)(u, w1, out);
        }
        if let Some(m) = &self.pm {
            (m.jt)(u, w2, out);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Fixed-point residual tolerance `|u - P(u - g grad)|_inf / g`.
    pub eps_inner: f64,
    /// Constraint-violation tolerance (infinity norm).
    pub eps_outer: f64,
    pub lbfgs_mem: usize,
    pub max_inner_iters: usize,
    pub max_outer_iters: usize,
    pub penalty_init: f64,
    pub penalty_update_factor: f64,
    pub max_penalty: f64,
    /// Inner tolerance of the first outer iteration; shrinks towards `eps_inner`.
    pub initial_inner_tol: f64,
    pub inner_tol_shrink: f64,
    /// Violation must shrink below this fraction of the previous one to keep the penalty.
    pub sufficient_decrease: f64,
    /// Multipliers are clipped to `[-multiplier_bound, multiplier_bound]`.
    pub multiplier_bound: f64,
    /// Record the FBE before/after every accepted inner step.
    pub record_trace: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            eps_inner: 1e-4,
            eps_outer: 1e-3,
            lbfgs_mem: 10,
            max_inner_iters: 500,
            max_outer_iters: 10,
            penalty_init: 10.0,
            penalty_update_factor: 5.0,
            max_penalty: 1e8,
            initial_inner_tol: 1e-2,
            inner_tol_shrink: 0.1,
            sufficient_decrease: 0.1,
            multiplier_bound: 1e8,
            record_trace: false,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), SolverError> {
        let positive = [
            ("eps_inner", self.eps_inner),
            ("eps_outer", self.eps_outer),
            ("penalty_init", self.penalty_init),
            ("max_penalty", self.max_penalty),
            ("initial_inner_tol", self.initial_inner_tol),
            ("multiplier_bound", self.multiplier_bound),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(SolverError::InvalidConfig(format!("{name} must be > 0, got {v}")));
            }
        }
        if self.lbfgs_mem < 1 {
            return Err(SolverError::InvalidConfig("lbfgs_mem must be >= 1".into()));
        }
        if !(self.penalty_update_factor > 1.0) {
            return Err(SolverError::InvalidConfig("penalty_update_factor must be > 1".into()));
        }
        if !(self.inner_tol_shrink > 0.0 && self.inner_tol_shrink <= 1.0) {
            return Err(SolverError::InvalidConfig("inner_tol_shrink must be in (0, 1]".into()));
        }
        if !(self.sufficient_decrease > 0.0 && self.sufficient_decrease < 1.0) {
            return Err(SolverError::InvalidConfig("sufficient_decrease must be in (0, 1)".into()));
        }
        if self.max_inner_iters == 0 || self.max_outer_iters == 0 {
            return Err(SolverError::InvalidConfig("iteration limits must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    MaxIterations,
    InfeasiblePenaltyExhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NlpSolution {
    pub u_star: Vec<f64>,
    pub status: SolveStatus,
    pub cost: f64,
    pub inner_iters: usize,
    pub outer_iters: usize,
    /// Final fixed-point residual of the inner problem.
    pub fbe_residual: f64,
    pub constraint_violation: f64,
    pub multipliers: Vec<f64>,
    pub penalty: f64,
    /// Wall-clock seconds.
    pub solve_time: f64,
    /// `(fbe before, fbe after)` per accepted inner step when tracing is on.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fbe_trace: Vec<(f64, f64)>,
}
