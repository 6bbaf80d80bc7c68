//! Single-shooting NMPC: horizon rollout, adjoint gradient, corridor and
//! obstacle constraints, and the per-tick control step.

use std::cell::RefCell;
use std::f64::consts::FRAC_PI_6;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{state_derivative, state_jacobian, ControlInput, ModelError, ModelJacobian, StateDerivative, VehicleParams, VehicleState};
use crate::solver::{
    alm_pm_solve_warm, AlmTerms, AlmWarmStart, BoxBounds, IntervalSet, NlpProblem, NlpSolution, SolveStatus,
    SolverConfig, SolverError,
};
use crate::track::{Point, TrackLayout, DEFAULT_LOOKAHEAD};

#[derive(Debug, Error)]
pub enum ControllerError {
    #[error("prediction failed at step {step}: {source}")]
    Rollout { step: usize, source: ModelError },
    #[error("invalid controller configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid measured state: {0:?}")]
    InvalidState(VehicleState),
    #[error("expected {expected} inputs, got {got}")]
    HorizonMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Solver(#[from] SolverError),
}

/// Continuous-time model used for prediction.
pub trait PredictionModel {
    fn rate(&self, x: &VehicleState, u: &ControlInput) -> Result<StateDerivative, ModelError>;

    fn jacobian(&self, x: &VehicleState, u: &ControlInput) -> Result<ModelJacobian, ModelError>;
}

impl PredictionModel for VehicleParams {
    fn rate(&self, x: &VehicleState, u: &ControlInput) -> Result<StateDerivative, ModelError> {
        state_derivative(x, u, self)
    }

    fn jacobian(&self, x: &VehicleState, u: &ControlInput) -> Result<ModelJacobian, ModelError> {
        state_jacobian(x, u, self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OcpConfig {
    pub horizon: usize,
    pub t_s: f64,
    /// Diagonal of the terminal position weight.
    pub q1: [f64; 2],
    /// Diagonal of the input-rate weight, ordered (d, delta).
    pub q2: [f64; 2],
    pub u_min: ControlInput,
    pub u_max: ControlInput,
    pub v_x_min: f64,
    pub v_x_max: f64,
    /// Scale applied to the velocity-bound residuals.
    pub v_x_bound_weight: f64,
    /// Look-ahead `P` in center-line samples.
    pub lookahead: usize,
    /// Half-window for re-projecting predicted positions, in samples.
    pub projection_window: usize,
    /// Shrinks the corridor and inflates obstacle clearances inside the OCP only.
    pub boundary_margin: f64,
    pub obstacle_margin: f64,
    /// Carry the (shifted) multipliers from one tick to the next.
    pub warm_start_multipliers: bool,
    /// Also carry the final penalty; off by default since it only ever grows.
    pub warm_start_penalty: bool,
    pub boundary_treatment: Treatment,
    pub obstacle_treatment: Treatment,
}

impl Default for OcpConfig {
    fn default() -> Self {
        Self {
            horizon: 50,
            t_s: 0.033,
            q1: [10.0, 10.0],
            q2: [10.0, 10.0],
            u_min: ControlInput::new(0.0, -FRAC_PI_6),
            u_max: ControlInput::new(1.0, FRAC_PI_6),
            v_x_min: 0.0,
            v_x_max: 5.0,
            v_x_bound_weight: 1.0,
            lookahead: DEFAULT_LOOKAHEAD,
            projection_window: 10,
            boundary_margin: 0.05,
            obstacle_margin: 0.0,
            warm_start_multipliers: true,
            warm_start_penalty: false,
            boundary_treatment: Treatment::Alm,
            obstacle_treatment: Treatment::Penalty,
        }
    }
}

impl OcpConfig {
    pub fn validate(&self) -> Result<(), ControllerError> {
        let bad = |m: &str| Err(ControllerError::InvalidConfig(m.to_string()));
        if self.horizon == 0 {
            return bad("horizon must be at least 1");
        }
        if !(self.t_s.is_finite() && self.t_s > 0.0) {
            return bad("T_s must be positive");
        }
        if self.q1.iter().chain(&self.q2).any(|q| !(q.is_finite() && *q >= 0.0)) {
            return bad("Q1 and Q2 entries must be non-negative");
        }
        if !(self.u_min.d <= self.u_max.d && self.u_min.delta <= self.u_max.delta) {
            return bad("input bounds must satisfy lower <= upper");
        }
        if !(self.v_x_min <= self.v_x_max) {
            return bad("v_x bounds must satisfy lower <= upper");
        }
        if !(self.v_x_bound_weight > 0.0 && self.v_x_bound_weight.is_finite()) {
            return bad("v_x bound weight must be positive");
        }
        if !(self.boundary_margin >= 0.0 && self.obstacle_margin >= 0.0) {
            return bad("margins must be non-negative");
        }
        Ok(())
    }

    pub fn input_bounds(&self) -> BoxBounds {
        BoxBounds::repeated(
            &[self.u_min.d, self.u_min.delta],
            &[self.u_max.d, self.u_max.delta],
            self.horizon,
        )
        .expect("validated bounds")
    }

    fn clamp_input(&self, u: ControlInput) -> ControlInput {
        ControlInput::new(
            u.d.max(self.u_min.d).min(self.u_max.d),
            u.delta.max(self.u_min.delta).min(self.u_max.delta),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerState {
    pub u_prev: ControlInput,
    pub warm_start: Vec<ControlInput>,
    pub last_projection_index: Option<usize>,
    pub alm: Option<AlmWarmStart>,
}

impl ControllerState {
    /// Throttle closed and wheels straight as the previous input; the warm
    /// start is mid-throttle straight, clamped into the input box.
    pub fn initial(cfg: &OcpConfig) -> Self {
        let seed = cfg.clamp_input(ControlInput::new(0.5, 0.0));
        Self {
            u_prev: ControlInput::new(0.0, 0.0),
            warm_start: vec![seed; cfg.horizon],
            last_projection_index: None,
            alm: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HorizonSolution {
    pub inputs: Vec<ControlInput>,
    pub predicted_states: Vec<VehicleState>,
    pub reference: Point,
    pub projection_index: usize,
    /// `None` only when the solver could not start (degraded tick).
    pub solver: Option<NlpSolution>,
    pub degraded: bool,
}

pub fn inputs_to_vec(inputs: &[ControlInput]) -> Vec<f64> {
    inputs.iter().flat_map(|u| [u.d, u.delta]).collect()
}

pub fn vec_to_inputs(u: &[f64]) -> Vec<ControlInput> {
    u.chunks_exact(2).map(|c| ControlInput::new(c[0], c[1])).collect()
}

/// Forward-Euler chain `x_{k+1} = x_k + T f(x_k, u_k)`, returning `N + 1` states.
pub fn rollout<M: PredictionModel + ?Sized>(
    x0: &VehicleState,
    inputs: &[ControlInput],
    model: &M,
    t_s: f64,
) -> Result<Vec<VehicleState>, ControllerError> {
    let mut states = Vec::with_capacity(inputs.len() + 1);
    states.push(*x0);
    for (k, u) in inputs.iter().enumerate() {
        let x = states[k];
        let next = model
            .rate(&x, u)
            .map(|r| x.advanced(&r, t_s))
            .map_err(|source| ControllerError::Rollout { step: k, source })?;
        if !next.is_finite() {
            return Err(ControllerError::Rollout {
                step: k,
                source: ModelError::NumericalBlowup {
                    field: "state",
                    value: f64::NAN,
                },
            });
        }
        states.push(next);
    }
    Ok(states)
}

fn rate_cost(inputs: &[ControlInput], u_prev: &ControlInput, q2: &[f64; 2]) -> f64 {
    let mut prev = *u_prev;
    let mut total = 0.0;
    for u in inputs {
        total += q2[0] * (u.d - prev.d).powi(2) + q2[1] * (u.delta - prev.delta).powi(2);
        prev = *u;
    }
    total
}

/// Terminal distance to `p_d` weighted by `Q1` plus the `Q2`-weighted input rates.
pub fn ocp_cost<M: PredictionModel + ?Sized>(
    inputs: &[ControlInput],
    x0: &VehicleState,
    u_prev: &ControlInput,
    p_d: Point,
    model: &M,
    cfg: &OcpConfig,
) -> Result<f64, ControllerError> {
    let states = rollout(x0, inputs, model, cfg.t_s)?;
    let p = states.last().expect("non-empty").position();
    let terminal = cfg.q1[0] * (p[0] - p_d[0]).powi(2) + cfg.q1[1] * (p[1] - p_d[1]).powi(2);
    Ok(terminal + rate_cost(inputs, u_prev, &cfg.q2))
}

/// Exact gradient of [`ocp_cost`] w.r.t. the interleaved inputs `[d_0, delta_0, d_1, ...]`.
pub fn ocp_gradient<M: PredictionModel + ?Sized>(
    inputs: &[ControlInput],
    x0: &VehicleState,
    u_prev: &ControlInput,
    p_d: Point,
    model: &M,
    cfg: &OcpConfig,
) -> Result<Vec<f64>, ControllerError> {
    let n = inputs.len();
    let mut ws = Workspace::new(n);
    forward(&mut ws, x0, inputs, model, cfg.t_s, true)?;
    ws.sx.iter_mut().for_each(|s| *s = [0.0; 6]);
    terminal_term(&mut ws, p_d, &cfg.q1);
    let mut grad = vec![0.0; 2 * n];
    backward(&ws, cfg.t_s, &mut grad);
    add_rate_terms(inputs, u_prev, &cfg.q2, &mut grad);
    Ok(grad)
}

/// Which outer-loop mechanism handles a constraint family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Treatment {
    /// Augmented Lagrangian with an interval target.
    Alm,
    Penalty,
}

/// One scalar constraint `f in [lo, hi]` on the predicted state at step `k`;
/// `df` is the gradient of `f` w.r.t. `(p_x, p_y, v_x)`.
#[derive(Debug, Clone, Copy)]
struct Entry {
    k: usize,
    f: f64,
    df: [f64; 3],
    lo: f64,
    hi: f64,
    treatment: Treatment,
}

impl Entry {
    fn add_to(&self, sx: &mut [[f64; 6]], weight: f64) {
        sx[self.k][0] += weight * self.df[0];
        sx[self.k][1] += weight * self.df[1];
        sx[self.k][3] += weight * self.df[2];
    }

    /// Signed excess `f - clamp(f, lo, hi)`.
    fn excess(&self) -> f64 {
        self.f - self.f.max(self.lo).min(self.hi)
    }
}

/// Constraint values along one predicted trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintValues {
    /// `F1`, the augmented-Lagrangian mapping, with its interval target.
    pub alm: Vec<f64>,
    pub alm_lower: Vec<f64>,
    pub alm_upper: Vec<f64>,
    /// `F2`, the clamped penalty residuals (zero when feasible).
    pub pm: Vec<f64>,
    /// Center-line index selected for each boundary step.
    pub projection_indices: Vec<usize>,
}

struct Workspace {
    states: Vec<VehicleState>,
    jacs: Vec<ModelJacobian>,
    sx: Vec<[f64; 6]>,
    entries: Vec<Entry>,
    projections: Vec<usize>,
}

impl Workspace {
    fn new(n: usize) -> Self {
        Self {
            states: Vec::with_capacity(n + 1),
            jacs: Vec::with_capacity(n),
            sx: vec![[0.0; 6]; n + 1],
            entries: Vec::new(),
            projections: Vec::with_capacity(n),
        }
    }
}

fn forward<M: PredictionModel + ?Sized>(
    ws: &mut Workspace,
    x0: &VehicleState,
    inputs: &[ControlInput],
    model: &M,
    t_s: f64,
    with_jacobians: bool,
) -> Result<(), ControllerError> {
    ws.states.clear();
    ws.jacs.clear();
    ws.states.push(*x0);
    for (k, u) in inputs.iter().enumerate() {
        let x = ws.states[k];
        let err = |source| ControllerError::Rollout { step: k, source };
        let (rate, jac) = if with_jacobians {
            let jac = model.jacobian(&x, u).map_err(err)?;
            (jac.rate, Some(jac))
        } else {
            (model.rate(&x, u).map_err(err)?, None)
        };
        let next = x.advanced(&rate, t_s);
        if !next.is_finite() {
            return Err(ControllerError::Rollout {
                step: k,
                source: ModelError::NumericalBlowup {
                    field: "state",
                    value: f64::NAN,
                },
            });
        }
        ws.jacs.extend(jac);
        ws.states.push(next);
    }
    Ok(())
}

fn terminal_term(ws: &mut Workspace, p_d: Point, q1: &[f64; 2]) -> f64 {
    let p = ws.states.last().expect("non-empty").position();
    let e = [p[0] - p_d[0], p[1] - p_d[1]];
    let last = ws.sx.len() - 1;
    ws.sx[last][0] += 2.0 * q1[0] * e[0];
    ws.sx[last][1] += 2.0 * q1[1] * e[1];
    q1[0] * e[0] * e[0] + q1[1] * e[1] * e[1]
}

/// Costate recursion through the Euler chain; writes `B_k^T lambda_{k+1}` into `grad`.
fn backward(ws: &Workspace, t_s: f64, grad: &mut [f64]) {
    let n = ws.jacs.len();
    let mut lam = ws.sx[n];
    for k in (0..n).rev() {
        let jac = &ws.jacs[k];
        let mut gd = 0.0;
        let mut gdelta = 0.0;
        for i in 0..6 {
            gd += t_s * jac.du[i][0] * lam[i];
            gdelta += t_s * jac.du[i][1] * lam[i];
        }
        grad[2 * k] = gd;
        grad[2 * k + 1] = gdelta;
        let mut next = ws.sx[k];
        for j in 0..6 {
            let mut acc = lam[j];
            for i in 0..6 {
                acc += t_s * jac.dx[i][j] * lam[i];
            }
            next[j] += acc;
        }
        lam = next;
    }
}

fn add_rate_terms(inputs: &[ControlInput], u_prev: &ControlInput, q2: &[f64; 2], grad: &mut [f64]) -> f64 {
    let mut prev = *u_prev;
    let mut total = 0.0;
    for (k, u) in inputs.iter().enumerate() {
        let diff = [u.d - prev.d, u.delta - prev.delta];
        for c in 0..2 {
            total += q2[c] * diff[c] * diff[c];
            grad[2 * k + c] += 2.0 * q2[c] * diff[c];
            if k > 0 {
                grad[2 * (k - 1) + c] -= 2.0 * q2[c] * diff[c];
            }
        }
        prev = *u;
    }
    total
}

/// The racing OCP for one tick as an [`NlpProblem`].
pub struct RacingOcp<'a, M: PredictionModel + ?Sized> {
    model: &'a M,
    layout: &'a TrackLayout,
    cfg: &'a OcpConfig,
    x0: VehicleState,
    u_prev: ControlInput,
    p_d: Point,
    hint: usize,
    bounds: BoxBounds,
    alm_set: IntervalSet,
    n_alm: usize,
    n_pm: usize,
    ws: RefCell<Workspace>,
}

impl<'a, M: PredictionModel + ?Sized> RacingOcp<'a, M> {
    pub fn new(
        model: &'a M,
        layout: &'a TrackLayout,
        cfg: &'a OcpConfig,
        x0: VehicleState,
        u_prev: ControlInput,
        p_d: Point,
        hint: usize,
    ) -> Self {
        let n = cfg.horizon;
        let mut ocp = Self {
            model,
            layout,
            cfg,
            x0,
            u_prev,
            p_d,
            hint,
            bounds: cfg.input_bounds(),
            alm_set: BoxBounds::unbounded(0),
            n_alm: 0,
            n_pm: 0,
            ws: RefCell::new(Workspace::new(n)),
        };
        // the entry layout and targets do not depend on the decision vector
        let mut ws = Workspace::new(n);
        ws.states = vec![x0; n + 1];
        ocp.collect_entries(&mut ws);
        let (mut lo, mut hi) = (Vec::new(), Vec::new());
        for e in ws.entries.iter().filter(|e| e.treatment == Treatment::Alm) {
            lo.push(e.lo);
            hi.push(e.hi);
        }
        ocp.n_alm = lo.len();
        ocp.n_pm = ws.entries.len() - lo.len();
        ocp.alm_set = BoxBounds::new(lo, hi).expect("ordered targets");
        ocp
    }

    pub fn reference(&self) -> Point {
        self.p_d
    }

    /// Stacks the boundary, obstacle and speed entries for the states in `ws`.
    fn collect_entries(&self, ws: &mut Workspace) {
        let cfg = self.cfg;
        let n = cfg.horizon;
        let (boundary, obstacle) = (cfg.boundary_treatment, cfg.obstacle_treatment);
        ws.entries.clear();
        ws.projections.clear();

        let half = (self.layout.corridor_half_width() - cfg.boundary_margin).max(0.0);
        let line = &self.layout.center_line;
        let mut hint = self.hint;
        for k in 0..n {
            let p = ws.states[k].position();
            let proj = line.project_onto_segments(p, Some(hint), cfg.projection_window);
            hint = proj.index;
            ws.projections.push(proj.index);
            let d = [p[0] - proj.point[0], p[1] - proj.point[1]];
            ws.entries.push(Entry {
                k,
                f: d[0] * d[0] + d[1] * d[1],
                df: [2.0 * d[0], 2.0 * d[1], 0.0],
                lo: 0.0,
                hi: half * half,
                treatment: boundary,
            });
        }

        for k in 0..=n {
            let p = ws.states[k].position();
            for o in &self.layout.obstacles {
                let g = o.gamma + cfg.obstacle_margin;
                let d = [p[0] - o.center[0], p[1] - o.center[1]];
                ws.entries.push(Entry {
                    k,
                    f: d[0] * d[0] + d[1] * d[1],
                    df: [2.0 * d[0], 2.0 * d[1], 0.0],
                    lo: g * g,
                    hi: f64::INFINITY,
                    treatment: obstacle,
                });
            }
        }

        let w = cfg.v_x_bound_weight;
        for k in 0..=n {
            let v = w * ws.states[k].v_x;
            for (lo, hi) in [(w * cfg.v_x_min, f64::INFINITY), (f64::NEG_INFINITY, w * cfg.v_x_max)] {
                ws.entries.push(Entry {
                    k,
                    f: v,
                    df: [0.0, 0.0, w],
                    lo,
                    hi,
                    treatment: Treatment::Penalty,
                });
            }
        }
    }

    /// Constraint values for the given inputs.
    pub fn constraint_values(&self, u: &[f64]) -> Result<ConstraintValues, ControllerError> {
        let mut ws = Workspace::new(self.cfg.horizon);
        ws.states = rollout(&self.x0, &vec_to_inputs(u), self.model, self.cfg.t_s)?;
        self.collect_entries(&mut ws);
        let mut out = ConstraintValues {
            alm: Vec::with_capacity(self.n_alm),
            alm_lower: Vec::with_capacity(self.n_alm),
            alm_upper: Vec::with_capacity(self.n_alm),
            pm: Vec::with_capacity(self.n_pm),
            projection_indices: ws.projections.clone(),
        };
        for e in &ws.entries {
            match e.treatment {
                Treatment::Alm => {
                    out.alm.push(e.f);
                    out.alm_lower.push(e.lo);
                    out.alm_upper.push(e.hi);
                }
                Treatment::Penalty => out.pm.push(e.excess().abs()),
            }
        }
        Ok(out)
    }

    fn check_dim(&self, u: &[f64]) -> Result<(), SolverError> {
        if u.len() != 2 * self.cfg.horizon {
            return Err(SolverError::DimensionMismatch {
                expected: 2 * self.cfg.horizon,
                got: u.len(),
            });
        }
        Ok(())
    }

    /// Cost (optionally augmented) and gradient in one rollout and one adjoint
    /// sweep. A diverging prediction yields `+inf` so line searches back off.
    fn evaluate(&self, u: &[f64], terms: Option<AlmTerms<'_>>, grad: Option<&mut [f64]>) -> Result<f64, SolverError> {
        self.check_dim(u)?;
        let inputs = vec_to_inputs(u);
        let mut ws = self.ws.borrow_mut();
        if forward(&mut ws, &self.x0, &inputs, self.model, self.cfg.t_s, grad.is_some()).is_err() {
            if let Some(grad) = grad {
                grad.iter_mut().for_each(|g| *g = f64::NAN);
            }
            return Ok(f64::INFINITY);
        }
        ws.sx.iter_mut().for_each(|s| *s = [0.0; 6]);
        let mut cost = terminal_term(&mut ws, self.p_d, &self.cfg.q1);

        if let Some(terms) = terms {
            let ws = &mut *ws;
            self.collect_entries(ws);
            let c = terms.penalty;
            let mut ia = 0;
            for e in &ws.entries {
                let r = match e.treatment {
                    Treatment::Alm => {
                        let w = e.f + terms.multipliers[ia] / c;
                        ia += 1;
                        w - w.max(e.lo).min(e.hi)
                    }
                    Treatment::Penalty => e.excess(),
                };
                if r != 0.0 {
                    cost += 0.5 * c * r * r;
                    e.add_to(&mut ws.sx, c * r);
                }
            }
        }

        match grad {
            Some(grad) => {
                backward(&ws, self.cfg.t_s, grad);
                cost += add_rate_terms(&inputs, &self.u_prev, &self.cfg.q2, grad);
            }
            None => cost += rate_cost(&inputs, &self.u_prev, &self.cfg.q2),
        }
        Ok(cost)
    }
}

impl<M: PredictionModel + ?Sized> NlpProblem for RacingOcp<'_, M> {
    fn dim(&self) -> usize {
        2 * self.cfg.horizon
    }

    fn bounds(&self) -> &BoxBounds {
        &self.bounds
    }

    fn cost_grad(&self, u: &[f64], grad: &mut [f64]) -> Result<f64, SolverError> {
        self.evaluate(u, None, Some(grad))
    }

    fn cost(&self, u: &[f64]) -> Result<f64, SolverError> {
        self.evaluate(u, None, None)
    }

    fn alm_dim(&self) -> usize {
        self.n_alm
    }

    fn alm_set(&self) -> Option<&IntervalSet> {
        Some(&self.alm_set)
    }

    fn pm_dim(&self) -> usize {
        self.n_pm
    }

    fn constraint_maps(&self, u: &[f64], f1: &mut [f64], f2: &mut [f64]) -> Result<(), SolverError> {
        self.check_dim(u)?;
        let v = self
            .constraint_values(u)
            .map_err(|e| SolverError::Evaluation(e.to_string()))?;
        f1.copy_from_slice(&v.alm);
        f2.copy_from_slice(&v.pm);
        Ok(())
    }

    fn constraint_maps_jt(&self, u: &[f64], w1: &[f64], w2: &[f64], out: &mut [f64]) -> Result<(), SolverError> {
        self.check_dim(u)?;
        let inputs = vec_to_inputs(u);
        let mut ws = Workspace::new(self.cfg.horizon);
        forward(&mut ws, &self.x0, &inputs, self.model, self.cfg.t_s, true)
            .map_err(|e| SolverError::Evaluation(e.to_string()))?;
        self.collect_entries(&mut ws);
        let (mut ia, mut ip) = (0, 0);
        let entries = std::mem::take(&mut ws.entries);
        for e in &entries {
            let weight = match e.treatment {
                Treatment::Alm => {
                    ia += 1;
                    w1[ia - 1]
                }
                Treatment::Penalty => {
                    ip += 1;
                    w2[ip - 1] * e.excess().signum() * (e.excess() != 0.0) as u8 as f64
                }
            };
            e.add_to(&mut ws.sx, weight);
        }
        let mut g = vec![0.0; out.len()];
        backward(&ws, self.cfg.t_s, &mut g);
        for (o, gi) in out.iter_mut().zip(g) {
            *o += gi;
        }
        Ok(())
    }

    fn augmented_cost_grad(&self, u: &[f64], terms: AlmTerms<'_>, grad: &mut [f64]) -> Result<f64, SolverError> {
        self.evaluate(u, Some(terms), Some(grad))
    }

    fn augmented_cost(&self, u: &[f64], terms: AlmTerms<'_>) -> Result<f64, SolverError> {
        self.evaluate(u, Some(terms), None)
    }
}

/// Moves per-step multipliers one step earlier; the freed tail restarts at zero.
fn shift_block(m: &mut [f64], per_step: usize) {
    if per_step == 0 || m.len() < per_step {
        return;
    }
    m.rotate_left(per_step);
    let tail = m.len() - per_step;
    m[tail..].iter_mut().for_each(|v| *v = 0.0);
}

/// One NMPC tick: reference from the look-ahead point, warm-started solve,
/// first input applied and the horizon shifted.
pub fn control_step<M: PredictionModel + ?Sized>(
    x: &VehicleState,
    layout: &TrackLayout,
    model: &M,
    cstate: &ControllerState,
    cfg: &OcpConfig,
    solver_cfg: &SolverConfig,
) -> Result<(ControlInput, HorizonSolution, ControllerState), ControllerError> {
    cfg.validate()?;
    if !x.is_finite() {
        return Err(ControllerError::InvalidState(*x));
    }
    if cstate.warm_start.len() != cfg.horizon {
        return Err(ControllerError::HorizonMismatch {
            expected: cfg.horizon,
            got: cstate.warm_start.len(),
        });
    }
    let line = &layout.center_line;
    let proj = line.project(x.position(), cstate.last_projection_index);
    let p_d = line.lookahead_reference(proj.index, cfg.lookahead);

    let ocp = RacingOcp::new(model, layout, cfg, *x, cstate.u_prev, p_d, proj.index);
    let mut u0 = inputs_to_vec(&cstate.warm_start);
    ocp.bounds().project_in_place(&mut u0);
    let warm = if cfg.warm_start_multipliers {
        cstate.alm.as_ref()
    } else {
        None
    };
    let solved = alm_pm_solve_warm(&ocp, &u0, warm, solver_cfg);

    let (inputs, solver, degraded) = match solved {
        Ok(sol) if sol.status != SolveStatus::InfeasiblePenaltyExhausted => (vec_to_inputs(&sol.u_star), Some(sol), false),
        Ok(sol) => (vec_to_inputs(&u0), Some(sol), true),
        Err(_) => (vec_to_inputs(&u0), None, true),
    };
    let applied = inputs[0];
    let predicted_states = rollout(x, &inputs, model, cfg.t_s).unwrap_or_else(|_| vec![*x]);

    let mut warm_start = inputs[1..].to_vec();
    warm_start.push(*inputs.last().expect("horizon >= 1"));
    let alm = match &solver {
        Some(sol) if !degraded => {
            // shift the boundary multipliers with the horizon
            let mut m = sol.multipliers.clone();
            let mut blocks = Vec::new();
            if cfg.boundary_treatment == Treatment::Alm {
                blocks.push((cfg.horizon, 1));
            }
            if cfg.obstacle_treatment == Treatment::Alm {
                let o = layout.obstacles.len();
                blocks.push(((cfg.horizon + 1) * o, o));
            }
            let mut start = 0;
            for (len, per_step) in blocks {
                shift_block(&mut m[start..start + len], per_step);
                start += len;
            }
            Some(AlmWarmStart {
                multipliers: m,
                penalty: if cfg.warm_start_penalty { sol.penalty } else { 0.0 },
            })
        }
        _ => None,
    };
    let next = ControllerState {
        u_prev: applied,
        warm_start,
        last_projection_index: Some(proj.index),
        alm,
    };
    Ok((
        applied,
        HorizonSolution {
            inputs,
            predicted_states,
            reference: p_d,
            projection_index: proj.index,
            solver,
            degraded,
        },
        next,
    ))
}
