use std::time::Instant;

use super::lbfgs::LbfgsHistory;
use super::{BoxBounds, NlpProblem, NlpSolution, SolveStatus, SolverConfig, SolverError};

const GAMMA_L_COEFF: f64 = 0.95;
const SIGMA_COEFF: f64 = 0.5 * (1.0 - GAMMA_L_COEFF) / 2.0;
const MAX_LIPSCHITZ_HALVINGS: usize = 40;
const MAX_LINE_SEARCH: usize = 10;
const MIN_LIPSCHITZ: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct InnerSolution {
    pub u: Vec<f64>,
    pub cost: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub residual: f64,
    pub converged: bool,
    pub trace: Vec<(f64, f64)>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm_inf(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

fn all_finite(a: &[f64]) -> bool {
    a.iter().all(|v| v.is_finite())
}

/// Forward-backward quantities at one point for a fixed step size.
struct Point {
    u: Vec<f64>,
    cost: f64,
    grad: Vec<f64>,
    /// `u - P(u - gamma grad)`
    fpr: Vec<f64>,
}

impl Point {
    fn update_fpr(&mut self, bounds: &BoxBounds, gamma: f64) {
        for i in 0..self.u.len() {
            let step = self.u[i] - gamma * self.grad[i];
            let proj = step.max(bounds.lower()[i]).min(bounds.upper()[i]);
            self.fpr[i] = self.u[i] - proj;
        }
    }

    fn fbe(&self, gamma: f64) -> f64 {
        self.cost - dot(&self.grad, &self.fpr) + dot(&self.fpr, &self.fpr) / (2.0 * gamma)
    }

    fn forward_backward(&self) -> Vec<f64> {
        self.u.iter().zip(&self.fpr).map(|(u, r)| u - r).collect()
    }
}

struct Evaluator<'a, F> {
    f: &'a mut F,
    count: usize,
}

impl<F> Evaluator<'_, F>
where
    F: FnMut(&[f64], Option<&mut [f64]>) -> Result<f64, SolverError>,
{
    fn eval(&mut self, u: &[f64], grad: &mut [f64]) -> Result<f64, SolverError> {
        self.count += 1;
        (self.f)(u, Some(grad))
    }

    fn cost(&mut self, u: &[f64]) -> Result<f64, SolverError> {
        self.count += 1;
        (self.f)(u, None)
    }
}

/// Minimizes a smooth function over a box.
///
/// `cost_grad` returns the cost and writes the gradient when asked for one.
/// Terminates when the
/// fixed-point residual `|u - P(u - gamma grad)|_inf / gamma <= tol`; the
/// returned point is the projected forward-backward step and lies in the box.
#[allow(clippy::too_many_arguments)]
pub fn panoc_minimize<F>(
    bounds: &BoxBounds,
    u0: &[f64],
    mut cost_grad: F,
    tol: f64,
    max_iters: usize,
    lbfgs_mem: usize,
    record_trace: bool,
) -> Result<InnerSolution, SolverError>
where
    F: FnMut(&[f64], Option<&mut [f64]>) -> Result<f64, SolverError>,
{
    let n = bounds.dim();
    if u0.len() != n {
        return Err(SolverError::DimensionMismatch {
            expected: n,
            got: u0.len(),
        });
    }
    let mut ev = Evaluator {
        f: &mut cost_grad,
        count: 0,
    };

    let mut u = u0.to_vec();
    bounds.project_in_place(&mut u);
    let mut cur = Point {
        grad: vec![0.0; n],
        fpr: vec![0.0; n],
        cost: 0.0,
        u,
    };
    cur.cost = ev.eval(&cur.u, &mut cur.grad)?;
    if !cur.cost.is_finite() || !all_finite(&cur.grad) {
        return Err(SolverError::NonFinite {
            what: "cost or gradient at the initial point",
            iterate: cur.u.clone(),
        });
    }

    // Lipschitz probe: coordinate-wise relative perturbation
    let h: Vec<f64> = cur.u.iter().map(|v| 1e-6 * v.abs().max(1.0)).collect();
    let probe: Vec<f64> = cur.u.iter().zip(&h).map(|(u, d)| u + d).collect();
    let mut probe_grad = vec![0.0; n];
    ev.eval(&probe, &mut probe_grad)?;
    let dg: f64 = probe_grad
        .iter()
        .zip(&cur.grad)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let mut lipschitz = dg / dot(&h, &h).sqrt();
    if !lipschitz.is_finite() || lipschitz < MIN_LIPSCHITZ {
        lipschitz = MIN_LIPSCHITZ.max(if lipschitz.is_finite() { lipschitz } else { 1.0 });
    }
    let mut gamma = GAMMA_L_COEFF / lipschitz;

    let mut lbfgs = LbfgsHistory::new(lbfgs_mem);
    let mut trace = Vec::new();
    let mut prev: Option<(Vec<f64>, Vec<f64>)> = None;

    let mut iterations = 0;
    cur.update_fpr(bounds, gamma);

    loop {
        // Backtrack on gamma until the quadratic upper bound holds at the
        // forward-backward point.
        let mut bar = cur.forward_backward();
        let mut bar_cost = ev.cost(&bar)?;
        let mut halvings = 0;
        loop {
            let fpr2 = dot(&cur.fpr, &cur.fpr);
            let bound = cur.cost - dot(&cur.grad, &cur.fpr)
                + GAMMA_L_COEFF / (2.0 * gamma) * fpr2
                + 1e-12 * (1.0 + cur.cost.abs());
            if bar_cost.is_finite() && bar_cost <= bound {
                break;
            }
            if halvings == MAX_LIPSCHITZ_HALVINGS {
                if bar_cost.is_finite() {
                    break;
                }
                return Err(SolverError::NonFinite {
                    what: "cost at the forward-backward point",
                    iterate: bar,
                });
            }
            gamma /= 2.0;
            halvings += 1;
            lbfgs.reset();
            prev = None;
            cur.update_fpr(bounds, gamma);
            bar = cur.forward_backward();
            bar_cost = ev.cost(&bar)?;
        }

        let residual = norm_inf(&cur.fpr) / gamma;
        if residual <= tol || iterations >= max_iters {
            return Ok(InnerSolution {
                u: bar,
                cost: bar_cost,
                iterations,
                evaluations: ev.count,
                residual,
                converged: residual <= tol,
                trace,
            });
        }

        if let Some((u_prev, fpr_prev)) = prev.take() {
            let s: Vec<f64> = cur.u.iter().zip(&u_prev).map(|(a, b)| a - b).collect();
            let y: Vec<f64> = cur.fpr.iter().zip(&fpr_prev).map(|(a, b)| a - b).collect();
            lbfgs.push(s, y);
        }
        let qn = lbfgs.apply(&cur.fpr);

        let fbe = cur.fbe(gamma);
        let sigma = SIGMA_COEFF / gamma;
        let threshold = fbe - sigma * dot(&cur.fpr, &cur.fpr);

        let mut tau = 1.0;
        let mut trial = Point {
            u: vec![0.0; n],
            cost: 0.0,
            grad: vec![0.0; n],
            fpr: vec![0.0; n],
        };
        let mut ls = 0;
        loop {
            if tau == 0.0 {
                trial.u.copy_from_slice(&bar);
                trial.cost = ev.eval(&trial.u, &mut trial.grad)?;
            } else {
                for i in 0..n {
                    trial.u[i] = cur.u[i] - (1.0 - tau) * cur.fpr[i] - tau * qn[i];
                }
                trial.cost = ev.eval(&trial.u, &mut trial.grad)?;
            }
            let finite = trial.cost.is_finite() && all_finite(&trial.grad);
            if finite {
                trial.update_fpr(bounds, gamma);
                let trial_fbe = trial.fbe(gamma);
                if trial_fbe <= threshold || tau == 0.0 {
                    if record_trace {
                        trace.push((fbe, trial_fbe));
                    }
                    break;
                }
            } else if tau == 0.0 {
                return Err(SolverError::NonFinite {
                    what: "cost or gradient during line search",
                    iterate: trial.u.clone(),
                });
            }
            ls += 1;
            tau = if ls >= MAX_LINE_SEARCH { 0.0 } else { tau / 2.0 };
        }

        prev = Some((std::mem::take(&mut cur.u), std::mem::take(&mut cur.fpr)));
        cur = trial;
        iterations += 1;
    }
}

/// Solves the box-constrained part of `problem` only (constraint maps are ignored).
pub fn panoc_solve<P: NlpProblem + ?Sized>(
    problem: &P,
    u0: &[f64],
    cfg: &SolverConfig,
) -> Result<NlpSolution, SolverError> {
    cfg.validate()?;
    let start = Instant::now();
    let inner = panoc_minimize(
        problem.bounds(),
        u0,
        |u, g| match g {
            Some(g) => problem.cost_grad(u, g),
            None => problem.cost(u),
        },
        cfg.eps_inner,
        cfg.max_inner_iters,
        cfg.lbfgs_mem,
        cfg.record_trace,
    )?;
    Ok(NlpSolution {
        status: if inner.converged {
            SolveStatus::Converged
        } else {
            SolveStatus::MaxIterations
        },
        cost: inner.cost,
        u_star: inner.u,
        inner_iters: inner.iterations,
        outer_iters: 1,
        fbe_residual: inner.residual,
        constraint_violation: 0.0,
        multipliers: Vec::new(),
        penalty: 0.0,
        solve_time: start.elapsed().as_secs_f64(),
        fbe_trace: inner.trace,
    })
}
