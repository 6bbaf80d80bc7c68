use std::time::Instant;

use super::panoc::panoc_minimize;
use super::{AlmTerms, NlpProblem, NlpSolution, SolveStatus, SolverConfig, SolverError};

/// Multipliers and penalty carried from a previous solve.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AlmWarmStart {
    pub multipliers: Vec<f64>,
    pub penalty: f64,
}

pub fn alm_pm_solve<P: NlpProblem + ?Sized>(
    problem: &P,
    u0: &[f64],
    cfg: &SolverConfig,
) -> Result<NlpSolution, SolverError> {
    alm_pm_solve_warm(problem, u0, None, cfg)
}

/// Augmented-Lagrangian / penalty outer loop around the inner box solver.
///
/// Without constraint mappings this reduces to a single inner solve at
/// `eps_inner`.
pub fn alm_pm_solve_warm<P: NlpProblem + ?Sized>(
    problem: &P,
    u0: &[f64],
    warm: Option<&AlmWarmStart>,
    cfg: &SolverConfig,
) -> Result<NlpSolution, SolverError> {
    cfg.validate()?;
    let start = Instant::now();
    let n = problem.dim();
    if u0.len() != n {
        return Err(SolverError::DimensionMismatch {
            expected: n,
            got: u0.len(),
        });
    }
    let (n1, n2) = (problem.alm_dim(), problem.pm_dim());
    let constrained = n1 + n2 > 0;
    let set = if n1 > 0 {
        let s = problem
            .alm_set()
            .ok_or_else(|| SolverError::InvalidConfig("alm_dim > 0 but no target set".into()))?;
        if s.dim() != n1 {
            return Err(SolverError::DimensionMismatch {
                expected: n1,
                got: s.dim(),
            });
        }
        Some(s)
    } else {
        None
    };

    let mut y = vec![0.0; n1];
    let mut penalty = cfg.penalty_init;
    if let Some(w) = warm {
        if w.multipliers.len() == n1 {
            y.copy_from_slice(&w.multipliers);
            for v in &mut y {
                *v = v.clamp(-cfg.multiplier_bound, cfg.multiplier_bound);
            }
        }
        if w.penalty.is_finite() && w.penalty > 0.0 {
            penalty = w.penalty.min(cfg.max_penalty);
        }
    }

    let mut inner_tol = if constrained {
        cfg.initial_inner_tol.max(cfg.eps_inner)
    } else {
        cfg.eps_inner
    };
    let mut u = u0.to_vec();
    let mut inner_total = 0;
    let mut trace = Vec::new();
    let mut f1 = vec![0.0; n1];
    let mut f2 = vec![0.0; n2];
    let mut prev_violation = f64::INFINITY;
    let mut violation = 0.0;
    let mut cost;
    let mut residual;
    let mut outer = 0;

    let status = loop {
        outer += 1;
        let inner = {
            let y_ref = &y;
            let c = penalty;
            panoc_minimize(
                problem.bounds(),
                &u,
                |v, g| {
                    let terms = AlmTerms {
                        multipliers: y_ref,
                        penalty: c,
                    };
                    match g {
                        Some(g) => problem.augmented_cost_grad(v, terms, g),
                        None => problem.augmented_cost(v, terms),
                    }
                },
                inner_tol,
                cfg.max_inner_iters,
                cfg.lbfgs_mem,
                cfg.record_trace,
            )?
        };
        inner_total += inner.iterations;
        trace.extend(inner.trace);
        u = inner.u;
        residual = inner.residual;
        let inner_done = inner.converged && inner_tol <= cfg.eps_inner;

        if !constrained {
            cost = inner.cost;
            break if inner.converged {
                SolveStatus::Converged
            } else {
                SolveStatus::MaxIterations
            };
        }

        let mut scratch = vec![0.0; n];
        cost = problem.cost_grad(&u, &mut scratch)?;
        problem.constraint_maps(&u, &mut f1, &mut f2)?;
        violation = f2.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if let Some(set) = set {
            for i in 0..n1 {
                let w = f1[i] + y[i] / penalty;
                let pw = w.max(set.lower()[i]).min(set.upper()[i]);
                violation = violation.max((f1[i] - pw).abs());
                y[i] = (penalty * (w - pw)).clamp(-cfg.multiplier_bound, cfg.multiplier_bound);
            }
        }
        if !violation.is_finite() {
            return Err(SolverError::NonFinite {
                what: "constraint violation",
                iterate: u,
            });
        }

        if inner_done && violation <= cfg.eps_outer {
            break SolveStatus::Converged;
        }
        if outer >= cfg.max_outer_iters {
            break SolveStatus::MaxIterations;
        }
        if violation > cfg.eps_outer && (outer == 1 || violation > cfg.sufficient_decrease * prev_violation) {
            if penalty >= cfg.max_penalty {
                break SolveStatus::InfeasiblePenaltyExhausted;
            }
            penalty = (penalty * cfg.penalty_update_factor).min(cfg.max_penalty);
        }
        prev_violation = violation;
        inner_tol = (inner_tol * cfg.inner_tol_shrink).max(cfg.eps_inner);
    };

    Ok(NlpSolution {
        u_star: u,
        status,
        cost,
        inner_iters: inner_total,
        outer_iters: outer,
        fbe_residual: residual,
        constraint_violation: violation,
        multipliers: y,
        penalty,
        solve_time: start.elapsed().as_secs_f64(),
        fbe_trace: trace,
    })
}
