use std::collections::VecDeque;

/// Ring buffer of `(s, y)` curvature pairs, most recent at the front.
#[derive(Debug, Clone)]
pub struct LbfgsHistory {
    mem: usize,
    s: VecDeque<Vec<f64>>,
    y: VecDeque<Vec<f64>>,
    rho: VecDeque<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl LbfgsHistory {
    pub fn new(mem: usize) -> Self {
        assert!(mem > 0, "L-BFGS memory must be positive");
        Self {
            mem,
            s: VecDeque::with_capacity(mem),
            y: VecDeque::with_capacity(mem),
            rho: VecDeque::with_capacity(mem),
        }
    }

    pub fn len(&self) -> usize {
        self.s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s.is_empty()
    }

    pub fn reset(&mut self) {
        self.s.clear();
        self.y.clear();
        self.rho.clear();
    }

    /// Stores the pair unless it violates the curvature condition `s'y > 0`
    /// (relative to `|s||y|`). Returns whether it was kept.
    pub fn push(&mut self, s: Vec<f64>, y: Vec<f64>) -> bool {
        let sy = dot(&s, &y);
        let scale = dot(&s, &s).sqrt() * dot(&y, &y).sqrt();
        if !(sy.is_finite() && sy > f64::EPSILON * scale && sy > 0.0) {
            return false;
        }
        if self.s.len() == self.mem {
            self.s.pop_back();
            self.y.pop_back();
            self.rho.pop_back();
        }
        self.rho.push_front(1.0 / sy);
        self.s.push_front(s);
        self.y.push_front(y);
        true
    }

    /// Two-loop recursion: returns `H g` with `H_0 = (s'y / y'y) I` from the
    /// newest pair, or the identity when the buffer is empty.
    pub fn apply(&self, g: &[f64]) -> Vec<f64> {
        let mut q = g.to_vec();
        let k = self.s.len();
        let mut alpha = vec![0.0; k];
        for i in 0..k {
            alpha[i] = self.rho[i] * dot(&self.s[i], &q);
            for (qj, yj) in q.iter_mut().zip(&self.y[i]) {
                *qj -= alpha[i] * yj;
            }
        }
        let gamma0 = if k > 0 {
            1.0 / (self.rho[0] * dot(&self.y[0], &self.y[0]))
        } else {
            1.0
        };
        for v in q.iter_mut() {
            *v *= gamma0;
        }
        for i in (0..k).rev() {
            let beta = self.rho[i] * dot(&self.y[i], &q);
            for (qj, sj) in q.iter_mut().zip(&self.s[i]) {
                *qj += (alpha[i] - beta) * sj;
            }
        }
        q
    }
}

/// Quasi-Newton descent direction `-H g`.
pub fn lbfgs_direction(history: &LbfgsHistory, g: &[f64]) -> Vec<f64> {
    history.apply(g).into_iter().map(|v| -v).collect()
}
