//! Least-squares identification of the tire and drivetrain coefficients from
//! logged drives, scored on one-step velocity predictions.

use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{
    state_derivative, velocity_rate_param_jacobian, ChassisParams, ControlInput, ModelError, VehicleParams, VehicleState,
};
use crate::solver::{panoc_solve, BoxBounds, NlpProblem, SolveStatus, SolverConfig, SolverError};

/// Records slower than this are left out of the fit; the slip-angle clamp
/// dominates there.
pub const MIN_FIT_SPEED: f64 = 0.3;

/// Allowed relative deviation of a timestamp gap from the nominal interval.
const DT_TOLERANCE: f64 = 0.05;

pub const CSV_HEADER: [&str; 9] = ["t", "p_x", "p_y", "phi", "v_x", "v_y", "omega", "d", "delta"];

#[derive(Debug, Error)]
pub enum IdentError {
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("invalid parameter bounds: {0}")]
    InvalidBounds(String),
    #[error("no usable records left after exclusion")]
    EmptyDataset,
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("{path}: {source}")]
    Csv { path: String, source: csv::Error },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub t: f64,
    pub state: VehicleState,
    pub input: ControlInput,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct CsvRow {
    t: f64,
    p_x: f64,
    p_y: f64,
    phi: f64,
    v_x: f64,
    v_y: f64,
    omega: f64,
    d: f64,
    delta: f64,
}

impl From<&LogRecord> for CsvRow {
    fn from(r: &LogRecord) -> Self {
        let s = &r.state;
        Self {
            t: r.t,
            p_x: s.p_x,
            p_y: s.p_y,
            phi: s.phi,
            v_x: s.v_x,
            v_y: s.v_y,
            omega: s.omega,
            d: r.input.d,
            delta: r.input.delta,
        }
    }
}

impl From<CsvRow> for LogRecord {
    fn from(r: CsvRow) -> Self {
        Self {
            t: r.t,
            state: VehicleState::new(r.p_x, r.p_y, r.phi, r.v_x, r.v_y, r.omega),
            input: ControlInput::new(r.d, r.delta),
        }
    }
}

/// Uniformly sampled drive log.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    records: Vec<LogRecord>,
    dt: f64,
}

impl Dataset {
    pub fn new(records: Vec<LogRecord>, dt: f64) -> Result<Self, IdentError> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(IdentError::InvalidDataset(format!("sampling interval must be > 0, got {dt}")));
        }
        if records.len() < 2 {
            return Err(IdentError::InvalidDataset(format!(
                "need at least 2 records, got {}",
                records.len()
            )));
        }
        for (i, r) in records.iter().enumerate() {
            if !(r.t.is_finite() && r.state.is_finite() && r.input.is_finite()) {
                return Err(IdentError::InvalidDataset(format!("record {i} is not finite")));
            }
        }
        for (i, w) in records.windows(2).enumerate() {
            let gap = w[1].t - w[0].t;
            if (gap - dt).abs() > DT_TOLERANCE * dt {
                return Err(IdentError::InvalidDataset(format!(
                    "gap between records {i} and {} is {gap} s, expected {dt} s +/- 5%",
                    i + 1
                )));
            }
        }
        Ok(Self { records, dt })
    }

    /// Builds a dataset taking the sampling interval from the mean timestamp gap.
    pub fn from_records(records: Vec<LogRecord>) -> Result<Self, IdentError> {
        if records.len() < 2 {
            return Err(IdentError::InvalidDataset(format!(
                "need at least 2 records, got {}",
                records.len()
            )));
        }
        let span = records[records.len() - 1].t - records[0].t;
        let dt = span / (records.len() - 1) as f64;
        Self::new(records, dt)
    }

    pub fn records(&self) -> &[LogRecord] {
        &self.records
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn write_csv<W: io::Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        if self.records.is_empty() {
            w.write_record(CSV_HEADER)?;
        }
        for r in &self.records {
            w.serialize(CsvRow::from(r))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: io::Read>(input: R) -> Result<Self, IdentError> {
        let mut rdr = csv::Reader::from_reader(input);
        let header = rdr
            .headers()
            .map_err(|source| IdentError::Csv {
                path: "<input>".into(),
                source,
            })?
            .clone();
        if header.iter().ne(CSV_HEADER) {
            return Err(IdentError::InvalidDataset(format!(
                "expected header {}, got {}",
                CSV_HEADER.join(","),
                header.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut records = Vec::new();
        for row in rdr.deserialize::<CsvRow>() {
            let row = row.map_err(|source| IdentError::Csv {
                path: "<input>".into(),
                source,
            })?;
            records.push(LogRecord::from(row));
        }
        Self::from_records(records)
    }

    pub fn save(&self, path: &Path) -> Result<(), IdentError> {
        let file = std::fs::File::create(path).map_err(|source| IdentError::Io {
            path: path.display().to_string(),
            source,
        })?;
        self.write_csv(io::BufWriter::new(file)).map_err(|source| IdentError::Csv {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, IdentError> {
        let file = std::fs::File::open(path).map_err(|source| IdentError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::read_csv(io::BufReader::new(file)).map_err(|e| match e {
            IdentError::Csv { source, .. } => IdentError::Csv {
                path: path.display().to_string(),
                source,
            },
            IdentError::InvalidDataset(msg) => IdentError::InvalidDataset(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

/// Admissible box for `zeta`, ordered as [`VehicleParams::zeta`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBounds {
    pub zeta_lo: [f64; 10],
    pub zeta_hi: [f64; 10],
}

impl ParamBounds {
    pub fn new(zeta_lo: [f64; 10], zeta_hi: [f64; 10]) -> Result<Self, IdentError> {
        let b = Self { zeta_lo, zeta_hi };
        b.validate()?;
        Ok(b)
    }

    /// `zeta * (1 -/+ frac)` entrywise.
    pub fn around(zeta: &[f64; 10], frac: f64) -> Result<Self, IdentError> {
        Self::new(zeta.map(|z| z * (1.0 - frac)), zeta.map(|z| z * (1.0 + frac)))
    }

    pub fn validate(&self) -> Result<(), IdentError> {
        for i in 0..10 {
            let (lo, hi) = (self.zeta_lo[i], self.zeta_hi[i]);
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(IdentError::InvalidBounds(format!("entry {i}: [{lo}, {hi}]")));
            }
            // B, C, D of both axles
            if i < 6 && lo <= 0.0 {
                return Err(IdentError::InvalidBounds(format!(
                    "tire coefficient {i} needs a positive lower bound, got {lo}"
                )));
            }
        }
        Ok(())
    }

    pub fn contains(&self, zeta: &[f64; 10]) -> bool {
        (0..10).all(|i| self.zeta_lo[i] <= zeta[i] && zeta[i] <= self.zeta_hi[i])
    }

    pub fn midpoint(&self) -> [f64; 10] {
        std::array::from_fn(|i| 0.5 * (self.zeta_lo[i] + self.zeta_hi[i]))
    }

    fn width(&self, i: usize) -> f64 {
        let w = self.zeta_hi[i] - self.zeta_lo[i];
        if w > 0.0 {
            w
        } else {
            1.0
        }
    }

    fn normalize(&self, zeta: &[f64; 10]) -> [f64; 10] {
        std::array::from_fn(|i| (zeta[i] - self.zeta_lo[i]) / self.width(i))
    }

    fn denormalize(&self, theta: &[f64]) -> [f64; 10] {
        std::array::from_fn(|i| (self.zeta_lo[i] + theta[i] * self.width(i)).clamp(self.zeta_lo[i], self.zeta_hi[i]))
    }
}

/// Velocities after one Euler step of the model from `record`.
pub fn one_step_predict(record: &LogRecord, zeta: &[f64; 10], fixed: &ChassisParams, dt: f64) -> Result<[f64; 3], ModelError> {
    let params = VehicleParams {
        chassis: *fixed,
        ..Default::default()
    }
    .with_zeta(zeta);
    let rate = state_derivative(&record.state, &record.input, &params)?;
    let s = &record.state;
    Ok([s.v_x + dt * rate.v_x, s.v_y + dt * rate.v_y, s.omega + dt * rate.omega])
}

/// Measured-minus-predicted velocities for each consecutive pair `(k, k+1)`;
/// `None` where record `k` is excluded (too slow or non-finite prediction).
pub fn one_step_residuals(dataset: &Dataset, zeta: &[f64; 10], fixed: &ChassisParams) -> Vec<Option<[f64; 3]>> {
    let dt = dataset.dt;
    dataset
        .records
        .windows(2)
        .map(|w| {
            if w[0].state.v_x < MIN_FIT_SPEED {
                return None;
            }
            let hat = one_step_predict(&w[0], zeta, fixed, dt).ok()?;
            let next = &w[1].state;
            let r = [next.v_x - hat[0], next.v_y - hat[1], next.omega - hat[2]];
            r.iter().all(|v| v.is_finite()).then_some(r)
        })
        .collect()
}

/// Sum of squared one-step residuals over all channels, with its gradient.
pub fn identification_cost(dataset: &Dataset, zeta: &[f64; 10], fixed: &ChassisParams) -> Result<(f64, [f64; 10]), IdentError> {
    let params = VehicleParams {
        chassis: *fixed,
        ..Default::default()
    }
    .with_zeta(zeta);
    let dt = dataset.dt;
    let mut cost = 0.0;
    let mut grad = [0.0; 10];
    let mut used = 0;
    for (w, r) in dataset.records.windows(2).zip(one_step_residuals(dataset, zeta, fixed)) {
        let Some(r) = r else { continue };
        used += 1;
        let jac = velocity_rate_param_jacobian(&w[0].state, &w[0].input, &params)?;
        for c in 0..3 {
            cost += r[c] * r[c];
            for (g, j) in grad.iter_mut().zip(&jac[c]) {
                *g -= 2.0 * dt * r[c] * j;
            }
        }
    }
    if used == 0 {
        return Err(IdentError::EmptyDataset);
    }
    Ok((cost, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub status: SolveStatus,
    pub iterations: usize,
    pub initial_cost: f64,
    pub cost: f64,
    /// One-step RMSE of `(v_x, v_y, omega)` at the identified parameters.
    pub rmse: [f64; 3],
    pub used_records: usize,
    pub excluded_records: usize,
    /// Timestamp, measured and predicted velocities of each fitted sample.
    pub traces: Vec<FitSample>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitSample {
    pub t: f64,
    pub measured: [f64; 3],
    pub predicted: [f64; 3],
}

impl FitReport {
    pub fn write_traces_csv<W: io::Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "v_x", "v_y", "omega", "v_x_hat", "v_y_hat", "omega_hat"])?;
        for s in &self.traces {
            let m = s.measured;
            let p = s.predicted;
            w.write_record([s.t, m[0], m[1], m[2], p[0], p[1], p[2]].map(|v| v.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Tight tolerances: a noiseless log should be fit to rounding level.
pub fn default_ident_solver() -> SolverConfig {
    SolverConfig {
        eps_inner: 1e-12,
        max_inner_iters: 20_000,
        lbfgs_mem: 20,
        ..Default::default()
    }
}

/// Cost in normalized coordinates `theta = (zeta - lo) / (hi - lo)`.
struct IdentProblem<'a> {
    dataset: &'a Dataset,
    bounds: &'a ParamBounds,
    fixed: &'a ChassisParams,
    unit_box: BoxBounds,
}

impl NlpProblem for IdentProblem<'_> {
    fn dim(&self) -> usize {
        10
    }

    fn bounds(&self) -> &BoxBounds {
        &self.unit_box
    }

    fn cost_grad(&self, theta: &[f64], grad: &mut [f64]) -> Result<f64, SolverError> {
        let zeta = self.bounds.denormalize(theta);
        let (cost, g) =
            identification_cost(self.dataset, &zeta, self.fixed).map_err(|e| SolverError::Evaluation(e.to_string()))?;
        for i in 0..10 {
            grad[i] = g[i] * self.bounds.width(i);
        }
        Ok(cost)
    }
}

/// Fits `zeta` inside `bounds` starting from `zeta0`. Hitting the iteration
/// limit is not an error: the best iterate comes back with that status.
pub fn identify(
    dataset: &Dataset,
    bounds: &ParamBounds,
    zeta0: &[f64; 10],
    fixed: &ChassisParams,
    solver_cfg: &SolverConfig,
) -> Result<([f64; 10], FitReport), IdentError> {
    bounds.validate()?;
    if !bounds.contains(zeta0) {
        return Err(IdentError::InvalidBounds("initial guess lies outside the bounds".into()));
    }
    let (initial_cost, _) = identification_cost(dataset, zeta0, fixed)?;
    let problem = IdentProblem {
        dataset,
        bounds,
        fixed,
        unit_box: BoxBounds::new(vec![0.0; 10], vec![1.0; 10])?,
    };
    let sol = panoc_solve(&problem, &bounds.normalize(zeta0), solver_cfg)?;
    let mut zeta = bounds.denormalize(&sol.u_star);
    let (mut cost, _) = identification_cost(dataset, &zeta, fixed)?;
    if cost > initial_cost {
        zeta = *zeta0;
        cost = initial_cost;
    }

    let residuals = one_step_residuals(dataset, &zeta, fixed);
    let mut sq = [0.0; 3];
    let mut traces = Vec::new();
    for (w, r) in dataset.records.windows(2).zip(&residuals) {
        let Some(r) = r else { continue };
        let next = &w[1].state;
        let measured = [next.v_x, next.v_y, next.omega];
        for c in 0..3 {
            sq[c] += r[c] * r[c];
        }
        traces.push(FitSample {
            t: w[1].t,
            measured,
            predicted: std::array::from_fn(|c| measured[c] - r[c]),
        });
    }
    let used = traces.len();
    Ok((
        zeta,
        FitReport {
            status: sol.status,
            iterations: sol.inner_iters,
            initial_cost,
            cost,
            rmse: sq.map(|s| (s / used as f64).sqrt()),
            used_records: used,
            excluded_records: residuals.len() - used,
            traces,
        },
    ))
}
