//! Closed-loop simulation, lap timing, metrics, synthetic identification data
//! and result export.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::{control_step, ControllerError, ControllerState, OcpConfig};
use crate::dynamics::{
    plant_state_derivative, state_derivative, step_euler, step_rk4_with, ControlInput, ModelError, VehicleParams,
    VehicleState,
};
use crate::ident::{Dataset, IdentError, LogRecord};
use crate::solver::{SolveStatus, SolverConfig};
use crate::track::{build_track, Point, TrackError, TrackLayout, TrackSpec};

/// Version of the exported file layout and of `metrics.schema.json`.
pub const SCHEMA_VERSION: u32 = 1;

/// Upper edge of the last regular histogram bin, ms.
pub const HISTOGRAM_LIMIT_MS: usize = 33;

/// Positional slack granted to the penalty-treated obstacle constraint.
pub const OBSTACLE_SLACK: f64 = 0.05;
/// Tolerances on the speed bounds when counting violations.
pub const V_X_LOWER_SLACK: f64 = 1e-6;
pub const V_X_UPPER_SLACK: f64 = 1e-3;

/// Consecutive degraded ticks tolerated before the run is aborted.
pub const MAX_DEGRADED_STREAK: usize = 10;

pub const METRICS_SCHEMA: &str = include_str!("../schema/metrics.schema.json");

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid scenario: {0}")]
    InvalidConfig(String),
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("{path}: {msg}")]
    Format { path: String, msg: String },
    #[error(transparent)]
    Track(#[from] TrackError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error(transparent)]
    Ident(#[from] IdentError),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn format_err(path: &Path, msg: impl ToString) -> HarnessError {
    HarnessError::Format {
        path: path.display().to_string(),
        msg: msg.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackSource {
    Stadium,
    Winding,
    Spec(TrackSpec),
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamSource {
    /// The identified reference vehicle.
    Default,
    Inline(VehicleParams),
    File(PathBuf),
}

/// How the simulated car is advanced between controller ticks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlantModel {
    /// RK4 at `plant_dt` with the non-reversing drivetrain.
    Rk4,
    /// One Euler step of the prediction model per tick; plant and model coincide.
    PredictionEuler,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub track: TrackSource,
    pub vehicle: ParamSource,
    pub ocp: OcpConfig,
    pub solver: SolverConfig,
    pub plant: PlantModel,
    pub plant_dt: f64,
    pub controller_period: f64,
    pub laps: usize,
    pub initial_state: VehicleState,
    pub obstacles: bool,
    /// Simulated-time cap, s; the run aborts when it is reached.
    pub time_limit: f64,
}

/// Real-time settings for the racing OCP: looser than [`SolverConfig::default`]
/// so that every tick fits the controller period.
pub fn racing_solver_config() -> SolverConfig {
    SolverConfig {
        eps_inner: 1e-3,
        eps_outer: 1e-2,
        max_inner_iters: 100,
        max_outer_iters: 5,
        ..Default::default()
    }
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        let ocp = OcpConfig::default();
        Self {
            track: TrackSource::Stadium,
            vehicle: ParamSource::Default,
            controller_period: ocp.t_s,
            ocp,
            solver: racing_solver_config(),
            plant: PlantModel::Rk4,
            plant_dt: 0.001,
            laps: 3,
            initial_state: VehicleState::new(-0.2, 0.0, 0.0, 1.0, 0.0, 0.0),
            obstacles: false,
            time_limit: 120.0,
        }
    }
}

impl ScenarioConfig {
    /// Reads a JSON scenario; relative file paths inside are taken relative to it.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut cfg: Self = serde_json::from_str(&text).map_err(|e| format_err(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let TrackSource::File(p) = &mut cfg.track {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let ParamSource::File(p) = &mut cfg.vehicle {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Plant substeps per controller tick.
    pub fn substeps(&self) -> Result<usize, HarnessError> {
        if !(self.plant_dt.is_finite() && self.plant_dt > 0.0) {
            return Err(HarnessError::InvalidConfig(format!("plant_dt must be > 0, got {}", self.plant_dt)));
        }
        let ratio = self.controller_period / self.plant_dt;
        let n = ratio.round();
        if !(n >= 1.0 && (ratio - n).abs() < 1e-9 * n) {
            return Err(HarnessError::InvalidConfig(format!(
                "controller period {} is not an integer multiple of plant_dt {}",
                self.controller_period, self.plant_dt
            )));
        }
        Ok(n as usize)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.substeps()?;
        if self.laps == 0 {
            return Err(HarnessError::InvalidConfig("lap count must be >= 1".into()));
        }
        if !(self.time_limit > 0.0) {
            return Err(HarnessError::InvalidConfig("time_limit must be > 0".into()));
        }
        if !self.initial_state.is_finite() {
            return Err(HarnessError::InvalidConfig("initial state is not finite".into()));
        }
        self.ocp.validate()?;
        self.solver
            .validate()
            .map_err(|e| HarnessError::InvalidConfig(e.to_string()))?;
        Ok(())
    }

    pub fn layout(&self) -> Result<TrackLayout, HarnessError> {
        let layout = match &self.track {
            TrackSource::Stadium => build_track(&TrackSpec::stadium_with_obstacles())?,
            TrackSource::Winding => build_track(&TrackSpec::winding())?,
            TrackSource::Spec(spec) => build_track(spec)?,
            TrackSource::File(path) => TrackLayout::load(path)?,
        };
        Ok(if self.obstacles {
            layout
        } else {
            layout.without_obstacles()
        })
    }

    pub fn vehicle_params(&self) -> Result<VehicleParams, HarnessError> {
        let params = match &self.vehicle {
            ParamSource::Default => VehicleParams::default(),
            ParamSource::Inline(p) => *p,
            ParamSource::File(path) => {
                let text = fs::read_to_string(path).map_err(io_err(path))?;
                serde_json::from_str(&text).map_err(|e| format_err(path, e))?
            }
        };
        params.validate()?;
        Ok(params)
    }
}

/// Directed start line. Only crossings from behind the line to ahead of it
/// (ahead = left of `a -> b`) count as lap boundaries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StartLine {
    pub a: Point,
    pub b: Point,
}

impl StartLine {
    /// Spans the corridor at the first center-line sample, left edge to right edge.
    pub fn at_track_start(layout: &TrackLayout) -> Self {
        let p = layout.center_line.point(0);
        let t = layout.center_line.tangent(0);
        let n = [-t[1], t[0]];
        let w = layout.r_g;
        Self {
            a: [p[0] + w * n[0], p[1] + w * n[1]],
            b: [p[0] - w * n[0], p[1] - w * n[1]],
        }
    }

    /// Positive ahead of the line.
    fn side(&self, p: Point) -> f64 {
        let e = [self.b[0] - self.a[0], self.b[1] - self.a[1]];
        e[0] * (p[1] - self.a[1]) - e[1] * (p[0] - self.a[0])
    }

    /// Time at which the move `p0 -> p1` over `[t0, t1]` crosses the line
    /// forwards, if it does. A sample lying on the line counts as crossed there.
    fn crossing(&self, (t0, p0): (f64, Point), (t1, p1): (f64, Point)) -> Option<f64> {
        let (s0, s1) = (self.side(p0), self.side(p1));
        if !(s0 < 0.0 && s1 >= 0.0) {
            return None;
        }
        let f = s0 / (s0 - s1);
        let x = [p0[0] + f * (p1[0] - p0[0]), p0[1] + f * (p1[1] - p0[1])];
        let e = [self.b[0] - self.a[0], self.b[1] - self.a[1]];
        let along = ((x[0] - self.a[0]) * e[0] + (x[1] - self.a[1]) * e[1]) / (e[0] * e[0] + e[1] * e[1]);
        (0.0..=1.0).contains(&along).then_some(t0 + f * (t1 - t0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickLog {
    pub t: f64,
    /// Plant state measured at the start of the tick.
    pub state: VehicleState,
    pub input: ControlInput,
    /// Model prediction of the next measured state.
    pub predicted_next: VehicleState,
    pub solve_time: f64,
    pub status: Option<SolveStatus>,
    pub inner_iters: usize,
    pub outer_iters: usize,
    pub degraded: bool,
    pub lateral_deviation: f64,
    /// Distance to the nearest obstacle center; `None` without obstacles.
    pub obstacle_distance: Option<f64>,
    /// Clearance radius of that obstacle.
    pub obstacle_gamma: Option<f64>,
    /// Center-line curvature at the car's projection.
    pub curvature: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Limits {
    pub corridor_half_width: f64,
    pub u_min: ControlInput,
    pub u_max: ControlInput,
    pub v_x_min: f64,
    pub v_x_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", content = "reason", rename_all = "snake_case")]
pub enum RunOutcome {
    Completed,
    Aborted(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub controller_period: f64,
    pub ticks: Vec<TickLog>,
    pub lap_starts: Vec<f64>,
    pub start_line: StartLine,
    pub limits: Limits,
    pub outcome: RunOutcome,
}

impl SimResult {
    pub fn is_aborted(&self) -> bool {
        matches!(self.outcome, RunOutcome::Aborted(_))
    }

    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        let text = serde_json::to_string(self).expect("result serializes");
        fs::write(path, text).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| format_err(path, e))
    }
}

fn nearest_obstacle(layout: &TrackLayout, p: Point) -> (Option<f64>, Option<f64>) {
    layout
        .obstacles
        .iter()
        .map(|o| (((p[0] - o.center[0]).powi(2) + (p[1] - o.center[1]).powi(2)).sqrt(), o.gamma))
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .map_or((None, None), |(d, g)| (Some(d), Some(g)))
}

/// Runs the controller against the simulated car until the configured number
/// of laps is completed. Plant failures, a persistent degraded controller and
/// the time limit end the run early with the log collected so far.
pub fn run_closed_loop(cfg: &ScenarioConfig) -> Result<SimResult, HarnessError> {
    cfg.validate()?;
    let layout = cfg.layout()?;
    let params = cfg.vehicle_params()?;
    let substeps = cfg.substeps()?;
    let period = cfg.controller_period;
    let start_line = StartLine::at_track_start(&layout);
    let curvature = layout.center_line.curvature_profile(5);

    let mut result = SimResult {
        controller_period: period,
        ticks: Vec::new(),
        lap_starts: Vec::new(),
        start_line,
        limits: Limits {
            corridor_half_width: layout.corridor_half_width(),
            u_min: cfg.ocp.u_min,
            u_max: cfg.ocp.u_max,
            v_x_min: cfg.ocp.v_x_min,
            v_x_max: cfg.ocp.v_x_max,
        },
        outcome: RunOutcome::Completed,
    };
    let mut cstate = ControllerState::initial(&cfg.ocp);
    let mut x = cfg.initial_state;
    let mut degraded_streak = 0;
    let max_ticks = (cfg.time_limit / period).ceil() as usize;

    for tick in 0..max_ticks {
        let t = tick as f64 * period;
        let started = Instant::now();
        let (u, hs, next) = control_step(&x, &layout, &params, &cstate, &cfg.ocp, &cfg.solver)?;
        let elapsed = started.elapsed().as_secs_f64();
        let sol = hs.solver.as_ref();
        let (obstacle_distance, obstacle_gamma) = nearest_obstacle(&layout, x.position());
        result.ticks.push(TickLog {
            t,
            state: x,
            input: u,
            predicted_next: hs.predicted_states.get(1).copied().unwrap_or(x),
            solve_time: sol.map_or(elapsed, |s| s.solve_time),
            status: sol.map(|s| s.status),
            inner_iters: sol.map_or(0, |s| s.inner_iters),
            outer_iters: sol.map_or(0, |s| s.outer_iters),
            degraded: hs.degraded,
            lateral_deviation: layout.center_line.lateral_deviation(x.position(), Some(hs.projection_index)),
            obstacle_distance,
            obstacle_gamma,
            curvature: curvature[hs.projection_index],
        });
        cstate = next;

        degraded_streak = if hs.degraded { degraded_streak + 1 } else { 0 };
        if degraded_streak > MAX_DEGRADED_STREAK {
            result.outcome = RunOutcome::Aborted(format!("controller degraded for {degraded_streak} consecutive ticks"));
            return Ok(result);
        }

        let prev = x;
        let stepped = match cfg.plant {
            PlantModel::Rk4 => (0..substeps).try_fold(x, |s, _| {
                step_rk4_with(&s, &u, cfg.plant_dt, |s, u| plant_state_derivative(s, u, &params))
            }),
            PlantModel::PredictionEuler => step_euler(&x, &u, period, &params),
        };
        x = match stepped {
            Ok(s) => s,
            Err(e) => {
                result.outcome = RunOutcome::Aborted(format!("plant failed at t = {t:.3} s: {e}"));
                return Ok(result);
            }
        };

        if let Some(tc) = start_line.crossing((t, prev.position()), (t + period, x.position())) {
            result.lap_starts.push(tc);
            if result.lap_starts.len() > cfg.laps {
                return Ok(result);
            }
        }
    }
    result.outcome = RunOutcome::Aborted(format!("time limit of {} s reached", cfg.time_limit));
    Ok(result)
}

/// Timestamps of forward crossings of `start_line` along the logged trajectory.
pub fn detect_laps(result: &SimResult, start_line: &StartLine) -> Vec<f64> {
    result
        .ticks
        .windows(2)
        .filter_map(|w| start_line.crossing((w[0].t, w[0].state.position()), (w[1].t, w[1].state.position())))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveTimeStats {
    pub mean_ms: f64,
    pub max_ms: f64,
    pub p99_ms: f64,
    /// 1 ms bins over `[0, 33)` ms followed by one overflow bin.
    pub histogram: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violations {
    pub corridor: usize,
    pub input: usize,
    pub speed: usize,
    pub obstacle: usize,
}

impl Violations {
    pub fn total(&self) -> usize {
        self.corridor + self.input + self.speed + self.obstacle
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub ticks: usize,
    pub aborted: bool,
    pub laps_completed: usize,
    pub lap_times: Vec<f64>,
    pub v_x_min: f64,
    pub v_x_mean: f64,
    pub v_x_max: f64,
    /// Mean `v_x` over ticks on the most and least curved quarters of the center line.
    pub v_x_mean_tightest_quarter: f64,
    pub v_x_mean_straightest_quarter: f64,
    pub max_lateral_deviation: f64,
    pub min_obstacle_distance: Option<f64>,
    pub violations: Violations,
    pub degraded_ticks: usize,
    pub solve_time: SolveTimeStats,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Zero-based index `ceil(q n) - 1` of the sorted sample.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

pub fn compute_metrics(result: &SimResult) -> Metrics {
    let ticks = &result.ticks;
    let lim = &result.limits;
    let vx = || ticks.iter().map(|k| k.state.v_x);

    let mut violations = Violations {
        corridor: 0,
        input: 0,
        speed: 0,
        obstacle: 0,
    };
    for k in ticks {
        if k.lateral_deviation > lim.corridor_half_width {
            violations.corridor += 1;
        }
        let u = k.input;
        if !(lim.u_min.d <= u.d && u.d <= lim.u_max.d && lim.u_min.delta <= u.delta && u.delta <= lim.u_max.delta) {
            violations.input += 1;
        }
        let v = k.state.v_x;
        if !(lim.v_x_min - V_X_LOWER_SLACK <= v && v <= lim.v_x_max + V_X_UPPER_SLACK) {
            violations.speed += 1;
        }
        if let (Some(d), Some(g)) = (k.obstacle_distance, k.obstacle_gamma) {
            if d < g - OBSTACLE_SLACK {
                violations.obstacle += 1;
            }
        }
    }

    let mut by_curv: Vec<(f64, f64)> = ticks.iter().map(|k| (k.curvature, k.state.v_x)).collect();
    by_curv.sort_by(|a, b| a.0.total_cmp(&b.0));
    let q = (by_curv.len() / 4).max(1).min(by_curv.len());

    let mut times: Vec<f64> = ticks.iter().map(|k| k.solve_time * 1e3).collect();
    let mut histogram = vec![0u64; HISTOGRAM_LIMIT_MS + 1];
    for &ms in &times {
        let bin = if ms.is_finite() && ms >= 0.0 {
            (ms.floor() as usize).min(HISTOGRAM_LIMIT_MS)
        } else {
            HISTOGRAM_LIMIT_MS
        };
        histogram[bin] += 1;
    }
    times.sort_by(f64::total_cmp);

    let lap_times: Vec<f64> = result.lap_starts.windows(2).map(|w| w[1] - w[0]).collect();
    Metrics {
        ticks: ticks.len(),
        aborted: result.is_aborted(),
        laps_completed: lap_times.len(),
        lap_times,
        v_x_min: vx().fold(f64::INFINITY, f64::min),
        v_x_mean: mean(vx()),
        v_x_max: vx().fold(f64::NEG_INFINITY, f64::max),
        v_x_mean_tightest_quarter: mean(by_curv[by_curv.len() - q..].iter().map(|p| p.1)),
        v_x_mean_straightest_quarter: mean(by_curv[..q].iter().map(|p| p.1)),
        max_lateral_deviation: ticks.iter().map(|k| k.lateral_deviation).fold(0.0, f64::max),
        min_obstacle_distance: ticks.iter().filter_map(|k| k.obstacle_distance).reduce(f64::min),
        violations,
        degraded_ticks: ticks.iter().filter(|k| k.degraded).count(),
        solve_time: SolveTimeStats {
            mean_ms: mean(times.iter().copied()),
            max_ms: times.last().copied().unwrap_or(f64::NAN),
            p99_ms: percentile(&times, 0.99),
            histogram,
        },
    }
}

/// Steering profile of one maneuver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Steering {
    Constant { delta: f64 },
    /// `amplitude * sin(2 pi f t)` with `f` swept linearly from `f0` to `f1`.
    Chirp { amplitude: f64, f0: f64, f1: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Maneuver {
    pub duration: f64,
    pub throttle: f64,
    pub steering: Steering,
}

impl Maneuver {
    fn input(&self, tau: f64) -> ControlInput {
        let delta = match self.steering {
            Steering::Constant { delta } => delta,
            Steering::Chirp { amplitude, f0, f1 } => {
                let k = (f1 - f0) / self.duration;
                let phase = 2.0 * std::f64::consts::PI * (f0 * tau + 0.5 * k * tau * tau);
                amplitude * phase.sin()
            }
        };
        ControlInput::new(self.throttle, delta)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManeuverSuite {
    pub name: String,
    pub dt: f64,
    pub initial_speed: f64,
    pub maneuvers: Vec<Maneuver>,
}

impl ManeuverSuite {
    /// Launch, coast-down, braking and constant-throttle steering sweeps;
    /// 83.7 s sampled every 50 ms.
    pub fn standard() -> Self {
        let straight = |duration: f64, throttle: f64| Maneuver {
            duration,
            throttle,
            steering: Steering::Constant { delta: 0.0 },
        };
        let sweep = |duration: f64, throttle: f64, amplitude: f64| Maneuver {
            duration,
            throttle,
            steering: Steering::Chirp {
                amplitude,
                f0: 0.2,
                f1: 1.0,
            },
        };
        Self {
            name: "standard".into(),
            dt: 0.05,
            initial_speed: 0.5,
            maneuvers: vec![
                straight(6.0, 1.0),
                straight(5.0, 0.25),
                straight(4.0, 0.8),
                straight(1.0, 0.0),
                straight(4.0, 0.6),
                sweep(12.0, 0.5, 0.3),
                straight(3.0, 0.9),
                sweep(12.0, 0.7, 0.2),
                straight(1.2, 0.0),
                straight(3.0, 0.4),
                sweep(12.0, 0.9, 0.15),
                Maneuver {
                    duration: 8.0,
                    throttle: 0.6,
                    steering: Steering::Constant { delta: 0.25 },
                },
                Maneuver {
                    duration: 8.0,
                    throttle: 0.8,
                    steering: Steering::Constant { delta: -0.15 },
                },
                straight(4.5, 0.3),
            ],
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "standard" => Some(Self::standard()),
            _ => None,
        }
    }

    pub fn duration(&self) -> f64 {
        self.maneuvers.iter().map(|m| m.duration).sum()
    }

    /// Number of records: one per sample interval of the total duration.
    pub fn samples(&self) -> usize {
        (self.duration() / self.dt).round() as usize
    }

    fn input_at(&self, t: f64) -> ControlInput {
        let mut start = 0.0;
        for m in &self.maneuvers {
            if t < start + m.duration {
                return m.input(t - start);
            }
            start += m.duration;
        }
        self.maneuvers.last().map_or(ControlInput::default(), |m| m.input(m.duration))
    }
}

/// Drives the maneuver suite with forward-Euler steps of the model at the
/// sampling interval, so that a one-step prediction with the generating
/// parameters reproduces the log exactly. `noise` is the standard deviation of
/// Gaussian noise added to the logged velocities.
pub fn generate_ident_data(
    suite: &ManeuverSuite,
    params: &VehicleParams,
    noise: f64,
    seed: u64,
) -> Result<Dataset, HarnessError> {
    params.validate()?;
    if !(noise.is_finite() && noise >= 0.0) {
        return Err(HarnessError::InvalidConfig(format!("noise level must be >= 0, got {noise}")));
    }
    let dist = Normal::new(0.0, noise).map_err(|e| HarnessError::InvalidConfig(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = suite.samples();
    let mut x = VehicleState::new(0.0, 0.0, 0.0, suite.initial_speed, 0.0, 0.0);
    let mut records = Vec::with_capacity(m);
    for k in 0..m {
        let t = k as f64 * suite.dt;
        let u = suite.input_at(t);
        let mut logged = x;
        if noise > 0.0 {
            logged.v_x += dist.sample(&mut rng);
            logged.v_y += dist.sample(&mut rng);
            logged.omega += dist.sample(&mut rng);
        }
        records.push(LogRecord {
            t,
            state: logged,
            input: u,
        });
        let rate = state_derivative(&x, &u, params)?;
        x = x.advanced(&rate, suite.dt);
    }
    Ok(Dataset::new(records, suite.dt)?)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), HarnessError> {
    fs::write(path, bytes).map_err(io_err(path))
}

fn csv_text(header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&r.join(","));
        out.push('\n');
    }
    out
}

pub const TRAJECTORY_HEADER: [&str; 10] =
    ["t", "p_x", "p_y", "phi", "v_x", "v_y", "omega", "lateral_deviation", "obstacle_distance", "degraded"];
pub const INPUTS_HEADER: [&str; 4] = ["t", "d", "delta", "delta_deg"];

/// Writes `trajectory.csv`, `inputs.csv`, `histogram.csv` and `metrics.json`
/// into `dir`, creating it if needed. Returns the written paths.
pub fn export_results(result: &SimResult, metrics: &Metrics, dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let f = |v: f64| v.to_string();

    let trajectory = csv_text(
        &TRAJECTORY_HEADER,
        result.ticks.iter().map(|k| {
            let s = &k.state;
            vec![
                f(k.t),
                f(s.p_x),
                f(s.p_y),
                f(s.phi),
                f(s.v_x),
                f(s.v_y),
                f(s.omega),
                f(k.lateral_deviation),
                k.obstacle_distance.map_or(String::new(), f),
                (k.degraded as u8).to_string(),
            ]
        }),
    );
    let inputs = csv_text(
        &INPUTS_HEADER,
        result
            .ticks
            .iter()
            .map(|k| vec![f(k.t), f(k.input.d), f(k.input.delta), f(k.input.delta.to_degrees())]),
    );
    let histogram = csv_text(
        &["bin_start_ms", "bin_end_ms", "count"],
        metrics.solve_time.histogram.iter().enumerate().map(|(i, c)| {
            let end = if i < HISTOGRAM_LIMIT_MS { (i + 1).to_string() } else { "inf".into() };
            vec![i.to_string(), end, c.to_string()]
        }),
    );
    let mut doc = serde_json::to_value(metrics).expect("metrics serialize");
    doc["schema_version"] = SCHEMA_VERSION.into();
    let metrics_json = serde_json::to_string_pretty(&doc).expect("json");

    let files = [
        ("trajectory.csv", trajectory),
        ("inputs.csv", inputs),
        ("histogram.csv", histogram),
        ("metrics.json", metrics_json),
    ];
    let mut written = Vec::new();
    for (name, text) in files {
        let path = dir.join(name);
        write_file(&path, text.as_bytes())?;
        written.push(path);
    }
    Ok(written)
}

/// Reads back `trajectory.csv` as `(t, state)` pairs.
pub fn load_trajectory(path: &Path) -> Result<Vec<(f64, VehicleState)>, HarnessError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut rdr = csv::Reader::from_reader(io::BufReader::new(file));
    let header = rdr.headers().map_err(|e| format_err(path, e))?.clone();
    if header.iter().ne(TRAJECTORY_HEADER) {
        return Err(format_err(path, "unexpected trajectory header"));
    }
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| format_err(path, e))?;
        let v: Vec<f64> = row
            .iter()
            .take(7)
            .map(|c| c.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| format_err(path, e))?;
        out.push((v[0], VehicleState::new(v[1], v[2], v[3], v[4], v[5], v[6])));
    }
    Ok(out)
}
