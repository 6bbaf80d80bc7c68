//! Dynamic bicycle model with simplified Pacejka lateral tire forces and an
//! empirical drivetrain, plus the fixed-step integrators used for prediction
//! (forward Euler) and plant simulation (classical RK4).

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Longitudinal speed floor used in the slip-angle quotients.
pub const V_EPS: f64 = 0.05;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid input: {0}")]
    InvalidInput(&'static str),
    #[error("numerical blow-up in {field} (value {value})")]
    NumericalBlowup { field: &'static str, value: f64 },
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChassisParams {
    pub l_f: f64,
    pub l_r: f64,
    pub m: f64,
    #[serde(rename = "J_z")]
    pub j_z: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TireParams {
    #[serde(rename = "B_f")]
    pub b_f: f64,
    #[serde(rename = "B_r")]
    pub b_r: f64,
    #[serde(rename = "C_f")]
    pub c_f: f64,
    #[serde(rename = "C_r")]
    pub c_r: f64,
    #[serde(rename = "D_f")]
    pub d_f: f64,
    #[serde(rename = "D_r")]
    pub d_r: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DrivetrainParams {
    #[serde(rename = "C_m1")]
    pub c_m1: f64,
    #[serde(rename = "C_m2")]
    pub c_m2: f64,
    #[serde(rename = "C_m3")]
    pub c_m3: f64,
    #[serde(rename = "C_m4")]
    pub c_m4: f64,
}

/// Full parameter set of the 1:10 scale car.
///
/// `Default` yields the identified values of the reference vehicle.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VehicleParams {
    pub chassis: ChassisParams,
    pub tires: TireParams,
    pub drivetrain: DrivetrainParams,
}

impl Default for ChassisParams {
    fn default() -> Self {
        Self {
            l_f: 0.178,
            l_r: 0.147,
            m: 5.692,
            j_z: 0.204,
        }
    }
}

impl Default for TireParams {
    fn default() -> Self {
        Self {
            b_f: 9.242,
            b_r: 17.716,
            c_f: 0.085,
            c_r: 0.133,
            d_f: 134.585,
            d_r: 159.919,
        }
    }
}

impl Default for DrivetrainParams {
    fn default() -> Self {
        Self {
            c_m1: 20.0,
            c_m2: 6.92e-7,
            c_m3: 3.99,
            c_m4: 0.67,
        }
    }
}

fn check_positive(name: &str, v: f64) -> Result<(), ModelError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(ModelError::InvalidParams(format!("{name} must be finite and > 0, got {v}")))
    }
}

fn check_non_negative(name: &str, v: f64) -> Result<(), ModelError> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(ModelError::InvalidParams(format!("{name} must be finite and >= 0, got {v}")))
    }
}

impl ChassisParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        check_positive("l_f", self.l_f)?;
        check_positive("l_r", self.l_r)?;
        check_positive("m", self.m)?;
        check_positive("J_z", self.j_z)
    }
}

impl TireParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        check_positive("B_f", self.b_f)?;
        check_positive("B_r", self.b_r)?;
        check_positive("C_f", self.c_f)?;
        check_positive("C_r", self.c_r)?;
        check_positive("D_f", self.d_f)?;
        check_positive("D_r", self.d_r)
    }
}

impl DrivetrainParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        check_non_negative("C_m1", self.c_m1)?;
        check_non_negative("C_m2", self.c_m2)?;
        check_non_negative("C_m3", self.c_m3)?;
        check_non_negative("C_m4", self.c_m4)
    }
}

impl VehicleParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        self.chassis.validate()?;
        self.tires.validate()?;
        self.drivetrain.validate()
    }

    /// Identifiable parameters in the order
    /// `[B_f, B_r, C_f, C_r, D_f, D_r, C_m1, C_m2, C_m3, C_m4]`.
    pub fn zeta(&self) -> [f64; 10] {
        let t = &self.tires;
        let d = &self.drivetrain;
        [
            t.b_f, t.b_r, t.c_f, t.c_r, t.d_f, t.d_r, d.c_m1, d.c_m2, d.c_m3, d.c_m4,
        ]
    }

    /// Replaces tire and drivetrain coefficients, keeping the chassis.
    /// No validation: identification may probe the boundary of the admissible box.
    pub fn with_zeta(&self, zeta: &[f64; 10]) -> Self {
        Self {
            chassis: self.chassis,
            tires: TireParams {
                b_f: zeta[0],
                b_r: zeta[1],
                c_f: zeta[2],
                c_r: zeta[3],
                d_f: zeta[4],
                d_r: zeta[5],
            },
            drivetrain: DrivetrainParams {
                c_m1: zeta[6],
                c_m2: zeta[7],
                c_m3: zeta[8],
                c_m4: zeta[9],
            },
        }
    }
}

/// `[p_x, p_y, phi, v_x, v_y, omega]`; positions in the world frame,
/// velocities in the body frame.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VehicleState {
    pub p_x: f64,
    pub p_y: f64,
    pub phi: f64,
    pub v_x: f64,
    pub v_y: f64,
    pub omega: f64,
}

/// Throttle duty `d` and steering angle `delta` (rad).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlInput {
    pub d: f64,
    pub delta: f64,
}

/// Time derivative of a [`VehicleState`], same slot order.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StateDerivative {
    pub p_x: f64,
    pub p_y: f64,
    pub phi: f64,
    pub v_x: f64,
    pub v_y: f64,
    pub omega: f64,
}

pub const STATE_FIELDS: [&str; 6] = ["p_x", "p_y", "phi", "v_x", "v_y", "omega"];

impl VehicleState {
    pub fn new(p_x: f64, p_y: f64, phi: f64, v_x: f64, v_y: f64, omega: f64) -> Self {
        Self {
            p_x,
            p_y,
            phi,
            v_x,
            v_y,
            omega,
        }
    }

    pub fn to_array(&self) -> [f64; 6] {
        [self.p_x, self.p_y, self.phi, self.v_x, self.v_y, self.omega]
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Self::new(a[0], a[1], a[2], a[3], a[4], a[5])
    }

    pub fn position(&self) -> [f64; 2] {
        [self.p_x, self.p_y]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    /// `self + h * rate`
    pub fn advanced(&self, rate: &StateDerivative, h: f64) -> Self {
        Self {
            p_x: self.p_x + h * rate.p_x,
            p_y: self.p_y + h * rate.p_y,
            phi: self.phi + h * rate.phi,
            v_x: self.v_x + h * rate.v_x,
            v_y: self.v_y + h * rate.v_y,
            omega: self.omega + h * rate.omega,
        }
    }
}

impl ControlInput {
    pub fn new(d: f64, delta: f64) -> Self {
        Self { d, delta }
    }

    pub fn is_finite(&self) -> bool {
        self.d.is_finite() && self.delta.is_finite()
    }
}

impl StateDerivative {
    pub fn to_array(&self) -> [f64; 6] {
        [self.p_x, self.p_y, self.phi, self.v_x, self.v_y, self.omega]
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Self {
            p_x: a[0],
            p_y: a[1],
            phi: a[2],
            v_x: a[3],
            v_y: a[4],
            omega: a[5],
        }
    }

    fn check_finite(self) -> Result<Self, ModelError> {
        for (name, v) in STATE_FIELDS.iter().zip(self.to_array()) {
            if !v.is_finite() {
                return Err(ModelError::NumericalBlowup { field: name, value: v });
            }
        }
        Ok(self)
    }
}

#[inline]
fn clamped_vx(v_x: f64) -> f64 {
    v_x.max(V_EPS)
}

/// Front and rear slip angles, with the longitudinal speed floored at [`V_EPS`].
pub fn slip_angles(
    state: &VehicleState,
    delta: f64,
    chassis: &ChassisParams,
) -> Result<(f64, f64), ModelError> {
    if !(state.v_x.is_finite() && state.v_y.is_finite() && state.omega.is_finite()) {
        return Err(ModelError::InvalidInput("non-finite velocity in slip_angles"));
    }
    if !delta.is_finite() {
        return Err(ModelError::InvalidInput("non-finite steering angle"));
    }
    let vx = clamped_vx(state.v_x);
    let alpha_f = -((state.omega * chassis.l_f + state.v_y) / vx).atan() + delta;
    let alpha_r = ((state.omega * chassis.l_r - state.v_y) / vx).atan();
    Ok((alpha_f, alpha_r))
}

#[inline]
fn pacejka(alpha: f64, b: f64, c: f64, d: f64) -> f64 {
    d * (c * (b * alpha).atan()).sin()
}

/// Simplified magic-formula lateral forces `(F_fy, F_ry)`.
pub fn lateral_forces(alpha_f: f64, alpha_r: f64, tires: &TireParams) -> (f64, f64) {
    (
        pacejka(alpha_f, tires.b_f, tires.c_f, tires.d_f),
        pacejka(alpha_r, tires.b_r, tires.c_r, tires.d_r),
    )
}

/// Net longitudinal drivetrain force.
pub fn longitudinal_force(d: f64, v_x: f64, drivetrain: &DrivetrainParams) -> f64 {
    (drivetrain.c_m1 - drivetrain.c_m2 * v_x) * d - drivetrain.c_m3 - drivetrain.c_m4 * v_x * v_x
}

/// Rigid-body equations given the three tire forces. Both axles receive the
/// same longitudinal force `fx`.
fn body_rates(
    state: &VehicleState,
    delta: f64,
    fx: f64,
    ffy: f64,
    fry: f64,
    chassis: &ChassisParams,
) -> StateDerivative {
    body_rates_trig(state, state.phi.sin_cos(), delta.sin_cos(), fx, ffy, fry, chassis)
}

#[inline]
fn body_rates_trig(
    state: &VehicleState,
    (sphi, cphi): (f64, f64),
    (sd, cd): (f64, f64),
    fx: f64,
    ffy: f64,
    fry: f64,
    chassis: &ChassisParams,
) -> StateDerivative {
    let m = chassis.m;
    StateDerivative {
        p_x: state.v_x * cphi - state.v_y * sphi,
        p_y: state.v_x * sphi + state.v_y * cphi,
        phi: state.omega,
        v_x: (fx - ffy * sd + fx * cd + m * state.v_y * state.omega) / m,
        v_y: (fry + ffy * cd + fx * sd - m * state.v_x * state.omega) / m,
        omega: (chassis.l_f * ffy * cd + chassis.l_f * fx * sd - chassis.l_r * fry) / chassis.j_z,
    }
}

/// Continuous-time model `f_c(x, u)`.
pub fn state_derivative(
    state: &VehicleState,
    u: &ControlInput,
    params: &VehicleParams,
) -> Result<StateDerivative, ModelError> {
    if !state.is_finite() {
        return Err(ModelError::InvalidInput("non-finite state"));
    }
    if !u.is_finite() {
        return Err(ModelError::InvalidInput("non-finite control input"));
    }
    let (af, ar) = slip_angles(state, u.delta, &params.chassis)?;
    let (ffy, fry) = lateral_forces(af, ar, &params.tires);
    let fx = longitudinal_force(u.d, state.v_x, &params.drivetrain);
    body_rates(state, u.delta, fx, ffy, fry, &params.chassis).check_finite()
}

/// Plant variant of [`state_derivative`]: the drivetrain cannot push the car
/// backwards, so a negative `F_x` is clamped to zero once `v_x <= 0`.
pub fn plant_state_derivative(
    state: &VehicleState,
    u: &ControlInput,
    params: &VehicleParams,
) -> Result<StateDerivative, ModelError> {
    if !state.is_finite() {
        return Err(ModelError::InvalidInput("non-finite state"));
    }
    if !u.is_finite() {
        return Err(ModelError::InvalidInput("non-finite control input"));
    }
    let (af, ar) = slip_angles(state, u.delta, &params.chassis)?;
    let (ffy, fry) = lateral_forces(af, ar, &params.tires);
    let mut fx = longitudinal_force(u.d, state.v_x, &params.drivetrain);
    if state.v_x <= 0.0 && fx < 0.0 {
        fx = 0.0;
    }
    body_rates(state, u.delta, fx, ffy, fry, &params.chassis).check_finite()
}

/// Analytic Jacobians of `f_c` at `(state, u)`.
///
/// `dx[i][j] = d f_i / d x_j`, `du[i][j] = d f_i / d u_j` with `u = [d, delta]`.
/// Below [`V_EPS`] the clamped speed is constant, so its derivative is zero there.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelJacobian {
    pub rate: StateDerivative,
    pub dx: [[f64; 6]; 6],
    pub du: [[f64; 2]; 6],
}

/// Magic-formula force and its slope `dF/d alpha`, sharing one `atan`.
#[inline]
fn pacejka_with_slope(alpha: f64, b: f64, c: f64, d: f64) -> (f64, f64) {
    let ba = b * alpha;
    let t = ba.atan();
    let ct = c * t;
    (d * ct.sin(), d * ct.cos() * c * b / (1.0 + ba * ba))
}

pub fn state_jacobian(
    state: &VehicleState,
    u: &ControlInput,
    params: &VehicleParams,
) -> Result<ModelJacobian, ModelError> {
    if !state.is_finite() {
        return Err(ModelError::InvalidInput("non-finite state"));
    }
    if !u.is_finite() {
        return Err(ModelError::InvalidInput("non-finite control input"));
    }
    let ch = &params.chassis;
    let tp = &params.tires;
    let dt = &params.drivetrain;

    let (vx, vy, w, phi) = (state.v_x, state.v_y, state.omega, state.phi);
    let delta = u.delta;
    let vxc = clamped_vx(vx);
    let dvxc = if vx >= V_EPS { 1.0 } else { 0.0 };

    // same expressions as slip_angles / pacejka so the rate is bit-identical
    let qf = (w * ch.l_f + vy) / vxc;
    let qr = (w * ch.l_r - vy) / vxc;
    let kf = 1.0 / (1.0 + qf * qf);
    let kr = 1.0 / (1.0 + qr * qr);
    // slip-angle partials w.r.t. (v_x, v_y, omega)
    let af_vx = kf * qf / vxc * dvxc;
    let af_vy = -kf / vxc;
    let af_w = -kf * ch.l_f / vxc;
    let ar_vx = -kr * qr / vxc * dvxc;
    let ar_vy = -kr / vxc;
    let ar_w = kr * ch.l_r / vxc;

    let alpha_f = -qf.atan() + delta;
    let alpha_r = qr.atan();
    let (ffy, ffy_a) = pacejka_with_slope(alpha_f, tp.b_f, tp.c_f, tp.d_f);
    let (fry, fry_a) = pacejka_with_slope(alpha_r, tp.b_r, tp.c_r, tp.d_r);

    let fx = longitudinal_force(u.d, vx, dt);
    let fx_vx = -dt.c_m2 * u.d - 2.0 * dt.c_m4 * vx;
    let fx_d = dt.c_m1 - dt.c_m2 * vx;

    let (sphi, cphi) = phi.sin_cos();
    let (sd, cd) = delta.sin_cos();
    let rate = body_rates_trig(state, (sphi, cphi), (sd, cd), fx, ffy, fry, ch).check_finite()?;
    let m = ch.m;
    let jz = ch.j_z;

    let mut dx = [[0.0; 6]; 6];
    let mut du = [[0.0; 2]; 6];

    dx[0][2] = -vx * sphi - vy * cphi;
    dx[0][3] = cphi;
    dx[0][4] = -sphi;
    dx[1][2] = vx * cphi - vy * sphi;
    dx[1][3] = sphi;
    dx[1][4] = cphi;
    dx[2][5] = 1.0;

    // m * v_x' = F_x (1 + cos d) - F_fy sin d + m v_y w
    dx[3][3] = (fx_vx * (1.0 + cd) - ffy_a * af_vx * sd) / m;
    dx[3][4] = -ffy_a * af_vy * sd / m + w;
    dx[3][5] = -ffy_a * af_w * sd / m + vy;
    du[3][0] = fx_d * (1.0 + cd) / m;
    du[3][1] = (-fx * sd - ffy_a * sd - ffy * cd) / m;

    // m * v_y' = F_ry + F_fy cos d + F_x sin d - m v_x w
    dx[4][3] = (fry_a * ar_vx + ffy_a * af_vx * cd + fx_vx * sd) / m - w;
    dx[4][4] = (fry_a * ar_vy + ffy_a * af_vy * cd) / m;
    dx[4][5] = (fry_a * ar_w + ffy_a * af_w * cd) / m - vx;
    du[4][0] = fx_d * sd / m;
    du[4][1] = (ffy_a * cd - ffy * sd + fx * cd) / m;

    // J_z * w' = l_f F_fy cos d + l_f F_x sin d - l_r F_ry
    dx[5][3] = (ch.l_f * ffy_a * af_vx * cd + ch.l_f * fx_vx * sd - ch.l_r * fry_a * ar_vx) / jz;
    dx[5][4] = (ch.l_f * ffy_a * af_vy * cd - ch.l_r * fry_a * ar_vy) / jz;
    dx[5][5] = (ch.l_f * ffy_a * af_w * cd - ch.l_r * fry_a * ar_w) / jz;
    du[5][0] = ch.l_f * fx_d * sd / jz;
    du[5][1] = ch.l_f * (ffy_a * cd - ffy * sd + fx * cd) / jz;

    for (i, row) in dx.iter().enumerate() {
        for v in row.iter().chain(du[i].iter()) {
            if !v.is_finite() {
                return Err(ModelError::NumericalBlowup {
                    field: STATE_FIELDS[i],
                    value: *v,
                });
            }
        }
    }

    Ok(ModelJacobian { rate, dx, du })
}

/// Sensitivity of the velocity rates `(v_x', v_y', omega')` to the identifiable
/// parameter vector (same ordering as [`VehicleParams::zeta`]).
pub fn velocity_rate_param_jacobian(
    state: &VehicleState,
    u: &ControlInput,
    params: &VehicleParams,
) -> Result<[[f64; 10]; 3], ModelError> {
    let (af, ar) = slip_angles(state, u.delta, &params.chassis)?;
    let tp = &params.tires;
    let ch = &params.chassis;

    // dF/d(B, C, D) for each axle
    let partials = |alpha: f64, b: f64, c: f64, d: f64| {
        let ba = b * alpha;
        let t = ba.atan();
        let (s, co) = (c * t).sin_cos();
        [d * co * c * alpha / (1.0 + ba * ba), d * co * t, s]
    };
    let pf = partials(af, tp.b_f, tp.c_f, tp.d_f);
    let pr = partials(ar, tp.b_r, tp.c_r, tp.d_r);
    let vx = state.v_x;
    let fx_p = [u.d, -vx * u.d, -1.0, -vx * vx];

    let (sd, cd) = u.delta.sin_cos();
    let (m, jz) = (ch.m, ch.j_z);

    // rate coefficients on (F_fy, F_ry, F_x) per velocity row
    let coef = [
        [-sd / m, 0.0, (1.0 + cd) / m],
        [cd / m, 1.0 / m, sd / m],
        [ch.l_f * cd / jz, -ch.l_r / jz, ch.l_f * sd / jz],
    ];

    let mut out = [[0.0; 10]; 3];
    for (row, c) in out.iter_mut().zip(coef.iter()) {
        // zeta = [B_f, B_r, C_f, C_r, D_f, D_r, C_m1..C_m4]
        row[0] = c[0] * pf[0];
        row[2] = c[0] * pf[1];
        row[4] = c[0] * pf[2];
        row[1] = c[1] * pr[0];
        row[3] = c[1] * pr[1];
        row[5] = c[1] * pr[2];
        for k in 0..4 {
            row[6 + k] = c[2] * fx_p[k];
        }
    }
    Ok(out)
}

fn check_dt(dt: f64) -> Result<(), ModelError> {
    if dt.is_finite() && dt > 0.0 {
        Ok(())
    } else {
        Err(ModelError::InvalidInput("integration step must be finite and > 0"))
    }
}

/// One forward-Euler step with exactly one model evaluation.
pub fn step_euler(
    state: &VehicleState,
    u: &ControlInput,
    dt: f64,
    params: &VehicleParams,
) -> Result<VehicleState, ModelError> {
    check_dt(dt)?;
    step_euler_with(state, u, dt, |x, u| state_derivative(x, u, params))
}

pub fn step_euler_with<F>(
    state: &VehicleState,
    u: &ControlInput,
    dt: f64,
    rate: F,
) -> Result<VehicleState, ModelError>
where
    F: Fn(&VehicleState, &ControlInput) -> Result<StateDerivative, ModelError>,
{
    let k = rate(state, u)?;
    Ok(state.advanced(&k, dt))
}

/// Classical four-stage Runge-Kutta step, input held over `dt`.
pub fn step_rk4(
    state: &VehicleState,
    u: &ControlInput,
    dt: f64,
    params: &VehicleParams,
) -> Result<VehicleState, ModelError> {
    check_dt(dt)?;
    step_rk4_with(state, u, dt, |x, u| state_derivative(x, u, params))
}

pub fn step_rk4_with<F>(
    state: &VehicleState,
    u: &ControlInput,
    dt: f64,
    rate: F,
) -> Result<VehicleState, ModelError>
where
    F: Fn(&VehicleState, &ControlInput) -> Result<StateDerivative, ModelError>,
{
    let k1 = rate(state, u)?.to_array();
    let k2 = rate(&state.advanced(&StateDerivative::from_array(k1), dt / 2.0), u)?.to_array();
    let k3 = rate(&state.advanced(&StateDerivative::from_array(k2), dt / 2.0), u)?.to_array();
    let k4 = rate(&state.advanced(&StateDerivative::from_array(k3), dt), u)?.to_array();
    let mut blend = [0.0; 6];
    for i in 0..6 {
        blend[i] = (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]) / 6.0;
    }
    let next = state.advanced(&StateDerivative::from_array(blend), dt);
    if !next.is_finite() {
        let arr = next.to_array();
        let i = arr.iter().position(|v| !v.is_finite()).unwrap_or(0);
        return Err(ModelError::NumericalBlowup {
            field: STATE_FIELDS[i],
            value: arr[i],
        });
    }
    Ok(next)
}
