use std::f64::consts::FRAC_PI_6;

use racecar_core::controller::*;
use racecar_core::dynamics::*;
use racecar_core::solver::{AlmTerms, NlpProblem, SolveStatus, SolverConfig};
use racecar_core::track::{CenterLine, Obstacle, TrackLayout};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Frozen;

impl PredictionModel for Frozen {
    fn rate(&self, _: &VehicleState, _: &ControlInput) -> Result<StateDerivative, ModelError> {
        Ok(StateDerivative::default())
    }

    fn jacobian(&self, _: &VehicleState, _: &ControlInput) -> Result<ModelJacobian, ModelError> {
        Ok(ModelJacobian {
            rate: StateDerivative::default(),
            dx: [[0.0; 6]; 6],
            du: [[0.0; 2]; 6],
        })
    }
}

fn straight(obstacles: Vec<Obstacle>) -> TrackLayout {
    let pts = (0..400).map(|i| [i as f64 * 0.1 - 5.0, 0.0]).collect();
    TrackLayout::new(CenterLine::new(pts, 0.1, false).unwrap(), obstacles, 2.0, 0.24).unwrap()
}

fn realtime() -> SolverConfig {
    SolverConfig {
        eps_inner: 1e-3,
        eps_outer: 1e-2,
        max_inner_iters: 100,
        max_outer_iters: 5,
        ..Default::default()
    }
}

fn random_instance(rng: &mut ChaCha8Rng, n: usize) -> (VehicleState, Vec<ControlInput>, ControlInput) {
    let x0 = VehicleState::new(
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-3.0..3.0),
        rng.gen_range(0.5..4.0),
        rng.gen_range(-0.3..0.3),
        rng.gen_range(-1.0..1.0),
    );
    let inputs = (0..n)
        .map(|_| ControlInput::new(rng.gen_range(0.3..1.0), rng.gen_range(-FRAC_PI_6..FRAC_PI_6)))
        .collect();
    let u_prev = ControlInput::new(rng.gen_range(0.0..1.0), rng.gen_range(-FRAC_PI_6..FRAC_PI_6));
    (x0, inputs, u_prev)
}

fn assert_close_rel(a: f64, b: f64, tol: f64, what: &str) {
    let scale = a.abs().max(b.abs()).max(1.0);
    assert!((a - b).abs() <= tol * scale, "{what}: {a} vs {b}");
}

#[test]
fn frozen_rollout_repeats_initial_state() {
    let x0 = VehicleState::new(1.0, 2.0, 0.3, 1.5, 0.1, 0.2);
    let states = rollout(&x0, &[ControlInput::new(0.5, 0.1)], &Frozen, 0.033).unwrap();
    assert_eq!(states, vec![x0, x0]);
}

#[test]
fn straight_rollout_follows_speed_recurrence() {
    let p = VehicleParams::default();
    let t = 0.033;
    let inputs = vec![ControlInput::new(0.5, 0.0); 50];
    let states = rollout(&VehicleState::new(0.0, 0.0, 0.0, 2.0, 0.0, 0.0), &inputs, &p, t).unwrap();
    // no lateral motion, so both axles just push with F_x
    let mut v = 2.0;
    for (k, s) in states.iter().enumerate() {
        assert!((s.v_x - v).abs() < 1e-12, "step {k}: {} vs {v}", s.v_x);
        assert_eq!(s.v_y, 0.0);
        assert_eq!(s.omega, 0.0);
        let fx = (p.drivetrain.c_m1 - p.drivetrain.c_m2 * v) * 0.5 - p.drivetrain.c_m3 - p.drivetrain.c_m4 * v * v;
        v += t * 2.0 * fx / p.chassis.m;
    }
    assert!(states.windows(2).all(|w| w[1].v_x > w[0].v_x));
}

#[test]
fn shifted_rollout_matches_previous_prediction() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = VehicleParams::default();
    let (x0, inputs, _) = random_instance(&mut rng, 20);
    let first = rollout(&x0, &inputs, &p, 0.033).unwrap();
    let mut shifted = inputs[1..].to_vec();
    shifted.push(inputs[19]);
    let second = rollout(&first[1], &shifted, &p, 0.033).unwrap();
    assert_eq!(&second[..20], &first[1..]);
}

#[test]
fn cost_vanishes_at_reachable_reference_with_constant_inputs() {
    let p = VehicleParams::default();
    let cfg = OcpConfig::default();
    let u = ControlInput::new(0.4, 0.05);
    let x0 = VehicleState::new(0.0, 0.0, 0.0, 1.0, 0.0, 0.0);
    let inputs = vec![u; cfg.horizon];
    let end = *rollout(&x0, &inputs, &p, cfg.t_s).unwrap().last().unwrap();
    let cost = ocp_cost(&inputs, &x0, &u, end.position(), &p, &cfg).unwrap();
    assert_eq!(cost, 0.0);
    let grad = ocp_gradient(&inputs, &x0, &u, end.position(), &p, &cfg).unwrap();
    assert!(grad.iter().all(|g| *g == 0.0), "{grad:?}");
}

#[test]
fn frozen_cost_is_terminal_weight() {
    let cfg = OcpConfig::default();
    let u = ControlInput::new(0.2, -0.1);
    let inputs = vec![u; cfg.horizon];
    let cost = ocp_cost(&inputs, &VehicleState::default(), &u, [1.0, 0.0], &Frozen, &cfg).unwrap();
    assert_eq!(cost, 10.0);
}

#[test]
fn cost_matches_term_by_term_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let p = VehicleParams::default();
    let cfg = OcpConfig {
        q1: [3.0, 7.0],
        q2: [0.5, 20.0],
        ..Default::default()
    };
    for _ in 0..20 {
        let (x0, inputs, u_prev) = random_instance(&mut rng, cfg.horizon);
        let p_d = [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)];
        let states = rollout(&x0, &inputs, &p, cfg.t_s).unwrap();
        let end = states[cfg.horizon];
        let mut expected = 3.0 * (end.p_x - p_d[0]).powi(2) + 7.0 * (end.p_y - p_d[1]).powi(2);
        let mut prev = u_prev;
        for u in &inputs {
            expected += 0.5 * (u.d - prev.d).powi(2) + 20.0 * (u.delta - prev.delta).powi(2);
            prev = *u;
        }
        let cost = ocp_cost(&inputs, &x0, &u_prev, p_d, &p, &cfg).unwrap();
        assert!((cost - expected).abs() <= 1e-12 * expected.max(1.0));
    }
}

#[test]
fn frozen_gradient_is_rate_pattern() {
    let cfg = OcpConfig {
        horizon: 4,
        q2: [2.0, 3.0],
        ..Default::default()
    };
    let inputs = [(0.1, 0.2), (0.5, -0.1), (0.3, 0.0), (0.9, 0.4)].map(|(d, s)| ControlInput::new(d, s));
    let u_prev = ControlInput::new(0.0, 0.1);
    let g = ocp_gradient(&inputs, &VehicleState::default(), &u_prev, [1.0, 1.0], &Frozen, &cfg).unwrap();
    let q = [2.0, 3.0];
    for k in 0..4 {
        let cur = [inputs[k].d, inputs[k].delta];
        let prev = if k == 0 { [u_prev.d, u_prev.delta] } else { [inputs[k - 1].d, inputs[k - 1].delta] };
        for c in 0..2 {
            let mut expected = 2.0 * q[c] * (cur[c] - prev[c]);
            if k + 1 < 4 {
                let next = [inputs[k + 1].d, inputs[k + 1].delta];
                expected -= 2.0 * q[c] * (next[c] - cur[c]);
            }
            assert!((g[2 * k + c] - expected).abs() < 1e-14, "entry {k},{c}");
        }
    }
}

fn check_gradient_fd(n: usize, instances: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = VehicleParams::default();
    let cfg = OcpConfig {
        horizon: n,
        ..Default::default()
    };
    let h = 1e-6;
    for _ in 0..instances {
        let (x0, inputs, u_prev) = random_instance(&mut rng, n);
        let end = rollout(&x0, &inputs, &p, cfg.t_s).unwrap()[n];
        let p_d = [end.p_x + rng.gen_range(-2.0..2.0), end.p_y + rng.gen_range(-2.0..2.0)];
        let g = ocp_gradient(&inputs, &x0, &u_prev, p_d, &p, &cfg).unwrap();
        let base = inputs_to_vec(&inputs);
        for i in 0..2 * n {
            let mut up = base.clone();
            let mut down = base.clone();
            up[i] += h;
            down[i] -= h;
            let fu = ocp_cost(&vec_to_inputs(&up), &x0, &u_prev, p_d, &p, &cfg).unwrap();
            let fd = ocp_cost(&vec_to_inputs(&down), &x0, &u_prev, p_d, &p, &cfg).unwrap();
            assert_close_rel(g[i], (fu - fd) / (2.0 * h), 1e-5, &format!("entry {i}"));
        }
    }
}

#[test]
fn gradient_matches_finite_differences_short_horizon() {
    check_gradient_fd(5, 100, 21);
}

#[test]
fn gradient_matches_finite_differences_full_horizon() {
    check_gradient_fd(50, 100, 22);
}

#[test]
fn augmented_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p = VehicleParams::default();
    let layout = straight(vec![Obstacle {
        center: [3.0, 0.8],
        radius: 1.0,
        gamma: 1.5,
    }]);
    for treatment in [Treatment::Alm, Treatment::Penalty] {
        let cfg = OcpConfig {
            horizon: 10,
            obstacle_treatment: treatment,
            ..Default::default()
        };
        for _ in 0..10 {
            let x0 = VehicleState::new(rng.gen_range(0.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-0.5..0.5), 3.0, 0.0, 0.0);
            let u: Vec<f64> = (0..10)
                .flat_map(|_| [rng.gen_range(0.3..1.0), rng.gen_range(-FRAC_PI_6..FRAC_PI_6)])
                .collect();
            let ocp = RacingOcp::new(&p, &layout, &cfg, x0, ControlInput::new(0.5, 0.0), [4.0, 0.0], 50);
            let y: Vec<f64> = (0..ocp.alm_dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let terms = AlmTerms {
                multipliers: &y,
                penalty: 50.0,
            };
            let mut g = vec![0.0; 20];
            ocp.augmented_cost_grad(&u, terms, &mut g).unwrap();
            let h = 1e-6;
            for i in 0..20 {
                let mut up = u.clone();
                let mut down = u.clone();
                up[i] += h;
                down[i] -= h;
                let fd = (ocp.augmented_cost(&up, terms).unwrap() - ocp.augmented_cost(&down, terms).unwrap()) / (2.0 * h);
                assert_close_rel(g[i], fd, 1e-4, &format!("{treatment:?} entry {i}"));
            }
        }
    }
}

#[test]
fn constraints_feasible_at_center_far_from_obstacles() {
    let p = VehicleParams::default();
    let layout = straight(vec![Obstacle {
        center: [30.0, 0.0],
        radius: 1.0,
        gamma: 1.5,
    }]);
    let cfg = OcpConfig::default();
    let x0 = VehicleState::new(0.0, 0.0, 0.0, 1.0, 0.0, 0.0);
    let ocp = RacingOcp::new(&p, &layout, &cfg, x0, ControlInput::new(0.5, 0.0), [9.0, 0.0], 50);
    let v = ocp.constraint_values(&inputs_to_vec(&vec![ControlInput::new(0.5, 0.0); 50])).unwrap();
    assert_eq!(v.alm.len(), 50);
    for ((f, lo), hi) in v.alm.iter().zip(&v.alm_lower).zip(&v.alm_upper) {
        assert!(lo <= f && f <= hi);
    }
    assert!(v.pm.iter().all(|r| *r == 0.0));
}

#[test]
fn obstacle_residual_inside_clearance() {
    let p = VehicleParams::default();
    let layout = straight(vec![Obstacle {
        center: [0.0, 1.0],
        radius: 1.0,
        gamma: 1.5,
    }]);
    let cfg = OcpConfig {
        horizon: 1,
        ..Default::default()
    };
    let x0 = VehicleState::new(0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    let ocp = RacingOcp::new(&p, &layout, &cfg, x0, ControlInput::default(), [1.0, 0.0], 50);
    let v = ocp.constraint_values(&[0.0, 0.0]).unwrap();
    // obstacle rows for k = 0 and k = 1 come first
    assert!((v.pm[0] - 1.25).abs() < 1e-12);
    assert!((v.pm[1] - 1.25).abs() < 1e-12);
}

#[test]
fn obstacle_residual_zero_on_clearance_circle() {
    let p = VehicleParams::default();
    let layout = straight(vec![Obstacle {
        center: [0.0, 1.5],
        radius: 1.0,
        gamma: 1.5,
    }]);
    let cfg = OcpConfig {
        horizon: 1,
        ..Default::default()
    };
    let ocp = RacingOcp::new(&p, &layout, &cfg, VehicleState::default(), ControlInput::default(), [1.0, 0.0], 50);
    let v = ocp.constraint_values(&[0.0, 0.0]).unwrap();
    assert_eq!(v.pm[0], 0.0);
}

#[test]
fn standing_start_accelerates_straight() {
    let p = VehicleParams::default();
    let layout = straight(Vec::new());
    let cfg = OcpConfig::default();
    let cs = ControllerState::initial(&cfg);
    let (u, hs, _) = control_step(&VehicleState::default(), &layout, &p, &cs, &cfg, &SolverConfig::default()).unwrap();
    assert!(!hs.degraded);
    assert!(u.d > 0.0);
    assert!(u.delta.abs() < 1e-3, "delta = {}", u.delta);
}

#[test]
fn reference_to_the_left_steers_left() {
    let p = VehicleParams::default();
    let layout = straight(Vec::new());
    let cfg = OcpConfig::default();
    let cs = ControllerState::initial(&cfg);
    let x = VehicleState::new(0.0, 0.0, -0.3, 1.5, 0.0, 0.0);
    let (u, hs, _) = control_step(&x, &layout, &p, &cs, &cfg, &SolverConfig::default()).unwrap();
    let r = hs.reference;
    let heading = [x.phi.cos(), x.phi.sin()];
    assert!(heading[0] * r[1] - heading[1] * r[0] > 0.0);
    assert!(u.delta > 0.0, "delta = {}", u.delta);
}

#[test]
fn applied_inputs_stay_in_box_for_random_states() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let p = VehicleParams::default();
    let layout = straight(vec![Obstacle {
        center: [6.0, 0.5],
        radius: 1.0,
        gamma: 1.5,
    }]);
    let cfg = OcpConfig::default();
    let scfg = realtime();
    for _ in 0..1000 {
        let mut cs = ControllerState::initial(&cfg);
        cs.u_prev = ControlInput::new(rng.gen_range(0.0..1.0), rng.gen_range(-FRAC_PI_6..FRAC_PI_6));
        let x = VehicleState::new(
            rng.gen_range(-2.0..10.0),
            rng.gen_range(-2.5..2.5),
            rng.gen_range(-1.5..1.5),
            rng.gen_range(0.0..6.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-3.0..3.0),
        );
        let (u, hs, next) = control_step(&x, &layout, &p, &cs, &cfg, &scfg).unwrap();
        assert!((0.0..=1.0).contains(&u.d));
        assert!((-FRAC_PI_6..=FRAC_PI_6).contains(&u.delta));
        assert!(hs.inputs.iter().chain(&next.warm_start).all(|v| {
            (0.0..=1.0).contains(&v.d) && (-FRAC_PI_6..=FRAC_PI_6).contains(&v.delta)
        }));
    }
}

#[test]
fn horizon_solution_reproduces_under_rerollout() {
    let p = VehicleParams::default();
    let layout = straight(Vec::new());
    let cfg = OcpConfig::default();
    let mut cs = ControllerState::initial(&cfg);
    let mut x = VehicleState::new(0.0, 0.3, 0.1, 1.0, 0.0, 0.0);
    for _ in 0..5 {
        let (u, hs, next) = control_step(&x, &layout, &p, &cs, &cfg, &realtime()).unwrap();
        assert_eq!(hs.predicted_states[0], x);
        assert_eq!(hs.inputs[0], u);
        assert_eq!(rollout(&x, &hs.inputs, &p, cfg.t_s).unwrap(), hs.predicted_states);
        assert_eq!(next.u_prev, u);
        assert_eq!(&next.warm_start[..cfg.horizon - 1], &hs.inputs[1..]);
        assert_eq!(next.warm_start[cfg.horizon - 1], hs.inputs[cfg.horizon - 1]);
        x = hs.predicted_states[1];
        cs = next;
    }
}

#[test]
fn warm_start_is_nearly_optimal_when_plant_matches_model() {
    let p = VehicleParams::default();
    let layout = straight(Vec::new());
    let cfg = OcpConfig::default();
    let scfg = SolverConfig::default();
    let mut cs = ControllerState::initial(&cfg);
    let mut x = VehicleState::new(0.0, 0.0, 0.0, 2.0, 0.0, 0.0);
    let mut iters = Vec::new();
    for _ in 0..4 {
        let (_, hs, next) = control_step(&x, &layout, &p, &cs, &cfg, &scfg).unwrap();
        let sol = hs.solver.unwrap();
        assert_eq!(sol.status, SolveStatus::Converged);
        iters.push(sol.inner_iters);
        x = hs.predicted_states[1];
        cs = next;
    }
    assert!(iters[3] < iters[0], "{iters:?}");
}

#[test]
fn invalid_inputs_are_rejected() {
    let p = VehicleParams::default();
    let layout = straight(Vec::new());
    let cfg = OcpConfig::default();
    let cs = ControllerState::initial(&cfg);
    let bad = VehicleState::new(f64::NAN, 0.0, 0.0, 0.0, 0.0, 0.0);
    assert!(matches!(
        control_step(&bad, &layout, &p, &cs, &cfg, &realtime()),
        Err(ControllerError::InvalidState(_))
    ));
    let short = ControllerState {
        warm_start: vec![ControlInput::default(); 3],
        ..cs.clone()
    };
    assert!(matches!(
        control_step(&VehicleState::default(), &layout, &p, &short, &cfg, &realtime()),
        Err(ControllerError::HorizonMismatch { expected: 50, got: 3 })
    ));
    let zero = OcpConfig {
        horizon: 0,
        ..Default::default()
    };
    assert!(matches!(
        control_step(&VehicleState::default(), &layout, &p, &cs, &zero, &realtime()),
        Err(ControllerError::InvalidConfig(_))
    ));
}
