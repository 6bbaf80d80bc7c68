use std::f64::consts::{FRAC_PI_6, PI};

use racecar_core::dynamics::{ControlInput, VehicleParams, VehicleState};
use racecar_core::harness::*;
use racecar_core::ident::Dataset;
use racecar_core::solver::SolveStatus;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn limits() -> Limits {
    Limits {
        corridor_half_width: 1.76,
        u_min: ControlInput::new(0.0, -FRAC_PI_6),
        u_max: ControlInput::new(1.0, FRAC_PI_6),
        v_x_min: 0.0,
        v_x_max: 5.0,
    }
}

fn tick(t: f64, state: VehicleState) -> TickLog {
    TickLog {
        t,
        state,
        input: ControlInput::new(0.5, 0.0),
        predicted_next: state,
        solve_time: 0.002,
        status: Some(SolveStatus::Converged),
        inner_iters: 5,
        outer_iters: 1,
        degraded: false,
        lateral_deviation: 0.1,
        obstacle_distance: None,
        obstacle_gamma: None,
        curvature: 0.0,
    }
}

fn result_from(ticks: Vec<TickLog>) -> SimResult {
    SimResult {
        controller_period: 0.033,
        ticks,
        lap_starts: Vec::new(),
        start_line: StartLine {
            a: [0.0, 2.0],
            b: [0.0, -2.0],
        },
        limits: limits(),
        outcome: RunOutcome::Completed,
    }
}

fn random_result(rng: &mut ChaCha8Rng) -> SimResult {
    let n = rng.gen_range(1..300);
    let ticks = (0..n)
        .map(|k| {
            let mut t = tick(
                k as f64 * 0.033,
                VehicleState::new(
                    rng.gen_range(-5.0..5.0),
                    rng.gen_range(-5.0..5.0),
                    rng.gen_range(-3.0..3.0),
                    rng.gen_range(-0.1..5.1),
                    0.0,
                    0.0,
                ),
            );
            t.solve_time = rng.gen_range(0.0..0.05);
            t.input = ControlInput::new(rng.gen_range(-0.1..1.1), rng.gen_range(-0.6..0.6));
            t.lateral_deviation = rng.gen_range(0.0..2.0);
            t.curvature = rng.gen_range(0.0..0.4);
            if rng.gen_bool(0.5) {
                t.obstacle_distance = Some(rng.gen_range(1.0..10.0));
                t.obstacle_gamma = Some(1.5);
            }
            t
        })
        .collect();
    let mut r = result_from(ticks);
    r.lap_starts = vec![0.5, 6.9, 13.1];
    r
}

#[test]
fn one_lap_on_stadium_without_violations() {
    let cfg = ScenarioConfig {
        laps: 1,
        ..Default::default()
    };
    let r = run_closed_loop(&cfg).unwrap();
    assert_eq!(r.outcome, RunOutcome::Completed);
    assert_eq!(r.lap_starts.len(), 2);
    let m = compute_metrics(&r);
    assert_eq!(m.laps_completed, 1);
    assert_eq!(m.violations.total(), 0, "{:?}", m.violations);
    assert!(r.ticks.windows(2).all(|w| (w[1].t - w[0].t - 0.033).abs() < 1e-12));
}

#[test]
fn prediction_matches_plant_when_plant_is_the_model() {
    let cfg = ScenarioConfig {
        plant: PlantModel::PredictionEuler,
        time_limit: 3.0,
        ..Default::default()
    };
    let r = run_closed_loop(&cfg).unwrap();
    assert!(r.ticks.len() > 80);
    for w in r.ticks.windows(2) {
        let (p, x) = (w[0].predicted_next.to_array(), w[1].state.to_array());
        for i in 0..6 {
            assert!((p[i] - x[i]).abs() < 1e-10);
        }
    }
}

#[test]
fn persistent_degraded_controller_aborts() {
    // a penalty budget that can never be met forces every tick into degraded mode
    let mut cfg = ScenarioConfig {
        obstacles: true,
        ..Default::default()
    };
    cfg.initial_state = VehicleState::new(4.0, 0.75, 0.0, 0.5, 0.0, 0.0);
    cfg.solver.penalty_init = 1.0;
    cfg.solver.max_penalty = 1.0;
    cfg.solver.eps_outer = 1e-12;
    let r = run_closed_loop(&cfg).unwrap();
    assert!(r.is_aborted(), "{:?}", r.outcome);
    assert_eq!(r.ticks.len(), MAX_DEGRADED_STREAK + 1);
    assert!(r.ticks.iter().all(|t| t.degraded));
}

#[test]
fn scenario_validation() {
    let bad_period = ScenarioConfig {
        plant_dt: 0.002,
        controller_period: 0.033,
        ..Default::default()
    };
    assert!(matches!(bad_period.validate(), Err(HarnessError::InvalidConfig(_))));
    assert_eq!(ScenarioConfig::default().substeps().unwrap(), 33);
    let no_laps = ScenarioConfig {
        laps: 0,
        ..Default::default()
    };
    assert!(no_laps.validate().is_err());
}

#[test]
fn scenario_json_round_trip_and_relative_paths() {
    let dir = tempfile::tempdir().unwrap();
    let params = VehicleParams::default();
    std::fs::write(dir.path().join("car.json"), serde_json::to_string(&params).unwrap()).unwrap();
    let cfg = ScenarioConfig {
        vehicle: ParamSource::File("car.json".into()),
        obstacles: true,
        ..Default::default()
    };
    let path = dir.path().join("scenario.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    let back = ScenarioConfig::load(&path).unwrap();
    assert_eq!(back.vehicle, ParamSource::File(dir.path().join("car.json")));
    assert_eq!(back.vehicle_params().unwrap(), params);
    assert_eq!(back.layout().unwrap().obstacles.len(), 2);

    std::fs::write(&path, r#"{"track": "winding", "laps": 2}"#).unwrap();
    let partial = ScenarioConfig::load(&path).unwrap();
    assert_eq!(partial.track, TrackSource::Winding);
    assert_eq!(partial.laps, 2);
    assert_eq!(partial.plant_dt, 0.001);
}

#[test]
fn no_crossing_no_laps() {
    let ticks = (0..50)
        .map(|k| tick(k as f64 * 0.033, VehicleState::new(-3.0 + 0.01 * k as f64, 0.0, 0.0, 1.0, 0.0, 0.0)))
        .collect();
    let r = result_from(ticks);
    assert!(detect_laps(&r, &r.start_line).is_empty());
}

#[test]
fn circular_laps_match_closed_form() {
    let (radius, v, dt) = (3.0, 2.5, 0.033);
    let circumference = 2.0 * PI * radius;
    // counter-clockwise circle starting just behind the top of the start line at (0, -radius)
    let ticks: Vec<TickLog> = (0..2000)
        .map(|k| {
            let t = k as f64 * dt;
            let a = -PI / 2.0 - 0.1 + v * t / radius;
            tick(t, VehicleState::new(radius * a.cos(), radius * a.sin(), 0.0, v, 0.0, 0.0))
        })
        .collect();
    let mut r = result_from(ticks);
    r.start_line = StartLine {
        a: [0.0, -radius + 1.0],
        b: [0.0, -radius - 1.0],
    };
    let laps = detect_laps(&r, &r.start_line);
    assert!(laps.len() >= 3);
    for w in laps.windows(2) {
        assert!((w[1] - w[0] - circumference / v).abs() <= dt);
    }
}

#[test]
fn crossing_on_a_sample_counts_once() {
    let xs = [-0.2, -0.1, 0.0, 0.1, 0.2];
    let ticks = xs
        .iter()
        .enumerate()
        .map(|(k, x)| tick(k as f64, VehicleState::new(*x, 0.0, 0.0, 1.0, 0.0, 0.0)))
        .collect();
    let mut r = result_from(ticks);
    r.start_line = StartLine {
        a: [0.0, 1.0],
        b: [0.0, -1.0],
    };
    assert_eq!(detect_laps(&r, &r.start_line), vec![2.0]);
}

#[test]
fn single_tick_metrics() {
    let mut t = tick(0.0, VehicleState::new(0.0, 0.0, 0.0, 2.0, 0.0, 0.0));
    t.solve_time = 0.0042;
    let m = compute_metrics(&result_from(vec![t]));
    assert_eq!(m.solve_time.mean_ms, m.solve_time.max_ms);
    assert!((m.solve_time.mean_ms - 4.2).abs() < 1e-12);
    assert_eq!(m.solve_time.histogram[4], 1);
    assert_eq!(m.ticks, 1);
}

#[test]
fn violation_counts_match_hand_count() {
    let mut ticks: Vec<TickLog> = (0..10)
        .map(|k| tick(k as f64 * 0.033, VehicleState::new(0.0, 0.0, 0.0, 2.0, 0.0, 0.0)))
        .collect();
    ticks[1].lateral_deviation = 1.7601;
    ticks[2].lateral_deviation = 1.76;
    ticks[3].input.delta = FRAC_PI_6 + 1e-15;
    ticks[4].input.d = -1e-12;
    ticks[5].state.v_x = 5.0011;
    ticks[6].state.v_x = 5.0009;
    ticks[7].state.v_x = -2e-6;
    ticks[8].obstacle_distance = Some(1.44);
    ticks[8].obstacle_gamma = Some(1.5);
    ticks[9].obstacle_distance = Some(1.46);
    ticks[9].obstacle_gamma = Some(1.5);
    let m = compute_metrics(&result_from(ticks));
    assert_eq!(m.violations.corridor, 1);
    assert_eq!(m.violations.input, 2);
    assert_eq!(m.violations.speed, 2);
    assert_eq!(m.violations.obstacle, 1);
    assert_eq!(m.min_obstacle_distance, Some(1.44));
}

#[test]
fn histogram_totals_equal_tick_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..50 {
        let r = random_result(&mut rng);
        let m = compute_metrics(&r);
        assert_eq!(m.solve_time.histogram.len(), HISTOGRAM_LIMIT_MS + 1);
        assert_eq!(m.solve_time.histogram.iter().sum::<u64>() as usize, r.ticks.len());
    }
}

#[test]
fn identification_suite_has_expected_length_and_is_reproducible() {
    let suite = ManeuverSuite::standard();
    assert!((suite.duration() - 83.7).abs() < 1e-9);
    let p = VehicleParams::default();
    let a = generate_ident_data(&suite, &p, 0.01, 42).unwrap();
    assert_eq!(a.len(), 1674);
    let csv = |d: &Dataset| {
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        buf
    };
    let b = generate_ident_data(&suite, &p, 0.01, 42).unwrap();
    assert_eq!(csv(&a), csv(&b));
    let c = generate_ident_data(&suite, &p, 0.01, 43).unwrap();
    assert_ne!(csv(&a), csv(&c));
}

#[test]
fn empty_result_exports_headers_only() {
    let dir = tempfile::tempdir().unwrap();
    let r = result_from(Vec::new());
    let m = compute_metrics(&r);
    export_results(&r, &m, dir.path()).unwrap();
    let traj = std::fs::read_to_string(dir.path().join("trajectory.csv")).unwrap();
    assert_eq!(traj, TRAJECTORY_HEADER.join(",") + "\n");
    let inputs = std::fs::read_to_string(dir.path().join("inputs.csv")).unwrap();
    assert_eq!(inputs, INPUTS_HEADER.join(",") + "\n");
    assert!(load_trajectory(&dir.path().join("trajectory.csv")).unwrap().is_empty());
}

#[test]
fn exported_trajectory_reloads_identically() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let r = random_result(&mut rng);
    let dir = tempfile::tempdir().unwrap();
    export_results(&r, &compute_metrics(&r), dir.path()).unwrap();
    let back = load_trajectory(&dir.path().join("trajectory.csv")).unwrap();
    let orig: Vec<(f64, VehicleState)> = r.ticks.iter().map(|t| (t.t, t.state)).collect();
    assert_eq!(back, orig);

    let path = dir.path().join("result.json");
    r.save(&path).unwrap();
    assert_eq!(SimResult::load(&path).unwrap(), r);
}

#[test]
fn metrics_json_follows_published_schema() {
    let schema: serde_json::Value = serde_json::from_str(METRICS_SCHEMA).unwrap();
    let compiled = jsonschema::JSONSchema::compile(&schema).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let dir = tempfile::tempdir().unwrap();
    let mut results: Vec<SimResult> = (0..10).map(|_| random_result(&mut rng)).collect();
    results.push(result_from(Vec::new()));
    for r in &results {
        export_results(r, &compute_metrics(r), dir.path()).unwrap();
        let doc: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("metrics.json")).unwrap()).unwrap();
        assert!(compiled.is_valid(&doc), "{doc}");
    }
}
