use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use racecar_core::dynamics::VehicleParams;
use racecar_core::harness::{
    compute_metrics, export_results, generate_ident_data, run_closed_loop, ManeuverSuite, Metrics, RunOutcome,
    ScenarioConfig, SimResult,
};
use racecar_core::ident::{default_ident_solver, identify, Dataset, ParamBounds};

const EXIT_VIOLATION: u8 = 2;
const EXIT_ABORTED: u8 = 3;

#[derive(Parser)]
#[command(name = "racecar", version, about = "Closed-loop NMPC racing simulation and parameter identification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a closed-loop scenario. Exits 2 if any bound was violated, 3 if the run aborted.
    Race {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        laps: Option<usize>,
        #[arg(long)]
        no_obstacles: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit tire and drivetrain coefficients to a drive log.
    Identify {
        #[arg(long)]
        data: PathBuf,
        /// JSON with `zeta_lo` and `zeta_hi`.
        #[arg(long)]
        bounds: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simulate a maneuver suite and write the log as CSV.
    GenData {
        #[arg(long, default_value = "standard")]
        suite: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-export a saved `result.json`.
    Export {
        #[arg(long)]
        result: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn print_summary(result: &SimResult, m: &Metrics) {
    match &result.outcome {
        RunOutcome::Completed => println!("completed {} lap(s) in {} ticks", m.laps_completed, m.ticks),
        RunOutcome::Aborted(reason) => println!("aborted after {} ticks: {reason}", m.ticks),
    }
    for (i, t) in m.lap_times.iter().enumerate() {
        println!("lap {}: {t:.3} s", i + 1);
    }
    println!("v_x min/mean/max: {:.3} / {:.3} / {:.3} m/s", m.v_x_min, m.v_x_mean, m.v_x_max);
    println!("max lateral deviation: {:.3} m", m.max_lateral_deviation);
    if let Some(d) = m.min_obstacle_distance {
        println!("min obstacle distance: {d:.3} m");
    }
    let v = &m.violations;
    println!(
        "violations: corridor {}, input {}, speed {}, obstacle {}",
        v.corridor, v.input, v.speed, v.obstacle
    );
    println!(
        "solve time mean/p99/max: {:.2} / {:.2} / {:.2} ms",
        m.solve_time.mean_ms, m.solve_time.p99_ms, m.solve_time.max_ms
    );
}

fn export_all(result: &SimResult, m: &Metrics, out: &Path) -> Result<()> {
    export_results(result, m, out)?;
    result.save(&out.join("result.json"))?;
    println!("wrote results to {}", out.display());
    Ok(())
}

fn race(scenario: &Path, laps: Option<usize>, no_obstacles: bool, out: Option<&Path>) -> Result<ExitCode> {
    let mut cfg = ScenarioConfig::load(scenario)?;
    if let Some(l) = laps {
        cfg.laps = l;
    }
    if no_obstacles {
        cfg.obstacles = false;
    }
    let result = run_closed_loop(&cfg)?;
    let m = compute_metrics(&result);
    print_summary(&result, &m);
    if let Some(out) = out {
        export_all(&result, &m, out)?;
    }
    Ok(if result.is_aborted() {
        ExitCode::from(EXIT_ABORTED)
    } else if m.violations.total() > 0 {
        ExitCode::from(EXIT_VIOLATION)
    } else {
        ExitCode::SUCCESS
    })
}

fn run_identify(data: &Path, bounds: &Path, out: Option<&Path>) -> Result<()> {
    let dataset = Dataset::load(data)?;
    let text = fs::read_to_string(bounds).with_context(|| format!("reading {}", bounds.display()))?;
    let bounds: ParamBounds = serde_json::from_str(&text).with_context(|| format!("parsing {}", bounds.display()))?;
    let base = VehicleParams::default();
    let (zeta, report) = identify(&dataset, &bounds, &bounds.midpoint(), &base.chassis, &default_ident_solver())?;
    println!("status: {:?} after {} iterations", report.status, report.iterations);
    println!("cost: {:.6e} -> {:.6e}", report.initial_cost, report.cost);
    println!(
        "one-step RMSE v_x {:.3e}, v_y {:.3e}, omega {:.3e} over {} records ({} excluded)",
        report.rmse[0], report.rmse[1], report.rmse[2], report.used_records, report.excluded_records
    );
    let names = ["B_f", "B_r", "C_f", "C_r", "D_f", "D_r", "C_m1", "C_m2", "C_m3", "C_m4"];
    for (n, z) in names.iter().zip(zeta) {
        println!("{n:>5} = {z:.6e}");
    }
    if let Some(out) = out {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        let params = base.with_zeta(&zeta);
        fs::write(out.join("vehicle.json"), serde_json::to_string_pretty(&params)?)?;
        let summary = serde_json::json!({
            "zeta": zeta,
            "status": report.status,
            "iterations": report.iterations,
            "initial_cost": report.initial_cost,
            "cost": report.cost,
            "rmse": report.rmse,
            "used_records": report.used_records,
            "excluded_records": report.excluded_records,
        });
        fs::write(out.join("fit.json"), serde_json::to_string_pretty(&summary)?)?;
        let traces = fs::File::create(out.join("fit_traces.csv"))?;
        report.write_traces_csv(traces)?;
        println!("wrote fit to {}", out.display());
    }
    Ok(())
}

fn gen_data(suite: &str, seed: u64, noise: f64, out: &Path) -> Result<()> {
    let Some(suite) = ManeuverSuite::by_name(suite) else {
        bail!("unknown maneuver suite '{suite}' (available: standard)");
    };
    let data = generate_ident_data(&suite, &VehicleParams::default(), noise, seed)?;
    data.save(out)?;
    println!("wrote {} records to {}", data.len(), out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Race {
            scenario,
            laps,
            no_obstacles,
            out,
        } => race(&scenario, laps, no_obstacles, out.as_deref()),
        Command::Identify { data, bounds, out } => run_identify(&data, &bounds, out.as_deref()).map(|_| ExitCode::SUCCESS),
        Command::GenData { suite, seed, noise, out } => gen_data(&suite, seed, noise, &out).map(|_| ExitCode::SUCCESS),
        Command::Export { result, out } => {
            let r = SimResult::load(&result)?;
            let m = compute_metrics(&r);
            export_results(&r, &m, &out)?;
            println!("wrote results to {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
