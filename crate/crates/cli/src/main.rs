use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use traction_core::metrics::{ComparisonPair, ErrorReport};
use traction_core::runner::{analyze_dir, run_tracking, run_traction, write_tracking_outputs, Outcome, TrackingKind};
use traction_core::scenario::{load_script, Scenario};
use traction_service::{ServeOptions, Server};

#[derive(Debug, Parser)]
#[command(name = "traction-sim", version, about = "Force-sensing forceps traction simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Grasping-force tracking over the theta x frequency grid.
    TrackGrasp(TrackArgs),
    /// Pulling-force tracking over the theta x frequency grid.
    TrackPull(TrackArgs),
    /// Simultaneous grasp and pull tracking for each theta.
    TrackBoth(TrackArgs),
    /// Headless resection flow driven by a command script.
    Traction(TractionArgs),
    /// Recompute report.csv from a tracking output directory.
    Analyze {
        #[arg(long)]
        out: PathBuf,
    },
    /// Live resection session for an operator console.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// Scenario file (TOML). Built-in defaults when omitted.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Output directory, overriding the scenario's.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct TrackArgs {
    #[command(flatten)]
    common: Common,
    /// Repetitions per grid cell.
    #[arg(long)]
    repeat: Option<usize>,
}

#[derive(Debug, Args)]
struct TractionArgs {
    #[command(flatten)]
    common: Common,
    /// Command script (JSON lines), overriding the scenario's.
    #[arg(long)]
    script: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 8765)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    /// Simulated seconds per wall-clock second.
    #[arg(long, default_value_t = 1.0)]
    time_scale: f64,
    /// Send every k-th telemetry sample.
    #[arg(long, default_value_t = 1)]
    decimate: u32,
}

fn load(common: &Common, fallback: fn() -> Scenario) -> Result<(Scenario, PathBuf)> {
    let mut scenario = match &common.scenario {
        Some(path) => Scenario::load(path)?,
        None => fallback(),
    };
    if let Some(seed) = common.seed {
        scenario.sim.seed = seed;
    }
    let out = common.out.clone().unwrap_or_else(|| scenario.output.dir.clone());
    Ok((scenario, out))
}

fn print_report(report: &ErrorReport) {
    println!("theta_deg  frequency_hz  runs  rms(F*g,Feg)  rms(F*p,Fep)");
    for row in &report.rows {
        let freq = row.frequency_hz.map(|f| format!("{f:.4}")).unwrap_or_else(|| "-".into());
        println!(
            "{:>9}  {:>12}  {:>4}  {:>12.4}  {:>12.4}",
            row.theta_deg,
            freq,
            row.runs,
            row.worst.get(ComparisonPair::FgTargetVsEst).rms,
            row.worst.get(ComparisonPair::FpTargetVsEst).rms
        );
    }
}

fn track(kind: TrackingKind, args: &TrackArgs) -> Result<ExitCode> {
    let (mut scenario, out) = load(&args.common, Scenario::tracking_rig)?;
    if let Some(repeat) = args.repeat {
        scenario.repeat = repeat;
    }
    scenario.validate()?;
    let results = run_tracking(&scenario, kind)?;
    let report = write_tracking_outputs(&out, &results)?;
    print_report(&report);
    let faults: Vec<_> = results.iter().filter(|r| r.error.is_some()).collect();
    for f in &faults {
        warn!("{}: {}", f.spec.trace_name(), f.error.as_deref().unwrap_or_default());
    }
    info!("{} cells written to {}", results.len(), out.display());
    Ok(if faults.is_empty() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn traction(args: &TractionArgs) -> Result<ExitCode> {
    let (scenario, out) = load(&args.common, Scenario::traction_reference)?;
    let Some(script_path) = args.script.clone().or_else(|| scenario.script.clone()) else {
        bail!("traction needs a command script (--script or `script` in the scenario); use `serve` for a live session");
    };
    let script = load_script(&script_path)?;
    let (run, outcome) = run_traction(&scenario, script)?;
    run.write_outputs(&out, outcome)?;
    let summary = run.summary(outcome);
    println!("{}", serde_json::to_string_pretty(&summary)?);
    report_outcome(outcome, &out)
}

fn report_outcome(outcome: Outcome, out: &Path) -> Result<ExitCode> {
    info!("outputs written to {}", out.display());
    match outcome {
        Outcome::Done => Ok(ExitCode::SUCCESS),
        other => {
            eprintln!("run ended {}", other.as_str());
            Ok(ExitCode::FAILURE)
        }
    }
}

fn serve(args: &ServeArgs) -> Result<ExitCode> {
    let (scenario, out) = load(&args.common, Scenario::traction_reference)?;
    let options = ServeOptions {
        time_scale: args.time_scale,
        decimation: args.decimate,
        out_dir: Some(out.clone()),
        ..ServeOptions::default()
    };
    let server = Server::bind((args.host.as_str(), args.port), scenario, options)?;
    println!("listening on ws://{}", server.local_addr()?);
    let report = server.run()?;
    println!("{}", serde_json::to_string_pretty(&report.summary)?);
    report_outcome(report.outcome, &out)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::TrackGrasp(a) => track(TrackingKind::Grasp, a),
        Command::TrackPull(a) => track(TrackingKind::Pull, a),
        Command::TrackBoth(a) => track(TrackingKind::Both, a),
        Command::Traction(a) => traction(a),
        Command::Analyze { out } => analyze_dir(out)
            .map(|r| {
                print_report(&r);
                ExitCode::SUCCESS
            })
            .map_err(Into::into),
        Command::Serve(a) => serve(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
