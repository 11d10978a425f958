//! Closed-loop runs: the tracking experiment grid and the resection flow,
//! plus the files they write.

use std::collections::VecDeque;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::{ControlError, ControlMode, ForceController, ForceTargets};
use crate::fsm::{CommandAck, Directive, FailReason, FsmEvent, OperatorCommand, SessionPhase, TractionSession};
use crate::metrics::{
    fmt_g6, generate_profile, pair_stats, read_trace, write_trace, ErrorReport, ForceProfile, MetricsError, PairStats,
    RunStats, TraceRecord, Window,
};
use crate::model::{coupling_gain, ForceReadings};
use crate::plant::{CutOutcome, Plant, PlantInput, PlantModels, PlantState, Sensor, SimConfig, SimError};
use crate::scenario::{Scenario, ScenarioError, ScriptRecord};

pub const THREADS_ENV: &str = "TRACTION_SIM_THREADS";

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("invalid traction params: {0}")]
    Params(String),
    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Output(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io { path: path.to_path_buf(), source }
}

/// Independent, reproducible seed for grid cell `index` of a run seeded with `base`.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(index);
    rng.next_u64()
}

/// Tissue glued in the jaws and squeezed to `fg`, spring preloaded accordingly.
pub fn pregrasped_state(models: &PlantModels, fg: f64) -> PlantState {
    let fd = fg / coupling_gain(&models.geometry);
    let ts = fd / models.spring.ks;
    PlantState { d_p: 0.0, d_s: -ts, d_l: -ts, d_u: ts, ..PlantState::engaged_at_rest(&models.tissue) }
}

/// Plant, sensor and controllers advanced together at the sensor rate.
#[derive(Debug, Clone)]
pub struct Loop {
    pub plant: Plant,
    pub sensor: Sensor,
    pub controller: ForceController,
    sim: SimConfig,
    k: u64,
}

impl Loop {
    pub fn new(scenario: &Scenario, models: PlantModels, state: PlantState, seed: u64) -> Result<Self, RunError> {
        scenario.sim.validate()?;
        let controller =
            ForceController::new(&scenario.control, models.geometry.theta, models.geometry.alpha0, models.limits)?;
        Ok(Self {
            plant: Plant::new(models, scenario.cut, state)?,
            sensor: Sensor::with_seed(scenario.sim.noise_sd, seed),
            controller,
            sim: scenario.sim,
            k: 0,
        })
    }

    pub fn time(&self) -> f64 {
        self.k as f64 * self.sim.dt_sensor
    }

    pub fn dt(&self) -> f64 {
        self.sim.dt_sensor
    }

    /// True and sensed readings at the current sample.
    pub fn sample(&mut self) -> (ForceReadings, ForceReadings) {
        let truth = self.plant.readings();
        let models = &self.plant.models;
        let sensed = self.sensor.sample(&truth, &models.spring, &models.geometry);
        (truth, sensed)
    }

    pub fn control(&mut self, mode: ControlMode, sensed: &ForceReadings, targets: &ForceTargets) -> PlantInput {
        let state = *self.plant.state();
        self.controller.step(mode, sensed, state.ts(), state.d_u, targets, self.sim.dt_sensor).input
    }

    /// Hold `input` for one sensor interval.
    pub fn advance(&mut self, input: PlantInput) -> Result<(), SimError> {
        for _ in 0..self.sim.substeps() {
            self.plant.step(input, self.sim.dt_plant)?;
        }
        self.k += 1;
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    pub fn record(
        &self,
        truth: &ForceReadings,
        sensed: &ForceReadings,
        targets: &ForceTargets,
        input: PlantInput,
        phase: &str,
        events: Vec<String>,
    ) -> TraceRecord {
        let s = self.plant.state();
        TraceRecord {
            t: self.time(),
            fg_target: targets.fg,
            fg_est: sensed.fg,
            fg_true: truth.fg,
            fp_target: targets.fp,
            fp_est: sensed.fp,
            fp_true: truth.fp,
            fd: sensed.fd,
            fs: sensed.fs,
            d_p: s.d_p,
            d_s: s.d_s,
            d_l: s.d_l,
            d_u: s.d_u,
            u1: input.u1,
            u2: input.u2,
            phase: phase.to_string(),
            events,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackingKind {
    Grasp,
    Pull,
    Both,
}

impl TrackingKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TrackingKind::Grasp => "grasp",
            TrackingKind::Pull => "pull",
            TrackingKind::Both => "both",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [TrackingKind::Grasp, TrackingKind::Pull, TrackingKind::Both].into_iter().find(|k| k.as_str() == s)
    }
}

/// One cell of the experiment grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSpec {
    pub kind: TrackingKind,
    pub theta_deg: f64,
    pub frequency_hz: Option<f64>,
    pub amplitude: f64,
    pub mode: ControlMode,
    pub run: usize,
    pub seed: u64,
    pub duration: f64,
    pub window: Window,
}

impl CellSpec {
    pub fn trace_name(&self) -> String {
        let freq = self.frequency_hz.map(|f| format!("_f{}", fmt_g6(f))).unwrap_or_default();
        format!("{}_theta{}{}_run{}.csv", self.kind.as_str(), fmt_g6(self.theta_deg), freq, self.run)
    }
}

#[derive(Debug, Clone)]
pub struct CellResult {
    pub spec: CellSpec,
    pub records: Vec<TraceRecord>,
    pub stats: Option<PairStats>,
    /// Largest `|F_g - F*_g|` (true grasp force) inside the deviation window.
    pub max_fg_deviation: Option<f64>,
    pub error: Option<String>,
}

/// All cells of a tracking experiment, in output order.
pub fn tracking_cells(scenario: &Scenario, kind: TrackingKind) -> Vec<CellSpec> {
    let cfg = &scenario.tracking;
    let base = scenario.sim.seed;
    let mut cells = Vec::new();
    let mut index = 0u64;
    for (ti, &theta_deg) in cfg.theta_deg.iter().enumerate() {
        let freqs: Vec<Option<f64>> = match kind {
            TrackingKind::Both => vec![None],
            _ => cfg.frequencies_hz.iter().map(|f| Some(*f)).collect(),
        };
        for frequency_hz in freqs {
            for run in 0..scenario.repeat {
                let (amplitude, mode, duration, window) = match (kind, frequency_hz) {
                    (TrackingKind::Grasp, Some(f)) => {
                        let d = cfg.periods / f;
                        (cfg.grasp_amplitude(ti), ControlMode::GraspHold, d, Window::new(cfg.settle_periods / f, d))
                    }
                    (TrackingKind::Pull, Some(f)) => {
                        let d = cfg.periods / f;
                        (cfg.pull_amplitude, ControlMode::PullOnly, d, Window::new(cfg.settle_periods / f, d))
                    }
                    _ => {
                        let both = &cfg.both;
                        (f64::NAN, both.mode, both.duration, both.stats_window())
                    }
                };
                let amplitude = if amplitude.is_nan() { 0.0 } else { amplitude };
                cells.push(CellSpec {
                    kind,
                    theta_deg,
                    frequency_hz,
                    amplitude,
                    mode,
                    run,
                    seed: derive_seed(base, index),
                    duration,
                    window,
                });
                index += 1;
            }
        }
    }
    cells
}

fn cell_targets(scenario: &Scenario, spec: &CellSpec, t: f64) -> (ForceTargets, ControlMode) {
    let cfg = &scenario.tracking;
    match (spec.kind, spec.frequency_hz) {
        (TrackingKind::Grasp, Some(f)) => {
            let fg = generate_profile(&ForceProfile::sinusoid(spec.amplitude, f), t);
            (ForceTargets { fg, fp: 0.0 }, ControlMode::GraspHold)
        }
        (TrackingKind::Pull, Some(f)) => {
            let fp = generate_profile(&ForceProfile::sinusoid(spec.amplitude, f), t);
            (ForceTargets { fg: cfg.pull_grasp_force, fp }, ControlMode::PullOnly)
        }
        _ => {
            let both = &cfg.both;
            let targets = ForceTargets {
                fg: generate_profile(&both.grasp_profile, t),
                fp: generate_profile(&both.pull_profile, t),
            };
            let mode = if t < both.pull_start { ControlMode::GraspHold } else { spec.mode };
            (targets, mode)
        }
    }
}

/// Run one grid cell to completion. A plant fault ends the run early; the
/// partial trace is kept and the error reported.
pub fn run_tracking_cell(scenario: &Scenario, spec: &CellSpec) -> Result<CellResult, RunError> {
    let models = scenario.models_at(spec.theta_deg);
    let state = match spec.kind {
        TrackingKind::Pull => pregrasped_state(&models, scenario.tracking.pull_grasp_force),
        _ => PlantState::engaged_at_rest(&models.tissue),
    };
    let mut sim = Loop::new(scenario, models, state, spec.seed)?;
    let samples = (spec.duration / sim.dt()).round() as u64 + 1;
    let mut records = Vec::with_capacity(samples as usize);
    let mut error = None;
    for k in 0..samples {
        let t = sim.time();
        let (truth, sensed) = sim.sample();
        let (targets, mode) = cell_targets(scenario, spec, t);
        let input = sim.control(mode, &sensed, &targets);
        records.push(sim.record(&truth, &sensed, &targets, input, mode.as_str(), Vec::new()));
        if k + 1 == samples {
            break;
        }
        if let Err(e) = sim.advance(input) {
            error = Some(e.to_string());
            break;
        }
    }

    let stats = if error.is_none() { Some(pair_stats(&records, spec.window)?) } else { None };
    let max_fg_deviation = (spec.kind == TrackingKind::Both && error.is_none()).then(|| {
        let window = scenario.tracking.both.deviation_window();
        records.iter().filter(|r| window.contains(r.t)).map(|r| (r.fg_true - r.fg_target).abs()).fold(0.0, f64::max)
    });
    Ok(CellResult { spec: spec.clone(), records, stats, max_fg_deviation, error })
}

/// Thread count from `TRACTION_SIM_THREADS`, if set.
pub fn thread_cap() -> Option<usize> {
    std::env::var(THREADS_ENV).ok()?.trim().parse().ok().filter(|n| *n > 0)
}

/// Run cells in parallel; results come back in input order.
pub fn run_cells(scenario: &Scenario, cells: &[CellSpec]) -> Result<Vec<CellResult>, RunError> {
    let work = || cells.par_iter().map(|c| run_tracking_cell(scenario, c)).collect::<Result<Vec<_>, _>>();
    match thread_cap() {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| RunError::Output(e.to_string()))?
            .install(work),
        None => work(),
    }
}

pub fn run_tracking(scenario: &Scenario, kind: TrackingKind) -> Result<Vec<CellResult>, RunError> {
    scenario.validate()?;
    run_cells(scenario, &tracking_cells(scenario, kind))
}

pub fn report_from_results(results: &[CellResult]) -> Result<ErrorReport, RunError> {
    let runs: Vec<RunStats> = results
        .iter()
        .filter_map(|r| {
            r.stats.map(|stats| RunStats {
                theta_deg: r.spec.theta_deg,
                frequency_hz: r.spec.frequency_hz,
                run: r.spec.run,
                stats,
            })
        })
        .collect();
    Ok(ErrorReport::from_runs(&runs)?)
}

const MANIFEST_HEADER: [&str; 11] = [
    "kind",
    "theta_deg",
    "frequency_hz",
    "amplitude",
    "mode",
    "run",
    "seed",
    "window_start",
    "window_end",
    "trace",
    "status",
];

fn create(path: &Path) -> Result<BufWriter<File>, RunError> {
    Ok(BufWriter::new(File::create(path).map_err(io_err(path))?))
}

fn csv_writer<W: Write>(out: W) -> csv::Writer<W> {
    csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out)
}

#[derive(Debug, Serialize)]
struct CellSummary<'a> {
    spec: &'a CellSpec,
    stats: Option<&'a PairStats>,
    max_fg_deviation: Option<f64>,
    error: Option<&'a str>,
}

/// Write traces, manifest, per-run statistics and the worst-case report.
pub fn write_tracking_outputs(dir: &Path, results: &[CellResult]) -> Result<ErrorReport, RunError> {
    let traces = dir.join("traces");
    fs::create_dir_all(&traces).map_err(io_err(&traces))?;

    let manifest_path = dir.join("manifest.csv");
    let mut manifest = csv_writer(create(&manifest_path)?);
    manifest.write_record(MANIFEST_HEADER).map_err(MetricsError::from)?;
    for r in results {
        let name = r.spec.trace_name();
        let path = traces.join(&name);
        write_trace(create(&path)?, &r.records)?;
        let s = &r.spec;
        manifest
            .write_record([
                s.kind.as_str().to_string(),
                fmt_g6(s.theta_deg),
                s.frequency_hz.map(|f| format!("{f}")).unwrap_or_default(),
                fmt_g6(s.amplitude),
                s.mode.as_str().to_string(),
                s.run.to_string(),
                s.seed.to_string(),
                format!("{}", s.window.start),
                format!("{}", s.window.end),
                format!("traces/{name}"),
                if r.error.is_some() { "fault".into() } else { "ok".into() },
            ])
            .map_err(MetricsError::from)?;
    }
    manifest.flush().map_err(io_err(&manifest_path))?;

    let runs_path = dir.join("runs.csv");
    let mut runs = csv_writer(create(&runs_path)?);
    runs.write_record(["theta_deg", "frequency_hz", "run", "pair", "statistic", "value"])
        .map_err(MetricsError::from)?;
    for r in results {
        if let Some(stats) = &r.stats {
            for pair in crate::metrics::ComparisonPair::ALL {
                for stat in crate::metrics::Statistic::ALL {
                    runs.write_record([
                        fmt_g6(r.spec.theta_deg),
                        r.spec.frequency_hz.map(fmt_g6).unwrap_or_default(),
                        r.spec.run.to_string(),
                        pair.as_str().to_string(),
                        stat.as_str().to_string(),
                        fmt_g6(stats.get(pair).get(stat)),
                    ])
                    .map_err(MetricsError::from)?;
                }
            }
        }
    }
    runs.flush().map_err(io_err(&runs_path))?;

    let report = report_from_results(results)?;
    let report_path = dir.join("report.csv");
    report.write_csv(create(&report_path)?)?;

    let summary: Vec<CellSummary> = results
        .iter()
        .map(|r| CellSummary {
            spec: &r.spec,
            stats: r.stats.as_ref(),
            max_fg_deviation: r.max_fg_deviation,
            error: r.error.as_deref(),
        })
        .collect();
    let summary_path = dir.join("summary.json");
    let mut out = create(&summary_path)?;
    serde_json::to_writer_pretty(&mut out, &summary).map_err(|e| RunError::Output(e.to_string()))?;
    writeln!(out).map_err(io_err(&summary_path))?;
    out.flush().map_err(io_err(&summary_path))?;
    Ok(report)
}

/// Recompute `report.csv` from a tracking output directory.
pub fn analyze_dir(dir: &Path) -> Result<ErrorReport, RunError> {
    let manifest_path = dir.join("manifest.csv");
    let mut reader = csv::Reader::from_reader(File::open(&manifest_path).map_err(io_err(&manifest_path))?);
    let headers = reader.headers().map_err(MetricsError::from)?.clone();
    if headers.iter().ne(MANIFEST_HEADER.iter().copied()) {
        return Err(RunError::Output(format!("{}: unexpected header", manifest_path.display())));
    }
    let mut runs = Vec::new();
    for row in reader.records() {
        let row = row.map_err(MetricsError::from)?;
        if &row[10] != "ok" {
            continue;
        }
        let num = |i: usize| -> Result<f64, RunError> {
            row[i].parse().map_err(|_| {
                RunError::Output(format!("manifest column {} not numeric: {:?}", MANIFEST_HEADER[i], &row[i]))
            })
        };
        let frequency_hz = if row[2].is_empty() { None } else { Some(num(2)?) };
        let trace_path = dir.join(&row[9]);
        let records = read_trace(File::open(&trace_path).map_err(io_err(&trace_path))?)?;
        runs.push(RunStats {
            theta_deg: num(1)?,
            frequency_hz,
            run: row[5].parse().map_err(|_| RunError::Output("manifest run not an integer".into()))?,
            stats: pair_stats(&records, Window::new(num(7)?, num(8)?))?,
        });
    }
    let report = ErrorReport::from_runs(&runs)?;
    report.write_csv(create(&dir.join("report.csv"))?)?;
    Ok(report)
}

/// Feeds timed script records to a session. Records become due at their
/// offset; operator decisions wait until the session asks for one.
#[derive(Debug, Clone, Default)]
pub struct ScriptFeeder {
    pending: VecDeque<ScriptRecord>,
}

impl ScriptFeeder {
    pub fn new(records: Vec<ScriptRecord>) -> Self {
        Self { pending: records.into() }
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    pub fn next(&mut self, t: f64, phase: SessionPhase) -> Option<OperatorCommand> {
        let front = self.pending.front()?;
        let due = t >= front.t_offset_s - 1e-9;
        if due && (front.command.is_immediate() || phase.awaits_operator()) {
            return self.pending.pop_front().map(|r| r.command);
        }
        None
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseLogEntry {
    pub t: f64,
    pub from: SessionPhase,
    pub to: SessionPhase,
    pub cut_index: u32,
    pub fp_target: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventLogEntry {
    pub t: f64,
    pub event: FsmEvent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Done,
    Failed(FailReason),
    /// Waiting for an operator with nothing left in the script.
    Stalled,
    Timeout,
}

impl Outcome {
    pub fn as_str(&self) -> String {
        match self {
            Outcome::Done => "done".into(),
            Outcome::Failed(r) => format!("failed:{}", r.as_str()),
            Outcome::Stalled => "stalled".into(),
            Outcome::Timeout => "timeout".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TractionSummary {
    pub outcome: Outcome,
    pub cuts: u32,
    pub duration_s: f64,
    pub samples: usize,
    pub seed: u64,
    /// Pulling targets in the order they were pulled to (N).
    pub schedule: Vec<f64>,
    pub max_d_p: f64,
    pub operator_check: bool,
    pub final_fg_true: f64,
    pub final_fg_target: f64,
    pub final_fp_true: f64,
    pub error: Option<String>,
}

/// What one tick produced.
#[derive(Debug, Clone)]
pub struct TickReport {
    pub record: TraceRecord,
    pub events: Vec<FsmEvent>,
    pub phase_changes: Vec<PhaseLogEntry>,
    pub ack: Option<CommandAck>,
    pub phase: SessionPhase,
}

/// A resection session that can be advanced one sample at a time.
#[derive(Debug, Clone)]
pub struct TractionRun {
    sim: Loop,
    session: TractionSession,
    records: Vec<TraceRecord>,
    phases: Vec<PhaseLogEntry>,
    events: Vec<EventLogEntry>,
    last_directive: Directive,
    max_d_p: f64,
    seed: u64,
    error: Option<String>,
    operator_check: bool,
}

impl TractionRun {
    pub fn new(scenario: &Scenario) -> Result<Self, RunError> {
        scenario.validate()?;
        let models = scenario.models();
        let state = PlantState::approaching(&models.tissue, scenario.traction.initial_gap);
        let session = TractionSession::new(scenario.traction.params).map_err(|e| RunError::Params(e.0))?;
        Ok(Self {
            sim: Loop::new(scenario, models, state, scenario.sim.seed)?,
            session,
            records: Vec::new(),
            phases: Vec::new(),
            events: Vec::new(),
            last_directive: Directive::Hold,
            max_d_p: f64::NEG_INFINITY,
            seed: scenario.sim.seed,
            error: None,
            operator_check: false,
        })
    }

    pub fn phase(&self) -> SessionPhase {
        self.session.phase()
    }

    pub fn session(&self) -> &TractionSession {
        &self.session
    }

    pub fn time(&self) -> f64 {
        self.sim.time()
    }

    pub fn dt(&self) -> f64 {
        self.sim.dt()
    }

    pub fn plant(&self) -> &Plant {
        &self.sim.plant
    }

    pub fn records(&self) -> &[TraceRecord] {
        &self.records
    }

    pub fn phase_log(&self) -> &[PhaseLogEntry] {
        &self.phases
    }

    pub fn event_log(&self) -> &[EventLogEntry] {
        &self.events
    }

    pub fn is_finished(&self) -> bool {
        self.session.phase().is_terminal()
    }

    fn input_for(&mut self, directive: Directive, sensed: &ForceReadings, targets: &ForceTargets) -> PlantInput {
        match directive {
            Directive::Hold => PlantInput::ZERO,
            Directive::Move { u1 } => PlantInput::new(u1, 0.0),
            Directive::Control(mode) => self.sim.control(mode, sensed, targets),
        }
    }

    /// Keep `d_p` from passing `limit` while `u` is held for one interval.
    fn clamp_to_limit(&self, mut u: PlantInput, limit: f64) -> PlantInput {
        let d_p = self.sim.plant.state().d_p;
        let ceiling = (limit - d_p - 1e-9) / self.sim.dt() - u.u2;
        let floor = -self.sim.plant.models.limits.v_max_lower;
        if u.u1 > ceiling {
            u.u1 = ceiling.max(floor);
        }
        u
    }

    /// Advance one sensor sample, applying at most one operator command.
    pub fn tick(&mut self, command: Option<OperatorCommand>) -> TickReport {
        let t = self.sim.time();
        let (truth, sensed) = self.sim.sample();
        let state = *self.sim.plant.state();
        let phase_before = self.session.phase();
        let out = self.session.tick(t, &sensed, state.d_p, state.failure, command);
        let mut events = out.events;
        let mut labels: Vec<String> = Vec::new();

        if let Some(fraction) = out.cut {
            match self.sim.plant.apply_cut(fraction) {
                Ok(CutOutcome::Applied) => {}
                Ok(CutOutcome::IgnoredDisengaged) => labels.push("cut_ignored".into()),
                Err(e) => labels.push(format!("cut_error:{e}")),
            }
        }
        for e in &events {
            match e {
                FsmEvent::PullStarted { .. } => self.sim.controller.reset_pull(),
                FsmEvent::CutoffDetected { .. } => self.operator_check = true,
                _ => {}
            }
        }
        if self.last_directive == Directive::Hold && matches!(out.directive, Directive::Control(_)) {
            self.sim.controller.resume();
        }
        self.last_directive = out.directive;

        let mut input = self.input_for(out.directive, &sensed, &out.targets);
        if let Some(limit) = out.distance_limit {
            input = self.clamp_to_limit(input, limit);
        }

        let mut phase = self.session.phase();
        let mut record = self.sim.record(&truth, &sensed, &out.targets, input, &phase.to_string(), Vec::new());
        if !phase.is_terminal() {
            if let Err(e) = self.sim.advance(input) {
                self.error = Some(e.to_string());
                events.extend(self.session.fail(t, FailReason::Plant));
                phase = self.session.phase();
                record.phase = phase.to_string();
            }
        }
        labels.splice(0..0, events.iter().map(FsmEvent::label));
        record.events = labels;
        self.max_d_p = self.max_d_p.max(state.d_p).max(self.sim.plant.state().d_p);

        let mut phase_changes = Vec::new();
        let mut from = phase_before;
        for e in &events {
            if let FsmEvent::PhaseChanged { to, .. } = e {
                let entry = PhaseLogEntry {
                    t,
                    from,
                    to: *to,
                    cut_index: self.session.cuts(),
                    fp_target: self.session.targets().fp,
                };
                from = *to;
                phase_changes.push(entry);
            }
        }
        self.phases.extend(phase_changes.iter().cloned());
        self.events.extend(events.iter().map(|e| EventLogEntry { t, event: e.clone() }));
        self.records.push(record.clone());

        TickReport { record, events, phase_changes, ack: out.ack, phase }
    }

    pub fn summary(&self, outcome: Outcome) -> TractionSummary {
        let last = self.records.last().cloned().unwrap_or_default();
        TractionSummary {
            outcome,
            cuts: self.session.cuts(),
            duration_s: last.t,
            samples: self.records.len(),
            seed: self.seed,
            schedule: self.session.schedule().to_vec(),
            max_d_p: self.max_d_p,
            operator_check: self.operator_check,
            final_fg_true: last.fg_true,
            final_fg_target: last.fg_target,
            final_fp_true: last.fp_true,
            error: self.error.clone(),
        }
    }

    /// Outcome implied by the current phase, if the run is over.
    pub fn outcome(&self) -> Option<Outcome> {
        match self.session.phase() {
            SessionPhase::Done => Some(Outcome::Done),
            SessionPhase::Failed(r) => Some(Outcome::Failed(r)),
            _ => None,
        }
    }

    pub fn write_outputs(&self, dir: &Path, outcome: Outcome) -> Result<(), RunError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        write_trace(create(&dir.join("trace.csv"))?, &self.records)?;

        let phases_path = dir.join("phases.csv");
        let mut w = csv_writer(create(&phases_path)?);
        w.write_record(["t", "from", "to", "cut_index", "fp_target"]).map_err(MetricsError::from)?;
        for p in &self.phases {
            w.write_record([
                fmt_g6(p.t),
                p.from.to_string(),
                p.to.to_string(),
                p.cut_index.to_string(),
                fmt_g6(p.fp_target),
            ])
            .map_err(MetricsError::from)?;
        }
        w.flush().map_err(io_err(&phases_path))?;

        let events_path = dir.join("events.csv");
        let mut w = csv_writer(create(&events_path)?);
        w.write_record(["t", "event", "detail"]).map_err(MetricsError::from)?;
        for e in &self.events {
            let detail = serde_json::to_string(&e.event).map_err(|err| RunError::Output(err.to_string()))?;
            w.write_record([fmt_g6(e.t), e.event.label(), detail]).map_err(MetricsError::from)?;
        }
        w.flush().map_err(io_err(&events_path))?;

        let summary_path = dir.join("summary.json");
        let mut out = create(&summary_path)?;
        serde_json::to_writer_pretty(&mut out, &self.summary(outcome)).map_err(|e| RunError::Output(e.to_string()))?;
        writeln!(out).map_err(io_err(&summary_path))?;
        out.flush().map_err(io_err(&summary_path))?;
        Ok(())
    }
}

/// Headless run driven by a command script.
pub fn run_traction(scenario: &Scenario, script: Vec<ScriptRecord>) -> Result<(TractionRun, Outcome), RunError> {
    let mut run = TractionRun::new(scenario)?;
    let mut feeder = ScriptFeeder::new(script);
    let max_samples = (scenario.traction.max_duration / run.dt()).ceil() as u64 + 1;
    for _ in 0..max_samples {
        let command = feeder.next(run.time(), run.phase());
        run.tick(command);
        if let Some(outcome) = run.outcome() {
            return Ok((run, outcome));
        }
        if run.phase().awaits_operator() && feeder.is_empty() {
            return Ok((run, Outcome::Stalled));
        }
    }
    Ok((run, Outcome::Timeout))
}
