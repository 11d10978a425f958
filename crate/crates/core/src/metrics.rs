//! Target-force profiles, tracking error statistics, worst-case aggregation
//! and the comma-separated trace/report formats.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("series length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty series")]
    Empty,
    #[error("empty group")]
    EmptyGroup,
    #[error("invalid profile: {0}")]
    Profile(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("trace format: {0}")]
    Format(String),
}

/// A target force as a function of time (N).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ForceProfile {
    /// Raised cosine: starts at `offset`, peaks at `offset + amplitude` after half a period.
    Sinusoid {
        amplitude: f64,
        frequency: f64,
        #[serde(default)]
        offset: f64,
    },
    Step {
        amplitude: f64,
        #[serde(default)]
        t_step: f64,
        #[serde(default)]
        offset: f64,
    },
    /// Linear from `offset` at `t_start` to `offset + amplitude` at `t_end`, held afterwards.
    RampHold {
        amplitude: f64,
        t_start: f64,
        t_end: f64,
        #[serde(default)]
        offset: f64,
    },
    /// Piecewise-linear through `(t, value)` knots, constant outside them.
    TractionPhase { knots: Vec<(f64, f64)> },
}

impl ForceProfile {
    pub fn sinusoid(amplitude: f64, frequency: f64) -> Self {
        ForceProfile::Sinusoid { amplitude, frequency, offset: 0.0 }
    }

    /// Grasping phase 0–5 s up to `level`, held through 25 s.
    pub fn traction_grasp(level: f64) -> Self {
        ForceProfile::TractionPhase { knots: vec![(0.0, 0.0), (5.0, level), (25.0, level)] }
    }

    /// Pulling phase ramps 8–18 s up to `level`, held through 25 s.
    pub fn traction_pull(level: f64) -> Self {
        ForceProfile::TractionPhase { knots: vec![(0.0, 0.0), (8.0, 0.0), (18.0, level), (25.0, level)] }
    }

    pub fn validate(&self) -> Result<(), MetricsError> {
        let bad = |m: &str| Err(MetricsError::Profile(m.to_string()));
        match self {
            ForceProfile::Sinusoid { amplitude, frequency, offset } => {
                if !(*amplitude >= 0.0) || !offset.is_finite() {
                    return bad("sinusoid amplitude must be >= 0");
                }
                if !(*frequency > 0.0 && frequency.is_finite()) {
                    return bad("sinusoid frequency must be > 0");
                }
            }
            ForceProfile::Step { amplitude, t_step, offset } => {
                if !(*amplitude >= 0.0) || !(*t_step >= 0.0) || !offset.is_finite() {
                    return bad("step amplitude and t_step must be >= 0");
                }
            }
            ForceProfile::RampHold { amplitude, t_start, t_end, offset } => {
                if !(*amplitude >= 0.0) || !offset.is_finite() {
                    return bad("ramp amplitude must be >= 0");
                }
                if !(*t_start >= 0.0 && t_end > t_start) {
                    return bad("ramp timings must satisfy 0 <= t_start < t_end");
                }
            }
            ForceProfile::TractionPhase { knots } => {
                if knots.is_empty() {
                    return bad("traction_phase needs at least one knot");
                }
                if knots.iter().any(|(t, v)| !t.is_finite() || !v.is_finite()) {
                    return bad("traction_phase knots must be finite");
                }
                if knots.windows(2).any(|w| w[1].0 <= w[0].0) {
                    return bad("traction_phase knot times must be strictly increasing");
                }
            }
        }
        Ok(())
    }

    /// Last time at which the profile changes.
    pub fn end_time(&self) -> f64 {
        match self {
            ForceProfile::Sinusoid { frequency, .. } => 1.0 / frequency,
            ForceProfile::Step { t_step, .. } => *t_step,
            ForceProfile::RampHold { t_end, .. } => *t_end,
            ForceProfile::TractionPhase { knots } => knots.last().map(|k| k.0).unwrap_or(0.0),
        }
    }
}

pub fn generate_profile(profile: &ForceProfile, t: f64) -> f64 {
    match profile {
        ForceProfile::Sinusoid { amplitude, frequency, offset } => {
            offset + amplitude * (1.0 - (2.0 * std::f64::consts::PI * frequency * t).cos()) / 2.0
        }
        ForceProfile::Step { amplitude, t_step, offset } => {
            if t >= *t_step {
                offset + amplitude
            } else {
                *offset
            }
        }
        ForceProfile::RampHold { amplitude, t_start, t_end, offset } => {
            let s = ((t - t_start) / (t_end - t_start)).clamp(0.0, 1.0);
            offset + amplitude * s
        }
        ForceProfile::TractionPhase { knots } => interpolate(knots, t),
    }
}

fn interpolate(knots: &[(f64, f64)], t: f64) -> f64 {
    let Some(first) = knots.first() else { return 0.0 };
    if t <= first.0 {
        return first.1;
    }
    for w in knots.windows(2) {
        let ((t0, v0), (t1, v1)) = (w[0], w[1]);
        if t <= t1 {
            return v0 + (v1 - v0) * (t - t0) / (t1 - t0);
        }
    }
    knots[knots.len() - 1].1
}

/// Mean absolute, root-mean-square and maximum of `|a - b|`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ErrorStats {
    pub mean: f64,
    pub rms: f64,
    pub max: f64,
}

impl ErrorStats {
    pub fn elementwise_max(&self, other: &ErrorStats) -> ErrorStats {
        ErrorStats { mean: self.mean.max(other.mean), rms: self.rms.max(other.rms), max: self.max.max(other.max) }
    }

    pub fn get(&self, statistic: Statistic) -> f64 {
        match statistic {
            Statistic::Mean => self.mean,
            Statistic::Rms => self.rms,
            Statistic::Max => self.max,
        }
    }
}

pub fn error_stats(a: &[f64], b: &[f64]) -> Result<ErrorStats, MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(MetricsError::Empty);
    }
    let n = a.len() as f64;
    let (mut sum, mut sum_sq, mut max) = (0.0, 0.0, 0.0f64);
    for (x, y) in a.iter().zip(b) {
        let d = (x - y).abs();
        sum += d;
        sum_sq += d * d;
        max = max.max(d);
    }
    let mean = sum / n;
    let rms = (sum_sq / n).sqrt();
    // rounding can leave rms a hair under mean for constant |a - b|
    Ok(ErrorStats { mean, rms: rms.max(mean).min(max), max })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Statistic {
    Mean,
    Rms,
    Max,
}

impl Statistic {
    pub const ALL: [Statistic; 3] = [Statistic::Mean, Statistic::Rms, Statistic::Max];

    pub fn as_str(self) -> &'static str {
        match self {
            Statistic::Mean => "mean",
            Statistic::Rms => "rms",
            Statistic::Max => "max",
        }
    }
}

/// The four comparisons of the worst-case table. Plant ground truth stands in
/// for the reference sensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComparisonPair {
    FgTargetVsEst,
    FgEstVsTrue,
    FpTargetVsEst,
    FpEstVsTrue,
}

impl ComparisonPair {
    pub const ALL: [ComparisonPair; 4] = [
        ComparisonPair::FgTargetVsEst,
        ComparisonPair::FgEstVsTrue,
        ComparisonPair::FpTargetVsEst,
        ComparisonPair::FpEstVsTrue,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ComparisonPair::FgTargetVsEst => "fg_target_vs_est",
            ComparisonPair::FgEstVsTrue => "fg_est_vs_true",
            ComparisonPair::FpTargetVsEst => "fp_target_vs_est",
            ComparisonPair::FpEstVsTrue => "fp_est_vs_true",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.as_str() == s)
    }

    fn series(self, r: &TraceRecord) -> (f64, f64) {
        match self {
            ComparisonPair::FgTargetVsEst => (r.fg_target, r.fg_est),
            ComparisonPair::FgEstVsTrue => (r.fg_est, r.fg_true),
            ComparisonPair::FpTargetVsEst => (r.fp_target, r.fp_est),
            ComparisonPair::FpEstVsTrue => (r.fp_est, r.fp_true),
        }
    }
}

/// Error statistics for every comparison pair, indexed like `ComparisonPair::ALL`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PairStats(pub [ErrorStats; 4]);

impl PairStats {
    pub fn get(&self, pair: ComparisonPair) -> &ErrorStats {
        &self.0[pair as usize]
    }

    pub fn elementwise_max(&self, other: &PairStats) -> PairStats {
        PairStats(std::array::from_fn(|i| self.0[i].elementwise_max(&other.0[i])))
    }
}

/// Closed time window `[start, end]` in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub start: f64,
    pub end: f64,
}

impl Window {
    pub const ALL: Window = Window { start: f64::NEG_INFINITY, end: f64::INFINITY };

    pub fn new(start: f64, end: f64) -> Self {
        Self { start, end }
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.start && t <= self.end
    }
}

pub fn pair_stats(records: &[TraceRecord], window: Window) -> Result<PairStats, MetricsError> {
    let in_window: Vec<&TraceRecord> = records.iter().filter(|r| window.contains(r.t)).collect();
    let mut out = PairStats::default();
    for pair in ComparisonPair::ALL {
        let (a, b): (Vec<f64>, Vec<f64>) = in_window.iter().map(|r| pair.series(r)).unzip();
        out.0[pair as usize] = error_stats(&a, &b)?;
    }
    Ok(out)
}

/// Statistics of one run together with its grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub theta_deg: f64,
    pub frequency_hz: Option<f64>,
    pub run: usize,
    pub stats: PairStats,
}

/// Element-wise maximum over repeated runs.
pub fn worst_case(runs: &[PairStats]) -> Result<PairStats, MetricsError> {
    let (first, rest) = runs.split_first().ok_or(MetricsError::EmptyGroup)?;
    Ok(rest.iter().fold(*first, |acc, s| acc.elementwise_max(s)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub theta_deg: f64,
    pub frequency_hz: Option<f64>,
    pub runs: usize,
    pub worst: PairStats,
}

/// Worst-case statistics per grid cell, in first-appearance order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ErrorReport {
    pub rows: Vec<ReportRow>,
}

impl ErrorReport {
    pub fn from_runs(runs: &[RunStats]) -> Result<Self, MetricsError> {
        let mut keys: Vec<(f64, Option<f64>)> = Vec::new();
        for r in runs {
            let key = (r.theta_deg, r.frequency_hz);
            if !keys.contains(&key) {
                keys.push(key);
            }
        }
        let rows = keys
            .into_iter()
            .map(|(theta_deg, frequency_hz)| {
                let group: Vec<PairStats> = runs
                    .iter()
                    .filter(|r| r.theta_deg == theta_deg && r.frequency_hz == frequency_hz)
                    .map(|r| r.stats)
                    .collect();
                Ok(ReportRow { theta_deg, frequency_hz, runs: group.len(), worst: worst_case(&group)? })
            })
            .collect::<Result<_, MetricsError>>()?;
        Ok(Self { rows })
    }

    pub fn find(&self, theta_deg: f64, frequency_hz: Option<f64>) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.theta_deg == theta_deg && r.frequency_hz == frequency_hz)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), MetricsError> {
        let mut w = csv_writer(out);
        w.write_record(["theta_deg", "frequency_hz", "pair", "statistic", "value"])?;
        for row in &self.rows {
            for pair in ComparisonPair::ALL {
                for stat in Statistic::ALL {
                    w.write_record([
                        fmt_g6(row.theta_deg),
                        row.frequency_hz.map(fmt_g6).unwrap_or_default(),
                        pair.as_str().to_string(),
                        stat.as_str().to_string(),
                        fmt_g6(row.worst.get(pair).get(stat)),
                    ])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// One sensor-rate sample of a run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: f64,
    pub fg_target: f64,
    pub fg_est: f64,
    pub fg_true: f64,
    pub fp_target: f64,
    pub fp_est: f64,
    pub fp_true: f64,
    pub fd: f64,
    pub fs: f64,
    pub d_p: f64,
    pub d_s: f64,
    pub d_l: f64,
    pub d_u: f64,
    pub u1: f64,
    pub u2: f64,
    pub phase: String,
    pub events: Vec<String>,
}

pub const TRACE_HEADER: [&str; 17] = [
    "t",
    "fg_target",
    "fg_est",
    "fg_true",
    "fp_target",
    "fp_est",
    "fp_true",
    "fd",
    "fs",
    "d_p",
    "d_s",
    "d_l",
    "d_u",
    "u1",
    "u2",
    "phase",
    "events",
];

impl TraceRecord {
    fn floats(&self) -> [f64; 15] {
        [
            self.t,
            self.fg_target,
            self.fg_est,
            self.fg_true,
            self.fp_target,
            self.fp_est,
            self.fp_true,
            self.fd,
            self.fs,
            self.d_p,
            self.d_s,
            self.d_l,
            self.d_u,
            self.u1,
            self.u2,
        ]
    }

    fn floats_mut(&mut self) -> [&mut f64; 15] {
        [
            &mut self.t,
            &mut self.fg_target,
            &mut self.fg_est,
            &mut self.fg_true,
            &mut self.fp_target,
            &mut self.fp_est,
            &mut self.fp_true,
            &mut self.fd,
            &mut self.fs,
            &mut self.d_p,
            &mut self.d_s,
            &mut self.d_l,
            &mut self.d_u,
            &mut self.u1,
            &mut self.u2,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.floats().iter().all(|v| v.is_finite())
    }

    /// The record as it reads back from a trace file.
    pub fn rounded(&self) -> TraceRecord {
        let mut out = self.clone();
        for v in out.floats_mut() {
            *v = round_g6(*v);
        }
        out
    }

    fn to_fields(&self) -> Vec<String> {
        let mut fields: Vec<String> = self.floats().iter().map(|v| fmt_g6(*v)).collect();
        fields.push(self.phase.clone());
        fields.push(self.events.join(";"));
        fields
    }
}

fn csv_writer<W: Write>(out: W) -> csv::Writer<W> {
    csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out)
}

pub fn write_trace<W: Write>(out: W, records: &[TraceRecord]) -> Result<(), MetricsError> {
    let mut w = csv_writer(out);
    w.write_record(TRACE_HEADER)?;
    for r in records {
        w.write_record(r.to_fields())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trace<R: Read>(input: R) -> Result<Vec<TraceRecord>, MetricsError> {
    let mut reader = csv::ReaderBuilder::new().from_reader(input);
    let headers = reader.headers()?.clone();
    if headers.iter().ne(TRACE_HEADER.iter().copied()) {
        return Err(MetricsError::Format(format!("unexpected header {:?}", headers)));
    }
    let mut out = Vec::new();
    for (line, row) in reader.records().enumerate() {
        let row = row?;
        let mut rec = TraceRecord::default();
        for (i, slot) in rec.floats_mut().into_iter().enumerate() {
            *slot = row[i].parse().map_err(|_| {
                MetricsError::Format(format!(
                    "row {}: column {} is not a number: {:?}",
                    line + 1,
                    TRACE_HEADER[i],
                    &row[i]
                ))
            })?;
        }
        rec.phase = row[15].to_string();
        rec.events = if row[16].is_empty() { Vec::new() } else { row[16].split(';').map(str::to_string).collect() };
        out.push(rec);
    }
    Ok(out)
}

/// Six significant digits, `%g` style.
pub fn fmt_g6(x: f64) -> String {
    if x.is_nan() {
        return "NaN".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{:.5e}", x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent in {:e} output");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..6).contains(&exp) {
        let mantissa = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{mantissa}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (5 - exp) as usize;
        trim_zeros(&format!("{:.*}", decimals, x)).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub fn round_g6(x: f64) -> f64 {
    if !x.is_finite() {
        return x;
    }
    fmt_g6(x).parse().expect("fmt_g6 output parses")
}
