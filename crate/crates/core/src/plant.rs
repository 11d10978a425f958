//! Fixed-step simulation of the forceps/tissue traction plant.
//!
//! The state is `x = [d_p, d_s]` (jaw and spring-base displacement relative to
//! the tissue body) driven by the two driver speeds through `x' = B u` with
//! `A = 0`. Outputs follow the Kelvin–Voigt tissue and the spring:
//!
//! ```text
//! F_p = kt d_p + ct d_p'
//! F_d = F_p + ks (d_p - d_s)
//! F_g = g F_d,   g = l2 sin(alpha) / (2 l3)
//! ```
//!
//! Explicit Euler is exact here for piecewise-constant inputs.

use nalgebra::{DMatrix, Matrix2, Vector2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    coupling_gain, grasping_force, ForceReadings, ForcepsGeometry, ModelError, SpringModel, TissueModel,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("non-finite plant state or output")]
    NonFinite,
    #[error("integration step must be positive, got {0}")]
    BadStep(f64),
    #[error("driver speed {value} mm/s exceeds limit {limit} mm/s on the {driver} driver")]
    InputOutOfLimits { driver: &'static str, value: f64, limit: f64 },
    #[error("cut fraction must lie in (0, 1), got {0}")]
    BadCutFraction(f64),
    #[error("invalid simulation config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Failure {
    #[default]
    None,
    Slide,
    Split,
    Break,
}

impl Failure {
    pub fn is_failed(self) -> bool {
        self != Failure::None
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Failure::None => "none",
            Failure::Slide => "slide",
            Failure::Split => "split",
            Failure::Break => "break",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantState {
    pub d_p: f64,
    pub d_s: f64,
    pub d_l: f64,
    pub d_u: f64,
    pub engaged: bool,
    pub kt_eff: f64,
    pub failure: Failure,
}

impl PlantState {
    /// Tissue held in the jaws, everything at rest.
    pub fn engaged_at_rest(tissue: &TissueModel) -> Self {
        Self { d_p: 0.0, d_s: 0.0, d_l: 0.0, d_u: 0.0, engaged: true, kt_eff: tissue.kt, failure: Failure::None }
    }

    /// Forceps `gap` mm short of the tissue surface; contact engages at `d_p = 0`.
    pub fn approaching(tissue: &TissueModel, gap: f64) -> Self {
        Self { d_p: gap, d_s: gap, d_l: gap, d_u: 0.0, engaged: false, kt_eff: tissue.kt, failure: Failure::None }
    }

    /// Spring deformation.
    pub fn ts(&self) -> f64 {
        self.d_p - self.d_s
    }

    pub fn as_vector(&self) -> Vector2<f64> {
        Vector2::new(self.d_p, self.d_s)
    }

    fn is_finite(&self) -> bool {
        [self.d_p, self.d_s, self.d_l, self.d_u, self.kt_eff].iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PlantInput {
    /// Lower-driver speed (mm/s).
    pub u1: f64,
    /// Upper-driver speed (mm/s).
    pub u2: f64,
}

impl PlantInput {
    pub const ZERO: PlantInput = PlantInput { u1: 0.0, u2: 0.0 };

    pub fn new(u1: f64, u2: f64) -> Self {
        Self { u1, u2 }
    }

    pub fn as_vector(&self) -> Vector2<f64> {
        Vector2::new(self.u1, self.u2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ActuatorLimits {
    pub v_max_lower: f64,
    pub v_max_upper: f64,
}

impl Default for ActuatorLimits {
    fn default() -> Self {
        Self { v_max_lower: 5.0, v_max_upper: 5.0 }
    }
}

/// Disturbance produced by a scissor cut.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CutModel {
    /// Envelope amplitude of the pulling-force transient (N).
    pub transient_amplitude: f64,
    /// Duration of the transient (s).
    pub transient_duration: f64,
    /// Fraction of spring deformation lost per cut as the grip relaxes.
    pub grip_relaxation: f64,
}

impl Default for CutModel {
    fn default() -> Self {
        Self { transient_amplitude: 0.1, transient_duration: 0.5, grip_relaxation: 0.05 }
    }
}

impl CutModel {
    /// Damped two-cycle oscillation, zero at both ends of the window.
    pub fn transient(&self, elapsed: f64) -> f64 {
        if self.transient_duration <= 0.0 || !(0.0..self.transient_duration).contains(&elapsed) {
            return 0.0;
        }
        let s = elapsed / self.transient_duration;
        self.transient_amplitude * (4.0 * std::f64::consts::PI * s).sin() * (1.0 - s)
    }
}

/// Physical parameters shared by every step of one plant instance.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PlantModels {
    pub geometry: ForcepsGeometry,
    pub spring: SpringModel,
    pub tissue: TissueModel,
    pub limits: ActuatorLimits,
}

impl PlantModels {
    pub fn validate(&self) -> Result<(), SimError> {
        self.geometry.validate()?;
        self.spring.validate()?;
        self.tissue.validate()?;
        if !(self.limits.v_max_lower > 0.0 && self.limits.v_max_upper > 0.0) {
            return Err(SimError::Config("actuator limits must be > 0".into()));
        }
        Ok(())
    }
}

pub fn input_matrix() -> Matrix2<f64> {
    Matrix2::new(1.0, 1.0, 1.0, 0.0)
}

/// Output matrices `(C, D)` for `y = [F_g, F_p] = C x + D u`.
pub fn output_matrices(models: &PlantModels, kt: f64) -> (Matrix2<f64>, Matrix2<f64>) {
    let g = coupling_gain(&models.geometry);
    let ks = models.spring.ks;
    let ct = models.tissue.ct;
    let c = Matrix2::new(g * (kt + ks), -g * ks, kt, 0.0);
    let d = Matrix2::new(g * ct, g * ct, ct, ct);
    (c, d)
}

fn rank(m: DMatrix<f64>) -> usize {
    let (rows, cols) = m.shape();
    let svd = m.svd(false, false);
    let sigma_max = svd.singular_values.max();
    if sigma_max == 0.0 {
        return 0;
    }
    svd.rank(rows.max(cols) as f64 * f64::EPSILON * sigma_max)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankReport {
    pub controllable: bool,
    pub observable: bool,
}

/// Controllability `[B, AB]` and observability `[C; CA]` rank tests of the
/// linear plant built from the given parameters.
pub fn rank_checks(tissue: &TissueModel, spring: &SpringModel, geometry: &ForcepsGeometry) -> RankReport {
    let models =
        PlantModels { geometry: *geometry, spring: *spring, tissue: *tissue, limits: ActuatorLimits::default() };
    let a = Matrix2::<f64>::zeros();
    let b = input_matrix();
    let (c, _) = output_matrices(&models, tissue.kt);

    let ab = a * b;
    let controllability = DMatrix::from_fn(2, 4, |i, j| if j < 2 { b[(i, j)] } else { ab[(i, j - 2)] });
    let ca = c * a;
    let observability = DMatrix::from_fn(4, 2, |i, j| if i < 2 { c[(i, j)] } else { ca[(i - 2, j)] });

    RankReport { controllable: rank(controllability) == 2, observable: rank(observability) == 2 }
}

fn check_limits(input: &PlantInput, limits: &ActuatorLimits) -> Result<(), SimError> {
    if !(input.u1.is_finite() && input.u2.is_finite()) {
        return Err(SimError::NonFinite);
    }
    if input.u1.abs() > limits.v_max_lower {
        return Err(SimError::InputOutOfLimits { driver: "lower", value: input.u1, limit: limits.v_max_lower });
    }
    if input.u2.abs() > limits.v_max_upper {
        return Err(SimError::InputOutOfLimits { driver: "upper", value: input.u2, limit: limits.v_max_upper });
    }
    Ok(())
}

/// Plant outputs for a state under a given input, without failure detection.
pub fn outputs(state: &PlantState, input: &PlantInput, models: &PlantModels) -> ForceReadings {
    let fs = models.spring.ks * state.ts();
    if !state.engaged || state.failure.is_failed() {
        return ForceReadings { fd: fs, fs, fp: 0.0, fg: 0.0, fs_saturated: false, slack: false };
    }
    let fp = state.kt_eff * state.d_p + models.tissue.ct * (input.u1 + input.u2);
    ForceReadings::from_drive(fp + fs, fs, &models.geometry)
}

fn detect_failure(readings: &ForceReadings, d_p: f64, tissue: &TissueModel) -> Failure {
    if readings.fg > tissue.break_grasp_force {
        Failure::Break
    } else if readings.fp > tissue.split_force {
        Failure::Split
    } else if d_p > 0.0 && readings.fp > 0.0 && readings.fp > tissue.grip_limit_ratio * readings.fg {
        // only stretched tissue under tension can pull out of the jaws
        Failure::Slide
    } else {
        Failure::None
    }
}

/// One explicit-Euler step. Returns the new state and the plant outputs at the
/// end of the step.
pub fn step(
    state: &PlantState,
    input: &PlantInput,
    models: &PlantModels,
    dt: f64,
) -> Result<(PlantState, ForceReadings), SimError> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(SimError::BadStep(dt));
    }
    check_limits(input, &models.limits)?;
    if !state.is_finite() {
        return Err(SimError::NonFinite);
    }

    let mut next = *state;
    let effective = if state.failure.is_failed() {
        // a failed grasp no longer responds to the upper driver
        PlantInput::new(input.u1, 0.0)
    } else {
        *input
    };
    let dx = input_matrix() * effective.as_vector() * dt;
    next.d_p += dx[0];
    next.d_s += dx[1];
    next.d_l += effective.u1 * dt;
    next.d_u += effective.u2 * dt;

    if !next.engaged && !next.failure.is_failed() && next.d_p <= 0.0 {
        next.engaged = true;
    }

    let mut readings = outputs(&next, &effective, models);
    if next.engaged && !next.failure.is_failed() {
        if next.ts().abs() > models.spring.ts_max {
            return Err(ModelError::DeformationOutOfRange { ts: next.ts(), ts_max: models.spring.ts_max }.into());
        }
        let failure = detect_failure(&readings, next.d_p, &models.tissue);
        if failure.is_failed() {
            next.failure = failure;
            next.engaged = false;
            readings = outputs(&next, &effective, models);
        }
    }

    if !next.is_finite() || !readings.is_finite() {
        return Err(SimError::NonFinite);
    }
    Ok((next, readings))
}

/// Cut a fraction of the remaining tissue bridge: the effective stiffness
/// drops multiplicatively and the grip relaxes by `grip_relaxation` of the
/// current spring deformation. `d_p` is unchanged, so the elastic tissue force
/// drops in proportion to the cut.
pub fn apply_cut(state: &PlantState, cut_fraction: f64, grip_relaxation: f64) -> Result<PlantState, SimError> {
    if !(cut_fraction > 0.0 && cut_fraction < 1.0) {
        return Err(SimError::BadCutFraction(cut_fraction));
    }
    let mut next = *state;
    next.kt_eff *= 1.0 - cut_fraction;
    let relaxed_ts = state.ts() * (1.0 - grip_relaxation.clamp(0.0, 1.0));
    next.d_s = next.d_p - relaxed_ts;
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub dt_plant: f64,
    pub dt_sensor: f64,
    pub noise_sd: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        // 30 Hz sensing, 33 plant steps per sample
        Self { dt_plant: 1.0 / 990.0, dt_sensor: 1.0 / 30.0, noise_sd: 0.0, seed: 0 }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.dt_plant > 0.0 && self.dt_sensor > 0.0) {
            return Err(SimError::Config("time steps must be positive".into()));
        }
        if self.dt_plant > self.dt_sensor {
            return Err(SimError::Config("dt_plant must not exceed dt_sensor".into()));
        }
        let ratio = self.dt_sensor / self.dt_plant;
        if (ratio - ratio.round()).abs() > 1e-6 * ratio {
            return Err(SimError::Config(format!("dt_sensor must be an integer multiple of dt_plant (ratio {ratio})")));
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return Err(SimError::Config("noise_sd must be >= 0".into()));
        }
        Ok(())
    }

    pub fn substeps(&self) -> usize {
        (self.dt_sensor / self.dt_plant).round() as usize
    }
}

/// Sampled view of the plant through the sensing chain: the gauge measures
/// the driving force, the camera the spring force (saturating at its range),
/// and the pulling and grasping forces are derived from those two.
#[derive(Debug, Clone)]
pub struct Sensor {
    noise: Option<Normal<f64>>,
    rng: ChaCha8Rng,
}

impl Sensor {
    pub fn new(config: &SimConfig) -> Self {
        Self::with_seed(config.noise_sd, config.seed)
    }

    pub fn with_seed(noise_sd: f64, seed: u64) -> Self {
        let noise = (noise_sd > 0.0).then(|| Normal::new(0.0, noise_sd).expect("finite sd"));
        Self { noise, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn sample(&mut self, truth: &ForceReadings, spring: &SpringModel, geometry: &ForcepsGeometry) -> ForceReadings {
        let (nd, ns) = match &self.noise {
            Some(normal) => (normal.sample(&mut self.rng), normal.sample(&mut self.rng)),
            None => (0.0, 0.0),
        };
        let fd = truth.fd + nd;
        let (fs, saturated) = spring.saturate(truth.fs + ns);
        let grasp = grasping_force(fd, geometry);
        ForceReadings { fd, fs, fp: fd - fs, fg: grasp.fg, fs_saturated: saturated, slack: grasp.slack }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CutOutcome {
    Applied,
    IgnoredDisengaged,
}

/// A plant instance: state, clock, last outputs and the active cut transient.
#[derive(Debug, Clone)]
pub struct Plant {
    pub models: PlantModels,
    pub cut_model: CutModel,
    state: PlantState,
    time: f64,
    truth: ForceReadings,
    last_input: PlantInput,
    transient_start: Option<f64>,
}

impl Plant {
    pub fn new(models: PlantModels, cut_model: CutModel, state: PlantState) -> Result<Self, SimError> {
        models.validate()?;
        let truth = outputs(&state, &PlantInput::ZERO, &models);
        Ok(Self { models, cut_model, state, time: 0.0, truth, last_input: PlantInput::ZERO, transient_start: None })
    }

    pub fn state(&self) -> &PlantState {
        &self.state
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn last_input(&self) -> PlantInput {
        self.last_input
    }

    /// Current true outputs including any cut transient.
    pub fn readings(&self) -> ForceReadings {
        let mut r = self.truth;
        if let Some(start) = self.transient_start {
            let extra = self.cut_model.transient(self.time - start);
            if extra != 0.0 && self.state.engaged {
                r = ForceReadings::from_drive(r.fd + extra, r.fs, &self.models.geometry);
            }
        }
        r
    }

    pub fn step(&mut self, input: PlantInput, dt: f64) -> Result<ForceReadings, SimError> {
        let (next, truth) = step(&self.state, &input, &self.models, dt)?;
        self.state = next;
        self.truth = truth;
        self.last_input = input;
        self.time += dt;
        if let Some(start) = self.transient_start {
            if self.time - start >= self.cut_model.transient_duration {
                self.transient_start = None;
            }
        }
        Ok(self.readings())
    }

    pub fn apply_cut(&mut self, cut_fraction: f64) -> Result<CutOutcome, SimError> {
        if !(cut_fraction > 0.0 && cut_fraction < 1.0) {
            return Err(SimError::BadCutFraction(cut_fraction));
        }
        if !self.state.engaged || self.state.failure.is_failed() {
            return Ok(CutOutcome::IgnoredDisengaged);
        }
        self.state = apply_cut(&self.state, cut_fraction, self.cut_model.grip_relaxation)?;
        self.truth = outputs(&self.state, &self.last_input, &self.models);
        self.transient_start = Some(self.time);
        Ok(CutOutcome::Applied)
    }
}
