//! Discrete PID force controllers and the three control modes used during
//! grasping and pulling.
//!
//! Commands are driver speeds in mm/s. The controllers run at the sensor rate
//! and their output is held between ticks.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ForceReadings;
use crate::plant::{ActuatorLimits, PlantInput};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControlError {
    #[error("gain scheduling undefined: sin(theta/2 + alpha0) = {0} is too small")]
    Scheduling(f64),
    #[error("invalid gains: {0}")]
    Gains(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PidGains {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
    /// Clamp on the integral contribution to the command (mm/s).
    pub integral_limit: f64,
    /// Time constant of the first-order filter on the error before differentiation (s).
    pub derivative_filter_tc: f64,
}

impl Default for PidGains {
    fn default() -> Self {
        Self::grasp()
    }
}

impl PidGains {
    pub fn new(kp: f64, ki: f64, kd: f64) -> Self {
        Self { kp, ki, kd, integral_limit: 5.0, derivative_filter_tc: 0.05 }
    }

    /// Grasping-force loop gains.
    pub fn grasp() -> Self {
        Self::new(20.0, 1.0, 1.0)
    }

    /// Pulling-force loop gains.
    pub fn pull() -> Self {
        Self::new(10.0, 2.0, 5.0)
    }

    pub fn validate(&self) -> Result<(), ControlError> {
        for (name, v) in [("kp", self.kp), ("ki", self.ki), ("kd", self.kd)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(ControlError::Gains(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(self.integral_limit > 0.0) {
            return Err(ControlError::Gains(format!("integral_limit must be > 0, got {}", self.integral_limit)));
        }
        if !(self.derivative_filter_tc >= 0.0 && self.derivative_filter_tc.is_finite()) {
            return Err(ControlError::Gains("derivative_filter_tc must be >= 0".into()));
        }
        Ok(())
    }
}

/// `sin(alpha0) / sin(theta/2 + alpha0)`.
pub fn schedule_factor(theta: f64, alpha0: f64) -> Result<f64, ControlError> {
    let denominator = (theta / 2.0 + alpha0).sin();
    if denominator <= 1e-6 {
        return Err(ControlError::Scheduling(denominator));
    }
    Ok(alpha0.sin() / denominator)
}

/// Scales all three gains so the grasp loop responds alike across jaw angles.
pub fn schedule_gains(base: &PidGains, theta: f64, alpha0: f64) -> Result<PidGains, ControlError> {
    let f = schedule_factor(theta, alpha0)?;
    Ok(PidGains { kp: base.kp * f, ki: base.ki * f, kd: base.kd * f, ..*base })
}

/// Discrete PID with trapezoidal integration, derivative of the filtered
/// error and conditional-integration anti-windup.
#[derive(Debug, Clone)]
pub struct Pid {
    gains: PidGains,
    output_limit: f64,
    integral: f64,
    prev_error: f64,
    filtered: Option<f64>,
    saturated: bool,
    faulted: bool,
}

impl Pid {
    pub fn new(gains: PidGains, output_limit: f64) -> Self {
        Self { gains, output_limit, integral: 0.0, prev_error: 0.0, filtered: None, saturated: false, faulted: false }
    }

    pub fn gains(&self) -> &PidGains {
        &self.gains
    }

    pub fn reset(&mut self) {
        *self = Self::new(self.gains, self.output_limit);
    }

    /// Restart differentiation after a pause without touching the integral.
    pub fn reseed_derivative(&mut self) {
        self.filtered = None;
    }

    pub fn integral(&self) -> f64 {
        self.integral
    }

    pub fn is_saturated(&self) -> bool {
        self.saturated
    }

    pub fn is_faulted(&self) -> bool {
        self.faulted
    }

    pub fn step(&mut self, error: f64, dt: f64) -> f64 {
        if !error.is_finite() || !(dt > 0.0) {
            self.faulted = true;
            self.saturated = false;
            return 0.0;
        }
        self.faulted = false;
        let g = self.gains;

        let derivative = match self.filtered {
            None => {
                self.filtered = Some(error);
                0.0
            }
            Some(prev) => {
                let a = dt / (g.derivative_filter_tc + dt);
                let next = prev + a * (error - prev);
                self.filtered = Some(next);
                (next - prev) / dt
            }
        };

        let mut candidate = self.integral + 0.5 * (error + self.prev_error) * dt;
        if g.ki > 0.0 {
            let bound = g.integral_limit / g.ki;
            candidate = candidate.clamp(-bound, bound);
        }
        self.prev_error = error;

        let raw = g.kp * error + g.ki * candidate + g.kd * derivative;
        let limited = raw.clamp(-self.output_limit, self.output_limit);
        self.saturated = limited != raw;
        if self.saturated && raw.signum() == error.signum() {
            // integrating would only push further into saturation
            let frozen = g.kp * error + g.ki * self.integral + g.kd * derivative;
            return frozen.clamp(-self.output_limit, self.output_limit);
        }
        self.integral = candidate;
        limited
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlMode {
    GraspHold,
    PullOnly,
    DecoupledPullGrasp,
}

impl ControlMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ControlMode::GraspHold => "grasp_hold",
            ControlMode::PullOnly => "pull_only",
            ControlMode::DecoupledPullGrasp => "decoupled_pull_grasp",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ForceTargets {
    pub fg: f64,
    pub fp: f64,
}

/// Grasp and pull tracking errors, target minus estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackingError {
    pub e1: f64,
    pub e2: f64,
}

impl TrackingError {
    pub fn new(targets: &ForceTargets, sensed: &ForceReadings) -> Self {
        Self { e1: targets.fg - sensed.fg, e2: targets.fp - sensed.fp }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControllerConfig {
    pub grasp_gains: PidGains,
    pub pull_gains: PidGains,
    /// Cap on `|ts / d_u|` in the tip-motion compensation.
    pub ratio_cap: f64,
    /// Compensation is off until `|d_u|` exceeds this (mm).
    pub compensation_deadband: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            grasp_gains: PidGains::grasp(),
            pull_gains: PidGains::pull(),
            ratio_cap: 10.0,
            compensation_deadband: 0.05,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<(), ControlError> {
        self.grasp_gains.validate()?;
        self.pull_gains.validate()?;
        if !(self.ratio_cap > 0.0) {
            return Err(ControlError::Gains("ratio_cap must be > 0".into()));
        }
        if !(self.compensation_deadband >= 0.0) {
            return Err(ControlError::Gains("compensation_deadband must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ControlOutput {
    pub input: PlantInput,
    pub ratio_capped: bool,
    pub fault: bool,
}

/// The grasp and pull loops. The two PIDs share no state.
#[derive(Debug, Clone)]
pub struct ForceController {
    grasp: Pid,
    pull: Pid,
    limits: ActuatorLimits,
    ratio_cap: f64,
    deadband: f64,
}

impl ForceController {
    pub fn new(
        config: &ControllerConfig,
        theta: f64,
        alpha0: f64,
        limits: ActuatorLimits,
    ) -> Result<Self, ControlError> {
        config.validate()?;
        let grasp_gains = schedule_gains(&config.grasp_gains, theta, alpha0)?;
        Ok(Self {
            grasp: Pid::new(grasp_gains, limits.v_max_upper),
            pull: Pid::new(config.pull_gains, limits.v_max_lower),
            limits,
            ratio_cap: config.ratio_cap,
            deadband: config.compensation_deadband,
        })
    }

    pub fn grasp_pid(&self) -> &Pid {
        &self.grasp
    }

    pub fn pull_pid(&self) -> &Pid {
        &self.pull
    }

    pub fn reset_pull(&mut self) {
        self.pull.reset();
    }

    pub fn reset_grasp(&mut self) {
        self.grasp.reset();
    }

    /// Called after a hold so the next derivative is not taken across the pause.
    pub fn resume(&mut self) {
        self.grasp.reseed_derivative();
        self.pull.reseed_derivative();
    }

    /// Upper driver closes on the grasp error; the lower driver backs off by
    /// `ts / d_u` of that motion so the jaw tip stays put.
    pub fn grasp_mode_step(
        &mut self,
        sensed: &ForceReadings,
        ts: f64,
        d_u: f64,
        targets: &ForceTargets,
        dt: f64,
    ) -> ControlOutput {
        let e = TrackingError::new(targets, sensed);
        let mut u2 = self.grasp.step(e.e1, dt);
        let mut ratio = if d_u.abs() > self.deadband { ts / d_u } else { 0.0 };
        let mut ratio_capped = false;
        if !ratio.is_finite() || ratio.abs() > self.ratio_cap {
            ratio = if ratio.is_finite() { ratio.clamp(-self.ratio_cap, self.ratio_cap) } else { 0.0 };
            ratio_capped = true;
        }
        let mut u1 = -ratio * u2;
        if u1.abs() > self.limits.v_max_lower {
            // keep the compensation relation, slow both drivers
            let scale = self.limits.v_max_lower / u1.abs();
            u1 *= scale;
            u2 *= scale;
        }
        ControlOutput { input: PlantInput::new(u1, u2), ratio_capped, fault: self.grasp.is_faulted() }
    }

    /// Lower driver on the pull error, upper driver locked.
    pub fn pull_mode_step(&mut self, sensed: &ForceReadings, targets: &ForceTargets, dt: f64) -> ControlOutput {
        let e = TrackingError::new(targets, sensed);
        let u1 = self.pull.step(e.e2, dt);
        ControlOutput { input: PlantInput::new(u1, 0.0), ratio_capped: false, fault: self.pull.is_faulted() }
    }

    /// Lower driver on the pull error, upper driver on the grasp error.
    pub fn decoupled_mode_step(&mut self, sensed: &ForceReadings, targets: &ForceTargets, dt: f64) -> ControlOutput {
        let e = TrackingError::new(targets, sensed);
        let u1 = self.pull.step(e.e2, dt);
        let u2 = self.grasp.step(e.e1, dt);
        ControlOutput {
            input: PlantInput::new(u1, u2),
            ratio_capped: false,
            fault: self.pull.is_faulted() || self.grasp.is_faulted(),
        }
    }

    pub fn step(
        &mut self,
        mode: ControlMode,
        sensed: &ForceReadings,
        ts: f64,
        d_u: f64,
        targets: &ForceTargets,
        dt: f64,
    ) -> ControlOutput {
        match mode {
            ControlMode::GraspHold => self.grasp_mode_step(sensed, ts, d_u, targets, dt),
            ControlMode::PullOnly => self.pull_mode_step(sensed, targets, dt),
            ControlMode::DecoupledPullGrasp => self.decoupled_mode_step(sensed, targets, dt),
        }
    }
}
