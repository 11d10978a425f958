//! Scenario files (TOML) and operator command scripts (JSON Lines).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::{ControlMode, ControllerConfig};
use crate::fsm::{OperatorCommand, TractionParams};
use crate::metrics::{ForceProfile, Window};
use crate::model::{deg, ForcepsGeometry, SpringModel, TissueModel};
use crate::plant::{ActuatorLimits, CutModel, PlantModels, SimConfig};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
    #[error("cannot read {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Script { path: PathBuf, line: usize, message: String },
}

fn invalid(field: &str, message: impl ToString) -> ScenarioError {
    ScenarioError::Invalid { field: field.to_string(), message: message.to_string() }
}

/// Linkage geometry with angles in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeometryConfig {
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub l12: Option<f64>,
    pub alpha0_deg: f64,
    pub theta_deg: f64,
    pub theta_max_deg: f64,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self::from(&ForcepsGeometry::default())
    }
}

impl From<&ForcepsGeometry> for GeometryConfig {
    fn from(g: &ForcepsGeometry) -> Self {
        Self {
            l1: g.l1,
            l2: g.l2,
            l3: g.l3,
            l12: g.l12,
            alpha0_deg: g.alpha0.to_degrees(),
            theta_deg: g.theta.to_degrees(),
            theta_max_deg: g.theta_max.to_degrees(),
        }
    }
}

impl GeometryConfig {
    pub fn to_geometry(&self) -> ForcepsGeometry {
        ForcepsGeometry {
            l1: self.l1,
            l2: self.l2,
            l3: self.l3,
            l12: self.l12,
            alpha0: deg(self.alpha0_deg),
            theta: deg(self.theta_deg),
            theta_max: deg(self.theta_max_deg),
        }
    }
}

/// The simultaneous grasp-and-pull tracking experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BothConfig {
    pub grasp_profile: ForceProfile,
    pub pull_profile: ForceProfile,
    pub mode: ControlMode,
    /// Grasp-only control before this time (s).
    pub pull_start: f64,
    pub duration: f64,
    /// Statistics window (s).
    pub window: (f64, f64),
    /// Window for the grasping-force deviation (s).
    pub deviation_window: (f64, f64),
}

impl Default for BothConfig {
    fn default() -> Self {
        Self {
            grasp_profile: ForceProfile::traction_grasp(0.2),
            pull_profile: ForceProfile::traction_pull(2.0),
            mode: ControlMode::DecoupledPullGrasp,
            pull_start: 8.0,
            duration: 25.0,
            window: (8.0, 18.0),
            deviation_window: (8.0, 25.0),
        }
    }
}

impl BothConfig {
    pub fn stats_window(&self) -> Window {
        Window::new(self.window.0, self.window.1)
    }

    pub fn deviation_window(&self) -> Window {
        Window::new(self.deviation_window.0, self.deviation_window.1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackingConfig {
    pub theta_deg: Vec<f64>,
    pub frequencies_hz: Vec<f64>,
    /// Grasp sinusoid amplitude per entry of `theta_deg`.
    pub grasp_amplitudes: Vec<f64>,
    pub pull_amplitude: f64,
    /// Grasp preload the pull-tracking runs start from (N).
    pub pull_grasp_force: f64,
    /// Run length in profile periods.
    pub periods: f64,
    /// Periods excluded from the statistics at the start.
    pub settle_periods: f64,
    pub both: BothConfig,
}

impl Default for TrackingConfig {
    fn default() -> Self {
        Self {
            theta_deg: vec![10.0, 30.0, 50.0],
            frequencies_hz: vec![1.0 / 30.0, 1.0 / 15.0, 1.0 / 10.0],
            grasp_amplitudes: vec![0.2, 0.25, 0.3],
            pull_amplitude: 2.0,
            pull_grasp_force: 0.2,
            periods: 3.0,
            settle_periods: 1.0,
            both: BothConfig::default(),
        }
    }
}

impl TrackingConfig {
    pub fn grasp_amplitude(&self, theta_index: usize) -> f64 {
        match self.grasp_amplitudes.len() {
            1 => self.grasp_amplitudes[0],
            _ => self.grasp_amplitudes[theta_index],
        }
    }

    fn validate(&self) -> Result<(), ScenarioError> {
        if self.theta_deg.is_empty() {
            return Err(invalid("tracking.theta_deg", "at least one angle is required"));
        }
        if self.frequencies_hz.is_empty() || self.frequencies_hz.iter().any(|f| !(*f > 0.0)) {
            return Err(invalid("tracking.frequencies_hz", "need at least one frequency, all > 0"));
        }
        let n = self.grasp_amplitudes.len();
        if n != 1 && n != self.theta_deg.len() {
            return Err(invalid("tracking.grasp_amplitudes", "give one amplitude or one per angle"));
        }
        if self.grasp_amplitudes.iter().any(|a| !(*a >= 0.0)) {
            return Err(invalid("tracking.grasp_amplitudes", "amplitudes must be >= 0"));
        }
        if !(self.pull_amplitude >= 0.0 && self.pull_grasp_force > 0.0) {
            return Err(invalid("tracking.pull_amplitude", "pull amplitude >= 0 and grasp force > 0 required"));
        }
        if !(self.periods > 0.0 && self.settle_periods >= 0.0 && self.settle_periods < self.periods) {
            return Err(invalid("tracking.periods", "need 0 <= settle_periods < periods"));
        }
        let both = &self.both;
        both.grasp_profile.validate().map_err(|e| invalid("tracking.both.grasp_profile", e))?;
        both.pull_profile.validate().map_err(|e| invalid("tracking.both.pull_profile", e))?;
        if both.mode == ControlMode::GraspHold {
            return Err(invalid("tracking.both.mode", "must be pull_only or decoupled_pull_grasp"));
        }
        if !(both.duration > 0.0 && both.pull_start >= 0.0 && both.pull_start < both.duration) {
            return Err(invalid("tracking.both.duration", "need 0 <= pull_start < duration"));
        }
        for (name, (a, b)) in [("window", both.window), ("deviation_window", both.deviation_window)] {
            if !(a < b && a >= 0.0 && b <= both.duration) {
                return Err(invalid(&format!("tracking.both.{name}"), "need 0 <= start < end <= duration"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TractionConfig {
    /// Distance between the jaws and the tissue at start (mm).
    pub initial_gap: f64,
    /// Simulated time after which a headless run is abandoned (s).
    pub max_duration: f64,
    pub params: TractionParams,
}

impl Default for TractionConfig {
    fn default() -> Self {
        Self { initial_gap: 2.0, max_duration: 600.0, params: TractionParams::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("out") }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Scenario {
    pub geometry: GeometryConfig,
    pub spring: SpringModel,
    pub tissue: TissueModel,
    pub cut: CutModel,
    pub sim: SimConfig,
    pub actuators: ActuatorLimits,
    pub control: ControllerConfig,
    pub tracking: TrackingConfig,
    pub traction: TractionConfig,
    /// Command script for headless traction runs, relative to the scenario file.
    pub script: Option<PathBuf>,
    pub output: OutputConfig,
    pub repeat: usize,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            geometry: GeometryConfig::default(),
            spring: SpringModel::default(),
            tissue: TissueModel::default(),
            cut: CutModel::default(),
            sim: SimConfig::default(),
            actuators: ActuatorLimits::default(),
            control: ControllerConfig::default(),
            tracking: TrackingConfig::default(),
            traction: TractionConfig::default(),
            script: None,
            output: OutputConfig::default(),
            repeat: 1,
        }
    }
}

impl Scenario {
    /// Bench rig for the tracking experiments: extension jaws and a stiffer
    /// spring so the grasp can be held through a 2 N pull, tissue glued to the
    /// sensor.
    pub fn tracking_rig() -> Self {
        Self {
            geometry: GeometryConfig { l3: 11.0, ..GeometryConfig::default() },
            spring: SpringModel { ks: 3.0, ..SpringModel::default() },
            tissue: TissueModel {
                kt: 0.1,
                ct: 0.01,
                grip_limit_ratio: f64::INFINITY,
                split_force: f64::INFINITY,
                break_grasp_force: f64::INFINITY,
            },
            ..Self::default()
        }
    }

    /// Reference plant for the resection flow.
    pub fn traction_reference() -> Self {
        Self {
            geometry: GeometryConfig { theta_deg: 10.0, ..GeometryConfig::default() },
            tissue: TissueModel { kt: 0.03, ct: 0.01, ..TissueModel::default() },
            ..Self::default()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ScenarioError> {
        let de = toml::Deserializer::new(text);
        let scenario: Scenario = serde_path_to_error::deserialize(de).map_err(|e| ScenarioError::Parse {
            path: e.path().to_string(),
            message: e.inner().message().to_string(),
        })?;
        scenario.validate()?;
        Ok(scenario)
    }

    /// Load and validate; a relative `script` is resolved against the file's directory.
    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = fs::read_to_string(path).map_err(|source| ScenarioError::Io { path: path.to_path_buf(), source })?;
        let mut scenario = Self::from_toml_str(&text)?;
        if let (Some(script), Some(dir)) = (&scenario.script, path.parent()) {
            if script.is_relative() {
                scenario.script = Some(dir.join(script));
            }
        }
        Ok(scenario)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        self.geometry.to_geometry().validate().map_err(|e| invalid("geometry", e))?;
        self.spring.validate().map_err(|e| invalid("spring", e))?;
        self.tissue.validate().map_err(|e| invalid("tissue", e))?;
        self.sim.validate().map_err(|e| invalid("sim", e))?;
        self.control.validate().map_err(|e| invalid("control", e))?;
        self.traction.params.validate().map_err(|e| invalid("traction.params", e))?;
        self.tracking.validate()?;
        let limits = self.actuators;
        if !(limits.v_max_lower > 0.0 && limits.v_max_upper > 0.0) {
            return Err(invalid("actuators", "speed limits must be > 0"));
        }
        let cut = self.cut;
        if !(cut.transient_duration >= 0.0 && (0.0..1.0).contains(&cut.grip_relaxation)) {
            return Err(invalid("cut", "need transient_duration >= 0 and grip_relaxation in [0, 1)"));
        }
        if !(self.traction.initial_gap >= 0.0) {
            return Err(invalid("traction.initial_gap", "must be >= 0"));
        }
        if !(self.traction.max_duration > 0.0) {
            return Err(invalid("traction.max_duration", "must be > 0"));
        }
        if self.repeat == 0 {
            return Err(invalid("repeat", "must be >= 1"));
        }
        Ok(())
    }

    /// Plant models at the configured jaw angle.
    pub fn models(&self) -> PlantModels {
        self.models_at(self.geometry.theta_deg)
    }

    pub fn models_at(&self, theta_deg: f64) -> PlantModels {
        PlantModels {
            geometry: GeometryConfig { theta_deg, ..self.geometry }.to_geometry(),
            spring: self.spring,
            tissue: self.tissue,
            limits: self.actuators,
        }
    }
}

/// One timed operator command.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScriptRecord {
    pub t_offset_s: f64,
    #[serde(flatten)]
    pub command: OperatorCommand,
}

pub fn parse_script(text: &str, path: &Path) -> Result<Vec<ScriptRecord>, ScenarioError> {
    let mut out: Vec<ScriptRecord> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |message: String| ScenarioError::Script { path: path.to_path_buf(), line: i + 1, message };
        let record: ScriptRecord = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        if !(record.t_offset_s >= 0.0 && record.t_offset_s.is_finite()) {
            return Err(err("t_offset_s must be finite and >= 0".into()));
        }
        if out.last().is_some_and(|prev| prev.t_offset_s > record.t_offset_s) {
            return Err(err("records must be ordered by t_offset_s".into()));
        }
        out.push(record);
    }
    Ok(out)
}

pub fn load_script(path: &Path) -> Result<Vec<ScriptRecord>, ScenarioError> {
    let text = fs::read_to_string(path).map_err(|source| ScenarioError::Io { path: path.to_path_buf(), source })?;
    parse_script(&text, path)
}
