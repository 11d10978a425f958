//! Forceps geometry, spring and tissue parameters, and the closed-form force
//! relations shared by the plant and the controllers.
//!
//! Everything here is reduced to the single axial degree of freedom along the
//! retraction axis. Lengths are in mm, forces in N, angles in rad.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance for the static law-of-cosines cross-check of the linkage angle.
pub const ALPHA_CROSS_CHECK_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid geometry: {0}")]
    Geometry(String),
    #[error("invalid spring model: {0}")]
    Spring(String),
    #[error("invalid tissue model: {0}")]
    Tissue(String),
    #[error("spring deformation {ts} mm exceeds the physical limit of {ts_max} mm")]
    DeformationOutOfRange { ts: f64, ts_max: f64 },
}

pub fn deg(x: f64) -> f64 {
    x.to_radians()
}

/// Linkage lengths and angles of the jaw mechanism.
///
/// `l3` is the effective jaw lever; extension jaws are modelled by configuring
/// a longer `l3`. `l12`, when present, is only used to cross-check `alpha`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForcepsGeometry {
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub l12: Option<f64>,
    pub alpha0: f64,
    pub theta: f64,
    pub theta_max: f64,
}

impl Default for ForcepsGeometry {
    fn default() -> Self {
        Self { l1: 1.0, l2: 2.0, l3: 1.5, l12: None, alpha0: deg(20.0), theta: 0.0, theta_max: deg(60.0) }
    }
}

impl ForcepsGeometry {
    pub fn with_theta(mut self, theta: f64) -> Self {
        self.theta = theta;
        self
    }

    pub fn alpha(&self) -> f64 {
        self.alpha0 + self.theta
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        for (name, v) in [("l1", self.l1), ("l2", self.l2), ("l3", self.l3)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(ModelError::Geometry(format!("{name} must be > 0, got {v}")));
            }
        }
        if !(self.theta_max.is_finite() && self.theta_max >= 0.0) {
            return Err(ModelError::Geometry(format!("theta_max must be >= 0, got {}", self.theta_max)));
        }
        if !(self.theta >= 0.0 && self.theta <= self.theta_max) {
            return Err(ModelError::Geometry(format!("theta {} outside [0, {}]", self.theta, self.theta_max)));
        }
        let alpha = self.alpha();
        if !(alpha > 0.0 && alpha < std::f64::consts::PI) {
            return Err(ModelError::Geometry(format!("alpha {alpha} outside (0, pi)")));
        }
        if let Some(l12) = self.l12 {
            if !(l12.is_finite() && l12 > 0.0) {
                return Err(ModelError::Geometry(format!("l12 must be > 0, got {l12}")));
            }
            let arg = cosine_argument(self.l1, self.l2, l12);
            if !(-1.0..=1.0).contains(&arg) {
                return Err(ModelError::Geometry(format!("arccos argument {arg} outside [-1, 1]")));
            }
        }
        Ok(())
    }
}

fn cosine_argument(l1: f64, l2: f64, l12: f64) -> f64 {
    (l12 * l12 + l2 * l2 - l1 * l1) / (2.0 * l1 * l12)
}

/// Scalar axial spring of the sensing module.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpringModel {
    pub ks: f64,
    pub ts_max: f64,
    pub fs_range: (f64, f64),
}

impl Default for SpringModel {
    fn default() -> Self {
        Self { ks: 1.0, ts_max: 5.0, fs_range: (0.0, 5.0) }
    }
}

impl SpringModel {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.ks.is_finite() && self.ks > 0.0) {
            return Err(ModelError::Spring(format!("ks must be > 0, got {}", self.ks)));
        }
        if !(self.ts_max.is_finite() && self.ts_max > 0.0) {
            return Err(ModelError::Spring(format!("ts_max must be > 0, got {}", self.ts_max)));
        }
        let (low, high) = self.fs_range;
        if low != 0.0 || !(high > low) {
            return Err(ModelError::Spring(format!("fs_range must be [0, high] with high > 0, got [{low}, {high}]")));
        }
        Ok(())
    }

    pub fn saturate(&self, fs: f64) -> (f64, bool) {
        let (low, high) = self.fs_range;
        let clamped = fs.clamp(low, high);
        (clamped, clamped != fs)
    }
}

/// Kelvin–Voigt tissue plus the failure limits of the grasp.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TissueModel {
    pub kt: f64,
    pub ct: f64,
    /// Largest tolerated pulling/grasping force ratio before the tissue slides out.
    pub grip_limit_ratio: f64,
    pub split_force: f64,
    pub break_grasp_force: f64,
}

impl Default for TissueModel {
    fn default() -> Self {
        Self { kt: 0.1, ct: 0.01, grip_limit_ratio: 1.2, split_force: 0.45, break_grasp_force: 0.5 }
    }
}

impl TissueModel {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.kt >= 0.0 && self.kt.is_finite()) {
            return Err(ModelError::Tissue(format!("kt must be >= 0, got {}", self.kt)));
        }
        if !(self.ct >= 0.0 && self.ct.is_finite()) {
            return Err(ModelError::Tissue(format!("ct must be >= 0, got {}", self.ct)));
        }
        for (name, v) in [
            ("grip_limit_ratio", self.grip_limit_ratio),
            ("split_force", self.split_force),
            ("break_grasp_force", self.break_grasp_force),
        ] {
            // infinity is allowed: it disables the failure mode (rigid test rigs)
            if v.is_nan() || v <= 0.0 {
                return Err(ModelError::Tissue(format!("{name} must be > 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// One set of axial forces acting on the forceps.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ForceReadings {
    /// Cable driving force.
    pub fd: f64,
    /// Spring (supporting) force.
    pub fs: f64,
    /// Pulling force; negative when pushing.
    pub fp: f64,
    /// Grasping force.
    pub fg: f64,
    pub fs_saturated: bool,
    pub slack: bool,
}

impl ForceReadings {
    pub fn is_finite(&self) -> bool {
        self.fd.is_finite() && self.fs.is_finite() && self.fp.is_finite() && self.fg.is_finite()
    }

    /// Builds a consistent set from the driving and spring forces.
    pub fn from_drive(fd: f64, fs: f64, geometry: &ForcepsGeometry) -> Self {
        let grasp = grasping_force(fd, geometry);
        Self { fd, fs, fp: pulling_force(fd, fs), fg: grasp.fg, fs_saturated: false, slack: grasp.slack }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpringForce {
    pub fs: f64,
    pub saturated: bool,
}

pub fn spring_force(ts: f64, spring: &SpringModel) -> Result<SpringForce, ModelError> {
    if !(ts.abs() <= spring.ts_max) {
        return Err(ModelError::DeformationOutOfRange { ts, ts_max: spring.ts_max });
    }
    let fs = spring.ks * ts;
    let (low, high) = spring.fs_range;
    Ok(SpringForce { fs, saturated: fs < low || fs > high })
}

pub fn pulling_force(fd: f64, fs: f64) -> f64 {
    fd - fs
}

/// Linkage angle `alpha0 + theta`, cross-checked against the law of cosines
/// when the joint distance `l12` is configured.
pub fn alpha_of(geometry: &ForcepsGeometry) -> Result<f64, ModelError> {
    geometry.validate()?;
    let alpha = geometry.alpha();
    if let Some(l12) = geometry.l12 {
        let from_linkage = cosine_argument(geometry.l1, geometry.l2, l12).acos();
        if (from_linkage - alpha).abs() > ALPHA_CROSS_CHECK_TOL {
            return Err(ModelError::Geometry(format!(
                "alpha0 + theta = {alpha} rad disagrees with linkage angle {from_linkage} rad"
            )));
        }
    }
    Ok(alpha)
}

/// `dFg/dFd`, which is also `dFg/dFp` at fixed spring force.
pub fn coupling_gain(geometry: &ForcepsGeometry) -> f64 {
    geometry.l2 * geometry.alpha().sin() / (2.0 * geometry.l3)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraspForce {
    pub fg: f64,
    /// Set when the cable would have to push; a slack cable transmits nothing.
    pub slack: bool,
}

pub fn grasping_force(fd: f64, geometry: &ForcepsGeometry) -> GraspForce {
    if fd < 0.0 {
        return GraspForce { fg: 0.0, slack: true };
    }
    GraspForce { fg: fd * coupling_gain(geometry), slack: false }
}
