//! The resection operation flow: approach, grasp, pull, then alternate
//! operator cuts with reduced-target pulls until the operator confirms cutoff.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::{ControlMode, ForceTargets};
use crate::model::ForceReadings;
use crate::plant::Failure;

/// Distance checks allow this much numerical slack (mm).
pub const GUARD_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("invalid traction params: {0}")]
pub struct ParamsError(pub String);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TractionParams {
    /// Touch is declared once the sensed pulling force falls to this (N, negative).
    pub fp_touch: f64,
    pub fg_target: f64,
    pub fp_initial: f64,
    /// Each cut scales the pulling target by this ratio.
    pub rho: f64,
    /// Largest pulling distance between cuts (mm).
    pub d_incr_limit: f64,
    /// Largest total pulling distance (mm).
    pub d_total_limit: f64,
    /// Post-cut pulling force below this means the tissue is cut off (N).
    pub fp_cutoff: f64,
    pub decouple_during_pull: bool,
    /// Open-loop forward speed while approaching (mm/s).
    pub approach_speed: f64,
    /// Hold after a cut before the pulling force is judged (s).
    pub settle_time: f64,
    pub move_out_duration: f64,
}

impl Default for TractionParams {
    fn default() -> Self {
        Self {
            fp_touch: -0.05,
            fg_target: 0.3,
            fp_initial: 0.25,
            rho: 0.8,
            d_incr_limit: 20.0,
            d_total_limit: 30.0,
            fp_cutoff: 0.05,
            decouple_during_pull: true,
            approach_speed: 1.0,
            settle_time: 0.5,
            move_out_duration: 2.0,
        }
    }
}

impl TractionParams {
    pub fn validate(&self) -> Result<(), ParamsError> {
        let fail = |m: String| Err(ParamsError(m));
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return fail(format!("rho must be in (0, 1], got {}", self.rho));
        }
        if !(self.fp_cutoff > 0.0 && self.fp_touch < 0.0) {
            return fail("need fp_cutoff > 0 > fp_touch".into());
        }
        if !(self.d_incr_limit > 0.0 && self.d_total_limit > 0.0) {
            return fail("distance limits must be > 0".into());
        }
        if !(self.fg_target > 0.0 && self.fp_initial > 0.0) {
            return fail("fg_target and fp_initial must be > 0".into());
        }
        if !(self.approach_speed > 0.0) {
            return fail("approach_speed must be > 0".into());
        }
        if !(self.settle_time >= 0.0 && self.move_out_duration >= 0.0) {
            return fail("settle_time and move_out_duration must be >= 0".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailReason {
    Slide,
    Split,
    Break,
    Sensor,
    Plant,
    Aborted,
}

impl FailReason {
    pub fn as_str(self) -> &'static str {
        match self {
            FailReason::Slide => "slide",
            FailReason::Split => "split",
            FailReason::Break => "break",
            FailReason::Sensor => "sensor",
            FailReason::Plant => "plant",
            FailReason::Aborted => "aborted",
        }
    }

    fn from_failure(f: Failure) -> Option<Self> {
        match f {
            Failure::None => None,
            Failure::Slide => Some(FailReason::Slide),
            Failure::Split => Some(FailReason::Split),
            Failure::Break => Some(FailReason::Break),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionPhase {
    Approach,
    Grasping,
    InitialPull,
    AwaitCut,
    PostCutPull(u32),
    OperatorCheck,
    MoveOut,
    Done,
    Failed(FailReason),
}

impl SessionPhase {
    pub fn name(&self) -> &'static str {
        match self {
            SessionPhase::Approach => "approach",
            SessionPhase::Grasping => "grasping",
            SessionPhase::InitialPull => "initial_pull",
            SessionPhase::AwaitCut => "await_cut",
            SessionPhase::PostCutPull(_) => "post_cut_pull",
            SessionPhase::OperatorCheck => "operator_check",
            SessionPhase::MoveOut => "move_out",
            SessionPhase::Done => "done",
            SessionPhase::Failed(_) => "failed",
        }
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self, SessionPhase::Done | SessionPhase::Failed(_))
    }

    /// Phases that block until the operator acts.
    pub fn awaits_operator(&self) -> bool {
        matches!(self, SessionPhase::AwaitCut | SessionPhase::OperatorCheck)
    }

    pub fn is_pulling(&self) -> bool {
        matches!(self, SessionPhase::InitialPull | SessionPhase::PostCutPull(_))
    }

    /// Whether `command` is accepted in this phase.
    pub fn accepts(&self, command: &OperatorCommand) -> bool {
        if self.is_terminal() {
            return false;
        }
        match command {
            OperatorCommand::Abort | OperatorCommand::AdjustTargets { .. } => true,
            OperatorCommand::Cut { .. } => self.awaits_operator(),
            OperatorCommand::ConfirmCutoff | OperatorCommand::RequestAnotherCut => *self == SessionPhase::OperatorCheck,
        }
    }
}

impl fmt::Display for SessionPhase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SessionPhase::PostCutPull(i) => write!(f, "post_cut_pull:{i}"),
            SessionPhase::Failed(r) => write!(f, "failed:{}", r.as_str()),
            other => f.write_str(other.name()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", content = "args", rename_all = "snake_case", deny_unknown_fields)]
pub enum OperatorCommand {
    Cut {
        cut_fraction: f64,
    },
    ConfirmCutoff,
    RequestAnotherCut,
    Abort,
    AdjustTargets {
        #[serde(default)]
        d_fg: f64,
        #[serde(default)]
        d_fp: f64,
    },
}

impl OperatorCommand {
    pub fn name(&self) -> &'static str {
        match self {
            OperatorCommand::Cut { .. } => "cut",
            OperatorCommand::ConfirmCutoff => "confirm_cutoff",
            OperatorCommand::RequestAnotherCut => "request_another_cut",
            OperatorCommand::Abort => "abort",
            OperatorCommand::AdjustTargets { .. } => "adjust_targets",
        }
    }

    /// Applied as soon as they arrive rather than when an operator decision is due.
    pub fn is_immediate(&self) -> bool {
        matches!(self, OperatorCommand::Abort | OperatorCommand::AdjustTargets { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuardKind {
    Increment,
    Total,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FsmEvent {
    PhaseChanged { from: SessionPhase, to: SessionPhase },
    CommandAccepted { command: String },
    CommandRejected { command: String, reason: String },
    TouchDetected { fp: f64 },
    GraspComplete { fg: f64 },
    PullStarted { target: f64 },
    TargetReached { fp: f64, target: f64 },
    GuardTripped { guard: GuardKind, d_p: f64 },
    CutApplied { index: u32, cut_fraction: f64, next_target: f64 },
    CutoffDetected { fp: f64 },
    TargetsAdjusted { fg_target: f64, fp_target: f64 },
    Failed { reason: FailReason },
}

impl FsmEvent {
    /// Short label for the trace `events` column.
    pub fn label(&self) -> String {
        match self {
            FsmEvent::PhaseChanged { to, .. } => format!("phase:{to}"),
            FsmEvent::CommandAccepted { command } => format!("accepted:{command}"),
            FsmEvent::CommandRejected { command, .. } => format!("rejected:{command}"),
            FsmEvent::TouchDetected { .. } => "touch".into(),
            FsmEvent::GraspComplete { .. } => "grasped".into(),
            FsmEvent::PullStarted { .. } => "pull_started".into(),
            FsmEvent::TargetReached { .. } => "target_reached".into(),
            FsmEvent::GuardTripped { guard: GuardKind::Increment, .. } => "guard:increment".into(),
            FsmEvent::GuardTripped { guard: GuardKind::Total, .. } => "guard:total".into(),
            FsmEvent::CutApplied { index, .. } => format!("cut:{index}"),
            FsmEvent::CutoffDetected { .. } => "cutoff".into(),
            FsmEvent::TargetsAdjusted { .. } => "targets_adjusted".into(),
            FsmEvent::Failed { reason } => format!("failed:{}", reason.as_str()),
        }
    }
}

/// What the drivers should do this tick.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Directive {
    /// Both drivers static.
    Hold,
    /// Open-loop lower-driver speed (mm/s).
    Move {
        u1: f64,
    },
    Control(ControlMode),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommandAck {
    pub accepted: bool,
    pub reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TickOutput {
    pub directive: Directive,
    pub targets: ForceTargets,
    /// `d_p` must not pass this during the coming interval.
    pub distance_limit: Option<f64>,
    pub cut: Option<f64>,
    pub ack: Option<CommandAck>,
    pub events: Vec<FsmEvent>,
}

/// `u = [0, 0]` while waiting for a cut, whatever the sensed forces.
pub fn hold_static(phase: SessionPhase) -> crate::plant::PlantInput {
    debug_assert!(phase.awaits_operator() || !phase.is_pulling());
    crate::plant::PlantInput::ZERO
}

#[derive(Debug, Clone)]
pub struct TractionSession {
    params: TractionParams,
    phase: SessionPhase,
    phase_entered: f64,
    cuts: u32,
    fg_target: f64,
    fp_target: f64,
    pulling: bool,
    segment_start: f64,
    schedule: Vec<f64>,
}

impl TractionSession {
    pub fn new(params: TractionParams) -> Result<Self, ParamsError> {
        params.validate()?;
        Ok(Self {
            params,
            phase: SessionPhase::Approach,
            phase_entered: 0.0,
            cuts: 0,
            fg_target: params.fg_target,
            fp_target: params.fp_initial,
            pulling: false,
            segment_start: 0.0,
            schedule: Vec::new(),
        })
    }

    pub fn params(&self) -> &TractionParams {
        &self.params
    }

    pub fn phase(&self) -> SessionPhase {
        self.phase
    }

    pub fn cuts(&self) -> u32 {
        self.cuts
    }

    pub fn targets(&self) -> ForceTargets {
        ForceTargets { fg: self.fg_target, fp: self.fp_target }
    }

    /// Pulling targets in the order they were pulled to.
    pub fn schedule(&self) -> &[f64] {
        &self.schedule
    }

    fn enter(&mut self, to: SessionPhase, t: f64, events: &mut Vec<FsmEvent>) {
        if to != self.phase {
            events.push(FsmEvent::PhaseChanged { from: self.phase, to });
            if let SessionPhase::Failed(reason) = to {
                events.push(FsmEvent::Failed { reason });
            }
            self.phase = to;
            self.phase_entered = t;
            self.pulling = false;
        }
    }

    fn start_pull(&mut self, d_p: f64, events: &mut Vec<FsmEvent>) {
        self.pulling = true;
        self.segment_start = d_p;
        self.schedule.push(self.fp_target);
        events.push(FsmEvent::PullStarted { target: self.fp_target });
    }

    fn distance_limit(&self) -> f64 {
        self.params.d_total_limit.min(self.segment_start + self.params.d_incr_limit)
    }

    fn handle_command(
        &mut self,
        command: OperatorCommand,
        t: f64,
        events: &mut Vec<FsmEvent>,
        cut: &mut Option<f64>,
    ) -> CommandAck {
        let reject = |events: &mut Vec<FsmEvent>, reason: String| {
            events.push(FsmEvent::CommandRejected { command: command.name().into(), reason: reason.clone() });
            CommandAck { accepted: false, reason: Some(reason) }
        };
        if !self.phase.accepts(&command) {
            return reject(events, format!("{} not accepted in phase {}", command.name(), self.phase));
        }
        match command {
            OperatorCommand::Cut { cut_fraction } => {
                if !(cut_fraction > 0.0 && cut_fraction < 1.0) {
                    return reject(events, format!("cut_fraction must be in (0, 1), got {cut_fraction}"));
                }
                events.push(FsmEvent::CommandAccepted { command: command.name().into() });
                self.cuts += 1;
                *cut = Some(cut_fraction);
                if self.phase == SessionPhase::AwaitCut {
                    self.fp_target *= self.params.rho;
                    self.enter(SessionPhase::PostCutPull(self.cuts), t, events);
                }
                events.push(FsmEvent::CutApplied { index: self.cuts, cut_fraction, next_target: self.fp_target });
            }
            OperatorCommand::ConfirmCutoff => {
                events.push(FsmEvent::CommandAccepted { command: command.name().into() });
                self.enter(SessionPhase::MoveOut, t, events);
            }
            OperatorCommand::RequestAnotherCut => {
                events.push(FsmEvent::CommandAccepted { command: command.name().into() });
                self.enter(SessionPhase::AwaitCut, t, events);
            }
            OperatorCommand::Abort => {
                events.push(FsmEvent::CommandAccepted { command: command.name().into() });
                self.enter(SessionPhase::Failed(FailReason::Aborted), t, events);
            }
            OperatorCommand::AdjustTargets { d_fg, d_fp } => {
                let fg = self.fg_target + d_fg;
                let fp = self.fp_target + d_fp;
                if !(fg > 0.0 && fp > 0.0 && fg.is_finite() && fp.is_finite()) {
                    return reject(events, format!("adjusted targets must stay > 0 (fg {fg}, fp {fp})"));
                }
                events.push(FsmEvent::CommandAccepted { command: command.name().into() });
                self.fg_target = fg;
                self.fp_target = fp;
                events.push(FsmEvent::TargetsAdjusted { fg_target: fg, fp_target: fp });
            }
        }
        CommandAck { accepted: true, reason: None }
    }

    /// Ends the session from outside, e.g. when the plant cannot be advanced.
    pub fn fail(&mut self, t: f64, reason: FailReason) -> Vec<FsmEvent> {
        let mut events = Vec::new();
        if !self.phase.is_terminal() {
            self.enter(SessionPhase::Failed(reason), t, &mut events);
        }
        events
    }

    /// Ends the pull segment when the target is reached or a distance guard binds.
    fn pull_step(&mut self, sensed: &ForceReadings, d_p: f64, t: f64, events: &mut Vec<FsmEvent>) {
        if sensed.fp >= self.fp_target {
            events.push(FsmEvent::TargetReached { fp: sensed.fp, target: self.fp_target });
            self.enter(SessionPhase::AwaitCut, t, events);
        } else if d_p >= self.params.d_total_limit - GUARD_TOLERANCE {
            events.push(FsmEvent::GuardTripped { guard: GuardKind::Total, d_p });
            self.enter(SessionPhase::AwaitCut, t, events);
        } else if d_p - self.segment_start >= self.params.d_incr_limit - GUARD_TOLERANCE {
            events.push(FsmEvent::GuardTripped { guard: GuardKind::Increment, d_p });
            self.enter(SessionPhase::AwaitCut, t, events);
        }
    }

    /// Advance one sensor sample. `failure` is the plant's latched failure state.
    pub fn tick(
        &mut self,
        t: f64,
        sensed: &ForceReadings,
        d_p: f64,
        failure: Failure,
        command: Option<OperatorCommand>,
    ) -> TickOutput {
        let mut events = Vec::new();
        let mut cut = None;
        let mut ack = None;

        if !self.phase.is_terminal() {
            if !sensed.is_finite() {
                self.enter(SessionPhase::Failed(FailReason::Sensor), t, &mut events);
            } else if let Some(reason) = FailReason::from_failure(failure) {
                self.enter(SessionPhase::Failed(reason), t, &mut events);
            }
        }

        if let Some(command) = command {
            ack = Some(self.handle_command(command, t, &mut events, &mut cut));
        }

        let pull_mode =
            if self.params.decouple_during_pull { ControlMode::DecoupledPullGrasp } else { ControlMode::PullOnly };

        match self.phase {
            SessionPhase::Approach => {
                if sensed.fp <= self.params.fp_touch {
                    events.push(FsmEvent::TouchDetected { fp: sensed.fp });
                    self.enter(SessionPhase::Grasping, t, &mut events);
                }
            }
            SessionPhase::Grasping => {
                if sensed.fg >= self.fg_target {
                    events.push(FsmEvent::GraspComplete { fg: sensed.fg });
                    self.enter(SessionPhase::InitialPull, t, &mut events);
                    self.start_pull(d_p, &mut events);
                    self.pull_step(sensed, d_p, t, &mut events);
                }
            }
            SessionPhase::InitialPull => self.pull_step(sensed, d_p, t, &mut events),
            SessionPhase::PostCutPull(_) if cut.is_none() => {
                if !self.pulling && t - self.phase_entered >= self.params.settle_time - 1e-9 {
                    if sensed.fp < self.params.fp_cutoff {
                        events.push(FsmEvent::CutoffDetected { fp: sensed.fp });
                        self.enter(SessionPhase::OperatorCheck, t, &mut events);
                    } else {
                        self.start_pull(d_p, &mut events);
                    }
                }
                if self.pulling {
                    self.pull_step(sensed, d_p, t, &mut events);
                }
            }
            SessionPhase::MoveOut if t - self.phase_entered >= self.params.move_out_duration - 1e-9 => {
                self.enter(SessionPhase::Done, t, &mut events);
            }
            _ => {}
        }

        let directive = match self.phase {
            SessionPhase::Approach => Directive::Move { u1: -self.params.approach_speed },
            SessionPhase::Grasping => Directive::Control(ControlMode::GraspHold),
            SessionPhase::InitialPull | SessionPhase::PostCutPull(_) if self.pulling => Directive::Control(pull_mode),
            SessionPhase::MoveOut if self.params.decouple_during_pull => Directive::Control(ControlMode::GraspHold),
            _ => Directive::Hold,
        };
        let distance_limit = match directive {
            Directive::Control(ControlMode::GraspHold) => Some(self.params.d_total_limit),
            Directive::Control(_) => Some(self.distance_limit()),
            _ => None,
        };

        TickOutput { directive, targets: self.targets(), distance_limit, cut, ack, events }
    }
}
