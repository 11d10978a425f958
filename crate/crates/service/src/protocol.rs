//! Wire format: one JSON object per WebSocket text frame,
//! `{"type": ..., "seq": n, "payload": {...}}`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use traction_core::fsm::{OperatorCommand, SessionPhase, TractionParams};
use traction_core::metrics::TraceRecord;
use traction_core::runner::PhaseLogEntry;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireMessage {
    pub seq: u64,
    #[serde(flatten)]
    pub body: Body,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "payload", rename_all = "snake_case")]
pub enum Body {
    Hello(Hello),
    Telemetry(TraceRecord),
    PhaseChange(PhaseChange),
    Event(EventFrame),
    Command(OperatorCommand),
    CommandAck(Ack),
    Error(ErrorFrame),
}

impl Body {
    pub fn kind(&self) -> &'static str {
        match self {
            Body::Hello(_) => "hello",
            Body::Telemetry(_) => "telemetry",
            Body::PhaseChange(_) => "phase_change",
            Body::Event(_) => "event",
            Body::Command(_) => "command",
            Body::CommandAck(_) => "command_ack",
            Body::Error(_) => "error",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hello {
    pub schema_version: u32,
    pub server: String,
    pub session: SessionInfo,
    pub params: TractionParams,
    /// Current phase, e.g. `await_cut` or `post_cut_pull:2`.
    pub phase: String,
    pub t: f64,
    pub cuts: u32,
    /// Commands each phase accepts, keyed by phase name.
    pub legality: BTreeMap<String, Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub theta_deg: f64,
    pub dt_sensor: f64,
    pub noise_sd: f64,
    pub seed: u64,
    pub time_scale: f64,
    pub telemetry_decimation: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseChange {
    pub t: f64,
    pub from: String,
    pub to: String,
    pub cut_index: u32,
    pub fp_target: f64,
}

impl From<&PhaseLogEntry> for PhaseChange {
    fn from(p: &PhaseLogEntry) -> Self {
        Self { t: p.t, from: p.from.to_string(), to: p.to.to_string(), cut_index: p.cut_index, fp_target: p.fp_target }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventFrame {
    pub t: f64,
    pub event: String,
    #[serde(default)]
    pub detail: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ack {
    /// `seq` of the command being answered.
    pub command_seq: u64,
    pub command: String,
    pub accepted: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    /// Phase after the command was applied.
    pub phase: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorFrame {
    pub code: ErrorCode,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    /// Not valid JSON or not a known message shape.
    Malformed,
    /// A well-formed message a client may not send.
    UnexpectedType,
    /// Command `seq` not above the previous one; the command is dropped.
    StaleSeq,
    /// Another client holds the session.
    SessionBusy,
    /// The session has ended.
    SessionOver,
}

impl ErrorFrame {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }
}

pub fn encode(message: &WireMessage) -> String {
    serde_json::to_string(message).expect("wire messages always serialize")
}

pub fn decode(text: &str) -> Result<WireMessage, serde_json::Error> {
    serde_json::from_str(text)
}

const PHASES: [SessionPhase; 7] = [
    SessionPhase::Approach,
    SessionPhase::Grasping,
    SessionPhase::InitialPull,
    SessionPhase::AwaitCut,
    SessionPhase::PostCutPull(1),
    SessionPhase::OperatorCheck,
    SessionPhase::MoveOut,
];

fn sample_commands() -> [OperatorCommand; 5] {
    [
        OperatorCommand::Cut { cut_fraction: 0.5 },
        OperatorCommand::ConfirmCutoff,
        OperatorCommand::RequestAnotherCut,
        OperatorCommand::Abort,
        OperatorCommand::AdjustTargets { d_fg: 0.0, d_fp: 0.0 },
    ]
}

/// Which commands each non-terminal phase accepts.
pub fn legality_table() -> BTreeMap<String, Vec<String>> {
    PHASES
        .iter()
        .map(|phase| {
            let accepted =
                sample_commands().iter().filter(|c| phase.accepts(c)).map(|c| c.name().to_string()).collect();
            (phase.name().to_string(), accepted)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_round_trip() {
        let text = r#"{"type":"command","seq":4,"payload":{"command":"cut","args":{"cut_fraction":0.55}}}"#;
        let msg = decode(text).unwrap();
        assert_eq!(msg.seq, 4);
        assert_eq!(msg.body, Body::Command(OperatorCommand::Cut { cut_fraction: 0.55 }));
        assert_eq!(decode(&encode(&msg)).unwrap(), msg);

        let confirm = decode(r#"{"type":"command","seq":5,"payload":{"command":"confirm_cutoff"}}"#).unwrap();
        assert_eq!(confirm.body, Body::Command(OperatorCommand::ConfirmCutoff));
    }

    #[test]
    fn frames_carry_type_and_seq() {
        let msg = WireMessage { seq: 9, body: Body::Error(ErrorFrame::new(ErrorCode::Malformed, "expected value")) };
        let v: Value = serde_json::from_str(&encode(&msg)).unwrap();
        assert_eq!(v["type"], "error");
        assert_eq!(v["seq"], 9);
        assert_eq!(v["payload"]["code"], "malformed");
    }

    #[test]
    fn rejects_garbage() {
        assert!(decode("not json").is_err());
        assert!(decode(r#"{"type":"command","seq":1,"payload":{"command":"jump"}}"#).is_err());
        assert!(decode(r#"{"type":"command","payload":{"command":"abort"}}"#).is_err());
    }

    #[test]
    fn legality_matches_fsm() {
        let table = legality_table();
        assert!(!table["grasping"].contains(&"cut".to_string()));
        assert!(table["await_cut"].contains(&"cut".to_string()));
        assert!(table["operator_check"].contains(&"confirm_cutoff".to_string()));
        for cmds in table.values() {
            assert!(cmds.contains(&"abort".to_string()));
        }
    }
}
