//! The simulation agent: sole owner of the traction run.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use crossbeam_channel::{Receiver, RecvTimeoutError, Sender};
use log::{debug, info};
use serde_json::Value;

use traction_core::fsm::OperatorCommand;
use traction_core::runner::{Outcome, TickReport, TractionRun};
use traction_core::scenario::Scenario;

use crate::protocol::{
    legality_table, Ack, Body, ErrorCode, ErrorFrame, EventFrame, Hello, PhaseChange, SessionInfo, SCHEMA_VERSION,
};
use crate::ServeOptions;

/// Messages from connection handlers to the agent.
#[derive(Debug)]
pub enum Inbound {
    Connected { id: u64, out: Sender<Outbound> },
    Disconnected { id: u64 },
    Command { id: u64, seq: u64, command: OperatorCommand },
}

/// Messages from the agent to the connected client.
#[derive(Debug, Clone, PartialEq)]
pub enum Outbound {
    Frame(Box<Body>),
    /// Session over; flush and close.
    Close,
}

pub(crate) struct Agent {
    run: TractionRun,
    info: SessionInfo,
    options: ServeOptions,
    inbox: Receiver<Inbound>,
    client: Option<(u64, Sender<Outbound>)>,
    pending: VecDeque<(u64, OperatorCommand)>,
    started: bool,
    samples: u64,
    max_samples: u64,
    finished: Arc<AtomicBool>,
}

impl Agent {
    pub(crate) fn new(
        scenario: &Scenario,
        run: TractionRun,
        options: ServeOptions,
        inbox: Receiver<Inbound>,
        finished: Arc<AtomicBool>,
    ) -> Self {
        let info = SessionInfo {
            theta_deg: scenario.geometry.theta_deg,
            dt_sensor: scenario.sim.dt_sensor,
            noise_sd: scenario.sim.noise_sd,
            seed: scenario.sim.seed,
            time_scale: options.time_scale,
            telemetry_decimation: options.decimation,
        };
        let max_samples = (scenario.traction.max_duration / run.dt()).ceil() as u64 + 1;
        Self {
            run,
            info,
            options,
            inbox,
            client: None,
            pending: VecDeque::new(),
            started: false,
            samples: 0,
            max_samples,
            finished,
        }
    }

    fn send(&self, body: Body) {
        if let Some((_, out)) = &self.client {
            let _ = out.send(Outbound::Frame(Box::new(body)));
        }
    }

    fn hello(&self) -> Body {
        Body::Hello(Hello {
            schema_version: SCHEMA_VERSION,
            server: concat!("traction-sim ", env!("CARGO_PKG_VERSION")).to_string(),
            session: self.info.clone(),
            params: *self.run.session().params(),
            phase: self.run.phase().to_string(),
            t: self.run.time(),
            cuts: self.run.session().cuts(),
            legality: legality_table(),
        })
    }

    fn handle(&mut self, message: Inbound) {
        match message {
            Inbound::Connected { id, out } => {
                info!("client {id} connected at t = {:.3} s", self.run.time());
                self.client = Some((id, out));
                self.started = true;
                self.send(self.hello());
            }
            Inbound::Disconnected { id } => {
                if self.client.as_ref().is_some_and(|(c, _)| *c == id) {
                    info!("client {id} disconnected in {}", self.run.phase());
                    self.client = None;
                    self.pending.clear();
                }
            }
            Inbound::Command { id, seq, command } => {
                if self.client.as_ref().is_some_and(|(c, _)| *c == id) {
                    debug!("command {seq}: {}", command.name());
                    self.pending.push_back((seq, command));
                }
            }
        }
    }

    fn running(&self) -> bool {
        self.client.is_some() || (self.started && !self.run.phase().awaits_operator())
    }

    fn publish(&mut self, seq: Option<u64>, command: Option<&OperatorCommand>, report: TickReport) {
        if let (Some(seq), Some(command), Some(ack)) = (seq, command, report.ack) {
            self.send(Body::CommandAck(Ack {
                command_seq: seq,
                command: command.name().to_string(),
                accepted: ack.accepted,
                reason: ack.reason,
                phase: report.phase.to_string(),
            }));
        }
        for p in &report.phase_changes {
            self.send(Body::PhaseChange(PhaseChange::from(p)));
        }
        for e in &report.events {
            self.send(Body::Event(EventFrame {
                t: report.record.t,
                event: e.label(),
                detail: serde_json::to_value(e).unwrap_or(Value::Null),
            }));
        }
        let due = self.samples.is_multiple_of(u64::from(self.options.decimation));
        let room = self.client.as_ref().is_some_and(|(_, out)| out.len() < self.options.queue_bound);
        if due && room {
            self.send(Body::Telemetry(report.record.rounded()));
        }
    }

    fn wait_until(&mut self, deadline: Instant) {
        loop {
            let now = Instant::now();
            if now >= deadline {
                return;
            }
            match self.inbox.recv_timeout(deadline - now) {
                Ok(m) => self.handle(m),
                Err(RecvTimeoutError::Timeout) => return,
                Err(RecvTimeoutError::Disconnected) => {
                    std::thread::sleep(deadline - now);
                    return;
                }
            }
        }
    }

    pub(crate) fn run(mut self) -> (TractionRun, Outcome) {
        let period = Duration::from_secs_f64(self.run.dt() / self.options.time_scale);
        let mut deadline = Instant::now();
        let outcome = loop {
            while let Ok(m) = self.inbox.try_recv() {
                self.handle(m);
            }
            if !self.running() {
                if let Ok(m) = self.inbox.recv_timeout(Duration::from_millis(50)) {
                    self.handle(m);
                }
                deadline = Instant::now();
                continue;
            }

            let next = self.pending.pop_front();
            let report = self.run.tick(next.as_ref().map(|(_, c)| *c));
            self.publish(next.as_ref().map(|n| n.0), next.as_ref().map(|n| &n.1), report);
            self.samples += 1;

            if let Some(outcome) = self.run.outcome() {
                break outcome;
            }
            if self.samples >= self.max_samples {
                break Outcome::Timeout;
            }
            deadline += period;
            self.wait_until(deadline);
        };
        self.finish(outcome)
    }

    fn finish(mut self, outcome: Outcome) -> (TractionRun, Outcome) {
        info!("session ended: {}", outcome.as_str());
        while let Ok(m) = self.inbox.try_recv() {
            self.handle(m);
        }
        for (seq, command) in std::mem::take(&mut self.pending) {
            self.send(Body::CommandAck(Ack {
                command_seq: seq,
                command: command.name().to_string(),
                accepted: false,
                reason: Some("session has ended".into()),
                phase: self.run.phase().to_string(),
            }));
        }
        let summary = self.run.summary(outcome);
        self.send(Body::Event(EventFrame {
            t: self.run.time(),
            event: format!("session_end:{}", outcome.as_str()),
            detail: serde_json::to_value(&summary).unwrap_or(Value::Null),
        }));
        if let Some((_, out)) = &self.client {
            let _ = out.send(Outbound::Close);
        }
        self.finished.store(true, Ordering::SeqCst);
        (self.run, outcome)
    }
}

/// Error frame for commands that arrive after the session ended.
pub(crate) fn session_over() -> Body {
    Body::Error(ErrorFrame::new(ErrorCode::SessionOver, "the session has ended"))
}
