use std::fs;
use std::net::{SocketAddr, TcpStream};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use tungstenite::stream::MaybeTlsStream;
use tungstenite::{Message, WebSocket};

use traction_core::fsm::OperatorCommand;
use traction_core::metrics::{read_trace, TraceRecord};
use traction_core::runner::Outcome;
use traction_core::scenario::Scenario;
use traction_service::protocol::{decode, encode, Body, ErrorCode, WireMessage, SCHEMA_VERSION};
use traction_service::{ServeOptions, Server, ServiceError, SessionReport};

fn start(options: ServeOptions) -> (SocketAddr, JoinHandle<Result<SessionReport, ServiceError>>) {
    let mut scenario = Scenario::traction_reference();
    scenario.sim.noise_sd = 0.002;
    let server = Server::bind("127.0.0.1:0", scenario, options).unwrap();
    let addr = server.local_addr().unwrap();
    (addr, thread::spawn(move || server.run()))
}

fn fast(out_dir: Option<std::path::PathBuf>) -> ServeOptions {
    ServeOptions { time_scale: 40.0, queue_bound: 1 << 16, out_dir, ..ServeOptions::default() }
}

struct Client {
    ws: WebSocket<MaybeTlsStream<TcpStream>>,
    seq: u64,
    expected: u64,
    phase: String,
    telemetry: Vec<TraceRecord>,
    closed: bool,
}

impl Client {
    fn connect(addr: SocketAddr) -> Self {
        let (ws, _) = tungstenite::connect(format!("ws://{addr}")).unwrap();
        if let MaybeTlsStream::Plain(s) = ws.get_ref() {
            s.set_read_timeout(Some(Duration::from_millis(20))).unwrap();
        }
        Self { ws, seq: 0, expected: 0, phase: String::new(), telemetry: Vec::new(), closed: false }
    }

    /// Next frame, checking the server's seq is gap-free.
    fn next(&mut self, deadline: Instant) -> Option<Body> {
        while Instant::now() < deadline && !self.closed {
            match self.ws.read() {
                Ok(Message::Text(text)) => {
                    let msg = decode(&text).unwrap();
                    assert_eq!(msg.seq, self.expected, "gap in server seq");
                    self.expected += 1;
                    match &msg.body {
                        Body::Telemetry(r) => self.telemetry.push(r.clone()),
                        Body::PhaseChange(p) => self.phase = p.to.clone(),
                        Body::Hello(h) => self.phase = h.phase.clone(),
                        _ => {}
                    }
                    return Some(msg.body);
                }
                Ok(Message::Close(_)) => self.closed = true,
                Ok(_) => {}
                Err(tungstenite::Error::Io(e))
                    if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) => {}
                Err(_) => self.closed = true,
            }
        }
        None
    }

    fn wait_for(&mut self, secs: f64, mut pred: impl FnMut(&Body) -> bool) -> Body {
        let deadline = Instant::now() + Duration::from_secs_f64(secs);
        while let Some(body) = self.next(deadline) {
            if pred(&body) {
                return body;
            }
        }
        panic!("timed out in phase {}", self.phase);
    }

    fn wait_phase(&mut self, phase: &str) {
        if self.phase != phase {
            self.wait_for(60.0, |b| matches!(b, Body::PhaseChange(p) if p.to == phase));
        }
    }

    fn send_text(&mut self, text: String) {
        self.ws.send(Message::text(text)).unwrap();
    }

    fn command(&mut self, command: OperatorCommand) -> u64 {
        self.seq += 1;
        let seq = self.seq;
        self.send_text(encode(&WireMessage { seq, body: Body::Command(command) }));
        seq
    }

    fn ack(&mut self, seq: u64) -> (bool, Option<String>, String) {
        match self.wait_for(10.0, |b| matches!(b, Body::CommandAck(a) if a.command_seq == seq)) {
            Body::CommandAck(a) => (a.accepted, a.reason, a.phase),
            _ => unreachable!(),
        }
    }

    fn drain(&mut self, secs: f64) {
        let deadline = Instant::now() + Duration::from_secs_f64(secs);
        while self.next(deadline).is_some() {}
    }
}

#[test]
fn hello_then_telemetry_at_sensor_rate() {
    let (addr, server) = start(ServeOptions::default());
    let mut c = Client::connect(addr);
    let start = Instant::now();
    match c.wait_for(2.0, |_| true) {
        Body::Hello(h) => {
            assert_eq!(h.schema_version, SCHEMA_VERSION);
            assert_eq!(h.phase, "approach");
            assert!(h.legality["await_cut"].contains(&"cut".to_string()));
        }
        other => panic!("expected hello first, got {other:?}"),
    }
    c.drain(1.5 - start.elapsed().as_secs_f64());
    let n = c.telemetry.len();
    assert!((30..=60).contains(&n), "{n} telemetry frames in 1.5 s");
    assert!(c.telemetry.windows(2).all(|w| w[1].t > w[0].t));

    c.command(OperatorCommand::Abort);
    c.drain(2.0);
    let report = server.join().unwrap().unwrap();
    assert_eq!(report.outcome, Outcome::Failed(traction_core::fsm::FailReason::Aborted));
}

#[test]
fn cut_rejected_while_grasping_and_accepted_when_awaiting() {
    let tmp = tempfile::tempdir().unwrap();
    let (addr, server) = start(fast(Some(tmp.path().to_path_buf())));
    let mut c = Client::connect(addr);

    c.wait_phase("grasping");
    let seq = c.command(OperatorCommand::Cut { cut_fraction: 0.55 });
    let (accepted, reason, phase) = c.ack(seq);
    assert!(!accepted);
    assert!(reason.is_some());
    assert_eq!(phase, "grasping");

    c.wait_phase("await_cut");
    let seq = c.command(OperatorCommand::Cut { cut_fraction: 0.55 });
    let (accepted, _, _) = c.ack(seq);
    assert!(accepted);
    match c.wait_for(5.0, |b| matches!(b, Body::PhaseChange(_))) {
        Body::PhaseChange(p) => {
            assert_eq!(p.to, "post_cut_pull:1");
            assert_eq!(p.cut_index, 1);
            assert!((p.fp_target - 0.2).abs() < 1e-12);
        }
        _ => unreachable!(),
    }

    for _ in 0..3 {
        c.wait_for(120.0, |b| matches!(b, Body::PhaseChange(p) if p.to == "await_cut" || p.to == "operator_check"));
        if c.phase == "operator_check" {
            break;
        }
        let seq = c.command(OperatorCommand::Cut { cut_fraction: 0.55 });
        assert!(c.ack(seq).0);
    }
    c.wait_phase("operator_check");
    let seq = c.command(OperatorCommand::ConfirmCutoff);
    assert!(c.ack(seq).0);
    c.wait_for(30.0, |b| matches!(b, Body::Event(e) if e.event == "session_end:done"));
    c.drain(1.0);

    let report = server.join().unwrap().unwrap();
    assert_eq!(report.outcome, Outcome::Done);
    assert_eq!(report.summary.cuts, 4);

    let trace = read_trace(fs::File::open(tmp.path().join("trace.csv")).unwrap()).unwrap();
    assert_eq!(trace.len(), c.telemetry.len());
    assert_eq!(trace, c.telemetry);
}

#[test]
fn second_client_is_refused() {
    let (addr, server) = start(ServeOptions::default());
    let mut first = Client::connect(addr);
    first.wait_for(2.0, |b| matches!(b, Body::Hello(_)));

    let mut second = Client::connect(addr);
    match second.wait_for(2.0, |_| true) {
        Body::Error(e) => assert_eq!(e.code, ErrorCode::SessionBusy),
        other => panic!("expected busy error, got {other:?}"),
    }
    second.drain(1.0);
    assert!(second.closed);

    first.wait_for(2.0, |b| matches!(b, Body::Telemetry(_)));
    first.command(OperatorCommand::Abort);
    first.drain(2.0);
    server.join().unwrap().unwrap();
}

#[test]
fn malformed_messages_get_error_frames() {
    let (addr, server) = start(ServeOptions::default());
    let mut c = Client::connect(addr);
    c.wait_for(2.0, |b| matches!(b, Body::Hello(_)));

    c.send_text("{not json".into());
    match c.wait_for(2.0, |b| matches!(b, Body::Error(_))) {
        Body::Error(e) => assert_eq!(e.code, ErrorCode::Malformed),
        _ => unreachable!(),
    }
    c.send_text(r#"{"type":"telemetry","seq":1,"payload":{}}"#.into());
    match c.wait_for(2.0, |b| matches!(b, Body::Error(_))) {
        Body::Error(e) => assert_eq!(e.code, ErrorCode::Malformed),
        _ => unreachable!(),
    }
    c.send_text(r#"{"type":"error","seq":1,"payload":{"code":"malformed","message":"x"}}"#.into());
    match c.wait_for(2.0, |b| matches!(b, Body::Error(_))) {
        Body::Error(e) => assert_eq!(e.code, ErrorCode::UnexpectedType),
        _ => unreachable!(),
    }

    let seq = c.command(OperatorCommand::AdjustTargets { d_fg: 0.01, d_fp: 0.0 });
    assert!(c.ack(seq).0);
    c.send_text(encode(&WireMessage { seq, body: Body::Command(OperatorCommand::Abort) }));
    match c.wait_for(2.0, |b| matches!(b, Body::Error(_))) {
        Body::Error(e) => assert_eq!(e.code, ErrorCode::StaleSeq),
        _ => unreachable!(),
    }
    let seq = c.command(OperatorCommand::Abort);
    assert!(c.ack(seq).0);
    c.drain(2.0);
    server.join().unwrap().unwrap();
}

#[test]
fn disconnect_while_awaiting_pauses_the_session() {
    let (addr, server) = start(fast(None));
    let mut c = Client::connect(addr);
    c.wait_phase("await_cut");
    c.drain(0.2);
    let t_left = c.telemetry.last().unwrap().t;
    drop(c);
    thread::sleep(Duration::from_millis(500));

    let mut c = Client::connect(addr);
    match c.wait_for(2.0, |_| true) {
        Body::Hello(h) => {
            assert_eq!(h.phase, "await_cut");
            // 0.5 s at 40x would be 20 s of simulated time if it kept running
            assert!(h.t - t_left < 1.0, "ran on while disconnected: {} -> {}", t_left, h.t);
        }
        other => panic!("expected hello, got {other:?}"),
    }
    let seq = c.command(OperatorCommand::Abort);
    assert!(c.ack(seq).0);
    c.drain(2.0);
    server.join().unwrap().unwrap();
}
