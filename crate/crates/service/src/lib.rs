//! Live traction session served over a WebSocket. One client at a time
//! observes telemetry and drives the operator side of the resection flow.

pub mod protocol;
mod session;

use std::io;
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver, Sender};
use log::{info, warn};
use thiserror::Error;
use tungstenite::{Message, WebSocket};

use traction_core::runner::{Outcome, RunError, TractionRun, TractionSummary};
use traction_core::scenario::Scenario;

use protocol::{decode, encode, Body, ErrorCode, ErrorFrame, WireMessage};
pub use session::{Inbound, Outbound};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Run(#[from] RunError),
    #[error("invalid option {0}")]
    Options(String),
    #[error("simulation thread panicked")]
    Panicked,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServeOptions {
    /// Simulated seconds per wall-clock second.
    pub time_scale: f64,
    /// Send every k-th telemetry sample.
    pub decimation: u32,
    /// Telemetry is skipped while this many frames wait to be sent.
    pub queue_bound: usize,
    /// Where trace, phase log and summary go when the session ends.
    pub out_dir: Option<PathBuf>,
}

impl Default for ServeOptions {
    fn default() -> Self {
        Self { time_scale: 1.0, decimation: 1, queue_bound: 256, out_dir: None }
    }
}

impl ServeOptions {
    pub fn validate(&self) -> Result<(), ServiceError> {
        if !(self.time_scale > 0.0 && self.time_scale.is_finite()) {
            return Err(ServiceError::Options(format!("time_scale must be > 0, got {}", self.time_scale)));
        }
        if self.decimation == 0 {
            return Err(ServiceError::Options("decimation must be >= 1".into()));
        }
        if self.queue_bound == 0 {
            return Err(ServiceError::Options("queue_bound must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionReport {
    pub outcome: Outcome,
    pub summary: TractionSummary,
}

pub struct Server {
    listener: TcpListener,
    scenario: Scenario,
    run: TractionRun,
    options: ServeOptions,
}

const POLL: Duration = Duration::from_millis(5);

impl Server {
    pub fn bind(addr: impl ToSocketAddrs, scenario: Scenario, options: ServeOptions) -> Result<Self, ServiceError> {
        options.validate()?;
        let run = TractionRun::new(&scenario)?;
        let listener = TcpListener::bind(addr)?;
        Ok(Self { listener, scenario, run, options })
    }

    pub fn local_addr(&self) -> Result<SocketAddr, ServiceError> {
        Ok(self.listener.local_addr()?)
    }

    /// Serve until the session reaches a terminal phase, then write outputs.
    pub fn run(self) -> Result<SessionReport, ServiceError> {
        let Server { listener, scenario, run, options } = self;
        let (inbox_tx, inbox_rx) = unbounded();
        let finished = Arc::new(AtomicBool::new(false));
        let agent = session::Agent::new(&scenario, run, options.clone(), inbox_rx, finished.clone());
        let sim = thread::Builder::new().name("session".into()).spawn(move || agent.run())?;

        listener.set_nonblocking(true)?;
        info!("listening on ws://{}", listener.local_addr()?);
        let active = Arc::new(AtomicBool::new(false));
        let ids = AtomicU64::new(0);
        let mut handlers: Vec<JoinHandle<()>> = Vec::new();
        while !finished.load(Ordering::SeqCst) {
            match listener.accept() {
                Ok((stream, peer)) => {
                    let id = ids.fetch_add(1, Ordering::SeqCst);
                    if active.swap(true, Ordering::SeqCst) {
                        info!("refusing {peer}: session busy");
                        handlers.push(thread::spawn(move || refuse(stream)));
                        continue;
                    }
                    info!("accepted {peer} as client {id}");
                    let (inbox, active, finished) = (inbox_tx.clone(), active.clone(), finished.clone());
                    handlers.push(thread::spawn(move || {
                        if let Err(e) = serve_client(stream, id, &inbox, &finished) {
                            warn!("client {id}: {e}");
                        }
                        let _ = inbox.send(Inbound::Disconnected { id });
                        active.store(false, Ordering::SeqCst);
                    }));
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(POLL),
                Err(e) => return Err(e.into()),
            }
            handlers.retain(|h| !h.is_finished());
        }
        drop(listener);
        let (run, outcome) = sim.join().map_err(|_| ServiceError::Panicked)?;
        for h in handlers {
            let _ = h.join();
        }
        if let Some(dir) = &options.out_dir {
            run.write_outputs(dir, outcome)?;
        }
        Ok(SessionReport { outcome, summary: run.summary(outcome) })
    }
}

fn handshake(stream: TcpStream) -> Result<WebSocket<TcpStream>, ServiceError> {
    stream.set_nonblocking(false)?;
    stream.set_nodelay(true)?;
    stream.set_read_timeout(Some(Duration::from_secs(5)))?;
    let ws = tungstenite::accept(stream).map_err(|e| io::Error::other(e.to_string()))?;
    ws.get_ref().set_read_timeout(Some(POLL))?;
    Ok(ws)
}

fn ws_err(e: tungstenite::Error) -> ServiceError {
    match e {
        tungstenite::Error::Io(e) => ServiceError::Io(e),
        other => ServiceError::Io(io::Error::other(other.to_string())),
    }
}

fn would_block(e: &tungstenite::Error) -> bool {
    matches!(e, tungstenite::Error::Io(io) if matches!(io.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut))
}

fn refuse(stream: TcpStream) {
    let Ok(mut ws) = handshake(stream) else { return };
    let frame = WireMessage {
        seq: 0,
        body: Body::Error(ErrorFrame::new(ErrorCode::SessionBusy, "another client holds this session")),
    };
    let _ = ws.send(Message::text(encode(&frame)));
    close(&mut ws);
}

/// Send a close frame and wait briefly for the peer's reply.
fn close(ws: &mut WebSocket<TcpStream>) {
    let _ = ws.close(None);
    let until = Instant::now() + Duration::from_millis(500);
    while Instant::now() < until {
        match ws.read() {
            Ok(_) => {}
            Err(e) if would_block(&e) => {
                let _ = ws.flush();
            }
            Err(_) => break,
        }
    }
}

struct Connection {
    ws: WebSocket<TcpStream>,
    seq: u64,
    last_command: Option<u64>,
}

impl Connection {
    fn send(&mut self, body: Body) -> Result<(), ServiceError> {
        let message = WireMessage { seq: self.seq, body };
        self.seq += 1;
        self.ws.send(Message::text(encode(&message))).map_err(ws_err)
    }

    fn error(&mut self, code: ErrorCode, message: impl Into<String>) -> Result<(), ServiceError> {
        self.send(Body::Error(ErrorFrame::new(code, message)))
    }

    fn on_text(
        &mut self,
        text: &str,
        id: u64,
        inbox: &Sender<Inbound>,
        finished: &AtomicBool,
    ) -> Result<(), ServiceError> {
        let message = match decode(text) {
            Ok(m) => m,
            Err(e) => return self.error(ErrorCode::Malformed, e.to_string()),
        };
        let Body::Command(command) = message.body else {
            return self.error(
                ErrorCode::UnexpectedType,
                format!("clients may only send commands, got {}", message.body.kind()),
            );
        };
        if self.last_command.is_some_and(|last| message.seq <= last) {
            return self.error(
                ErrorCode::StaleSeq,
                format!("command seq {} is not above {}", message.seq, self.last_command.unwrap_or(0)),
            );
        }
        self.last_command = Some(message.seq);
        if finished.load(Ordering::SeqCst) {
            return self.send(session::session_over());
        }
        let _ = inbox.send(Inbound::Command { id, seq: message.seq, command });
        Ok(())
    }
}

fn serve_client(
    stream: TcpStream,
    id: u64,
    inbox: &Sender<Inbound>,
    finished: &AtomicBool,
) -> Result<(), ServiceError> {
    let ws = handshake(stream)?;
    let (out_tx, out_rx): (Sender<Outbound>, Receiver<Outbound>) = unbounded();
    let _ = inbox.send(Inbound::Connected { id, out: out_tx });
    let mut conn = Connection { ws, seq: 0, last_command: None };
    loop {
        while let Ok(out) = out_rx.try_recv() {
            match out {
                Outbound::Frame(body) => conn.send(*body)?,
                Outbound::Close => {
                    close(&mut conn.ws);
                    return Ok(());
                }
            }
        }
        match conn.ws.read() {
            Ok(Message::Text(text)) => conn.on_text(&text, id, inbox, finished)?,
            Ok(Message::Binary(_)) => conn.error(ErrorCode::Malformed, "binary frames are not supported")?,
            Ok(Message::Close(_)) => return Ok(()),
            Ok(_) => {}
            Err(e) if would_block(&e) => {}
            Err(tungstenite::Error::ConnectionClosed | tungstenite::Error::AlreadyClosed) => return Ok(()),
            Err(e) => return Err(ws_err(e)),
        }
    }
}
