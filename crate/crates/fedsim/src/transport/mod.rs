//! Client/server message protocol with two interchangeable carriers: an
//! in-process loopback for deterministic tests and a framed TCP carrier for
//! multi-process runs. Both carriers move the same encoded frames, so they
//! produce bit-identical results for identical seeds.
//!
//! Round flow: JOIN handshake, then per round r = 1..rounds the server
//! broadcasts GLOBAL_MODEL, collects one CLIENT_UPDATE per client, aggregates
//! and acknowledges with ROUND_DONE; a SHUTDOWN broadcast ends the run. No
//! message kind can carry image or label data.

pub mod wire;

use std::io::Write as _;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use crate::client::{ClientConfig, ClientEngine, RoundReport};
use crate::datagen::ClientDataset;
use crate::error::{FedSimError, Result};
use crate::model::ModelSpec;
use crate::param_math::ParamVector;
use crate::server::{AggregationConfig, ServerEngine};

pub use wire::{decode, encode, Message, MessageKind, Payload, CLAIM_ASSIGN, PROTOCOL_VERSION, SERVER_SENDER};

/// Optional capture of every frame the server sends or receives, for audits.
pub type FrameSink = Arc<Mutex<Vec<Vec<u8>>>>;

pub const DEFAULT_HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CarrierKind {
    Loopback,
    Socket,
}

#[derive(Debug, Clone)]
pub enum Carrier {
    Loopback,
    Socket {
        /// Bind address; an ephemeral localhost port when absent.
        listen: Option<SocketAddr>,
        handshake_timeout: Duration,
    },
}

impl Carrier {
    pub fn socket_default() -> Self {
        Carrier::Socket {
            listen: None,
            handshake_timeout: DEFAULT_HANDSHAKE_TIMEOUT,
        }
    }
}

/// Everything a federation run needs. Client configs and datasets are
/// parallel lists; ids must be unique and match between the two.
pub struct FederationSetup {
    pub server_cfg: AggregationConfig,
    pub model_spec: ModelSpec,
    pub clients: Vec<(ClientConfig, ClientDataset)>,
    pub initial_params: ParamVector,
    pub carrier: Carrier,
    pub frame_sink: Option<FrameSink>,
}

/// Per-client slice of one round's trace.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientTrace {
    pub client_id: u32,
    pub weight: f64,
    pub avg_loss: f64,
    pub val_dice: f64,
    pub loss_scale: f64,
}

/// One row per completed round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundTrace {
    pub round: u32,
    pub clients: Vec<ClientTrace>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederationResult {
    pub final_params: ParamVector,
    pub best_round: u32,
    pub best_params: ParamVector,
    pub best_score: f64,
    pub trace: Vec<RoundTrace>,
}

/// Digest of the shared run contract, checked by clients at JOIN time.
pub fn config_digest(server_cfg: &AggregationConfig, model_spec: &ModelSpec) -> u64 {
    let canonical = format!(
        "v{}|{:?}|T={}|xi={}|norm={}|min={}|rounds={}|P={}",
        PROTOCOL_VERSION,
        server_cfg.strategy,
        server_cfg.temperature,
        server_cfg.xi,
        server_cfg.normalize_xi,
        server_cfg.min_clients,
        server_cfg.rounds,
        model_spec.param_count(),
    );
    // FNV-1a 64
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in canonical.as_bytes() {
        hash ^= *b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

fn capture(sink: &Option<FrameSink>, frame: &[u8]) {
    if let Some(sink) = sink {
        sink.lock().expect("frame sink poisoned").push(frame.to_vec());
    }
}

/// What a client session wants the carrier to do after handling a message.
pub enum SessionStep {
    Reply(Message),
    Continue,
    Done,
}

/// Client-side protocol driver, carrier-agnostic.
pub struct ClientSession {
    engine: ClientEngine,
    expected_digest: u64,
    last_round: u32,
    joined: bool,
}

impl ClientSession {
    pub fn new(engine: ClientEngine, expected_digest: u64) -> Self {
        Self {
            engine,
            expected_digest,
            last_round: 0,
            joined: false,
        }
    }

    pub fn client_id(&self) -> u32 {
        self.engine.cfg.client_id
    }

    pub fn join_message(&self) -> Message {
        Message {
            round: 0,
            sender: self.client_id(),
            payload: Payload::Join {
                version: PROTOCOL_VERSION,
                claimed_id: self.client_id(),
            },
        }
    }

    pub fn accept_ack(&mut self, msg: &Message) -> Result<()> {
        match msg.payload {
            Payload::JoinAck {
                assigned_id,
                config_digest,
            } => {
                if assigned_id != self.client_id() {
                    return Err(FedSimError::Protocol(format!(
                        "server assigned id {assigned_id}, expected {}",
                        self.client_id()
                    )));
                }
                if config_digest != self.expected_digest {
                    return Err(FedSimError::Protocol(
                        "config digest mismatch between client and server".into(),
                    ));
                }
                self.joined = true;
                Ok(())
            }
            _ => Err(FedSimError::Protocol("expected JOIN_ACK".into())),
        }
    }

    /// Handles one server message after the handshake.
    pub fn handle(&mut self, msg: &Message) -> Result<SessionStep> {
        if !self.joined {
            return Err(FedSimError::Protocol("message before JOIN_ACK".into()));
        }
        match &msg.payload {
            Payload::GlobalModel(params) => {
                if msg.round != self.last_round + 1 {
                    return Err(FedSimError::Protocol(format!(
                        "global model round {} does not follow {}",
                        msg.round, self.last_round
                    )));
                }
                self.last_round = msg.round;
                let report = self.engine.local_train(params, msg.round)?;
                Ok(SessionStep::Reply(Message {
                    round: msg.round,
                    sender: self.client_id(),
                    payload: Payload::ClientUpdate(report),
                }))
            }
            Payload::RoundDone => {
                if msg.round != self.last_round {
                    return Err(FedSimError::Protocol(format!(
                        "round-done for {} while in round {}",
                        msg.round, self.last_round
                    )));
                }
                Ok(SessionStep::Continue)
            }
            Payload::Shutdown => Ok(SessionStep::Done),
            _ => Err(FedSimError::Protocol(format!(
                "unexpected {:?} message",
                msg.kind()
            ))),
        }
    }
}

/// Sorts the round's reports, derives weights, records the trace, and applies
/// the aggregate.
fn apply_round(
    server: &mut ServerEngine,
    mut reports: Vec<RoundReport>,
    trace: &mut Vec<RoundTrace>,
) -> Result<()> {
    reports.sort_by_key(|r| r.client_id);
    let weights = server.weights_for(&reports)?;
    let round = server.state.round;
    trace.push(RoundTrace {
        round,
        clients: reports
            .iter()
            .zip(&weights)
            .map(|(r, &w)| ClientTrace {
                client_id: r.client_id,
                weight: w,
                avg_loss: r.avg_loss,
                val_dice: r.mean_val_dice(),
                loss_scale: r.mean_loss_scale,
            })
            .collect(),
    });
    server.aggregate(&reports, &weights)
}

fn result_from(server: ServerEngine, trace: Vec<RoundTrace>) -> FederationResult {
    let final_params = server.state.global_params.clone();
    match server.state.best {
        Some(best) => FederationResult {
            final_params,
            best_round: best.round,
            best_params: best.params,
            best_score: best.score,
            trace,
        },
        None => FederationResult {
            best_params: final_params.clone(),
            final_params,
            best_round: 0,
            best_score: 0.0,
            trace,
        },
    }
}

fn validate_setup(setup: &FederationSetup) -> Result<()> {
    setup.server_cfg.validate()?;
    if setup.clients.len() < setup.server_cfg.min_clients {
        return Err(FedSimError::Usage(format!(
            "{} clients configured, server needs at least {}",
            setup.clients.len(),
            setup.server_cfg.min_clients
        )));
    }
    if setup.initial_params.len() != setup.model_spec.param_count() {
        return Err(FedSimError::Usage(
            "initial parameters do not match the model parameter count".into(),
        ));
    }
    let mut ids: Vec<u32> = setup.clients.iter().map(|(c, _)| c.client_id).collect();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() != setup.clients.len() {
        return Err(FedSimError::Usage("duplicate client ids".into()));
    }
    for (cfg, ds) in &setup.clients {
        if cfg.client_id != ds.client_id {
            return Err(FedSimError::Usage(format!(
                "client {} paired with dataset of client {}",
                cfg.client_id, ds.client_id
            )));
        }
    }
    Ok(())
}

/// Executes the full federation: JOIN handshake, `rounds` synchronized
/// rounds, SHUTDOWN. Returns the final and best global parameters plus the
/// per-round trace.
pub fn run_federation(setup: FederationSetup) -> Result<FederationResult> {
    validate_setup(&setup)?;
    match setup.carrier {
        Carrier::Loopback => run_loopback(setup),
        Carrier::Socket { .. } => run_socket(setup),
    }
}

fn run_loopback(setup: FederationSetup) -> Result<FederationResult> {
    let digest = config_digest(&setup.server_cfg, &setup.model_spec);
    let sink = setup.frame_sink.clone();
    let ids: Vec<u32> = setup.clients.iter().map(|(c, _)| c.client_id).collect();
    let mut server = ServerEngine::new(
        setup.server_cfg.clone(),
        setup.initial_params.clone(),
        &ids,
    )?;

    // Every message still passes through encode/decode so the loopback
    // exercises the same wire path as the socket carrier.
    let exchange = |msg: &Message| -> Result<Message> {
        let frame = encode(msg)?;
        capture(&sink, &frame);
        decode(&frame)
    };

    let mut sessions = Vec::with_capacity(setup.clients.len());
    for (cfg, dataset) in setup.clients {
        let engine = ClientEngine::new(cfg, setup.model_spec.clone(), dataset);
        let mut session = ClientSession::new(engine, digest);
        let join = exchange(&session.join_message())?;
        let assigned = match join.payload {
            Payload::Join {
                version,
                claimed_id,
            } => {
                if version != PROTOCOL_VERSION {
                    return Err(FedSimError::Protocol(format!(
                        "protocol version {version} rejected"
                    )));
                }
                if claimed_id == CLAIM_ASSIGN {
                    sessions.len() as u32
                } else {
                    claimed_id
                }
            }
            _ => return Err(FedSimError::Protocol("expected JOIN".into())),
        };
        let ack = exchange(&Message {
            round: 0,
            sender: SERVER_SENDER,
            payload: Payload::JoinAck {
                assigned_id: assigned,
                config_digest: digest,
            },
        })?;
        session.accept_ack(&ack)?;
        sessions.push(session);
    }

    let mut trace = Vec::with_capacity(setup.server_cfg.rounds as usize);
    for round in 1..=setup.server_cfg.rounds {
        let mut reports = Vec::with_capacity(sessions.len());
        for session in sessions.iter_mut() {
            let broadcast = exchange(&Message {
                round,
                sender: SERVER_SENDER,
                payload: Payload::GlobalModel(server.state.global_params.clone()),
            })?;
            match session.handle(&broadcast)? {
                SessionStep::Reply(update) => match exchange(&update)?.payload {
                    Payload::ClientUpdate(report) => reports.push(report),
                    _ => return Err(FedSimError::Protocol("expected CLIENT_UPDATE".into())),
                },
                _ => return Err(FedSimError::Protocol("client produced no update".into())),
            }
        }
        apply_round(&mut server, reports, &mut trace)?;
        for session in sessions.iter_mut() {
            let done = exchange(&Message {
                round,
                sender: SERVER_SENDER,
                payload: Payload::RoundDone,
            })?;
            session.handle(&done)?;
        }
    }
    let last_round = setup.server_cfg.rounds;
    for session in sessions.iter_mut() {
        let bye = exchange(&Message {
            round: last_round,
            sender: SERVER_SENDER,
            payload: Payload::Shutdown,
        })?;
        match session.handle(&bye)? {
            SessionStep::Done => {}
            _ => return Err(FedSimError::Protocol("client ignored SHUTDOWN".into())),
        }
    }
    Ok(result_from(server, trace))
}

fn run_socket(setup: FederationSetup) -> Result<FederationResult> {
    let (listen, timeout) = match setup.carrier {
        Carrier::Socket {
            listen,
            handshake_timeout,
        } => (listen, handshake_timeout),
        Carrier::Loopback => unreachable!("dispatched by run_federation"),
    };
    let digest = config_digest(&setup.server_cfg, &setup.model_spec);
    let bind_addr =
        listen.unwrap_or_else(|| SocketAddr::from(([127, 0, 0, 1], 0)));
    let listener = TcpListener::bind(bind_addr)
        .map_err(|e| FedSimError::Startup(format!("bind {bind_addr}: {e}")))?;
    let addr = listener.local_addr()?;

    let server_cfg = setup.server_cfg.clone();
    let initial = setup.initial_params.clone();
    let expected = setup.clients.len();
    let sink = setup.frame_sink.clone();
    let server_handle = std::thread::spawn(move || {
        serve_on_listener(listener, server_cfg, initial, expected, digest, timeout, sink)
    });

    let mut client_handles = Vec::new();
    for (cfg, dataset) in setup.clients {
        let model_spec = setup.model_spec.clone();
        client_handles.push(std::thread::spawn(move || {
            let engine = ClientEngine::new(cfg, model_spec, dataset);
            let mut session = ClientSession::new(engine, digest);
            join_socket(addr, &mut session, timeout)
        }));
    }

    let server_result = server_handle
        .join()
        .map_err(|_| FedSimError::Protocol("server thread panicked".into()))?;
    let mut client_errors = Vec::new();
    for handle in client_handles {
        match handle.join() {
            Ok(Ok(())) => {}
            Ok(Err(e)) => client_errors.push(e),
            Err(_) => client_errors.push(FedSimError::Protocol("client thread panicked".into())),
        }
    }
    let (server, trace) = server_result?;
    if let Some(e) = client_errors.into_iter().next() {
        return Err(e);
    }
    Ok(result_from(server, trace))
}

/// Server side of the socket carrier: accepts `expected` JOINs before the
/// deadline, then drives the synchronized round loop over the connections.
pub fn serve_on_listener(
    listener: TcpListener,
    cfg: AggregationConfig,
    initial: ParamVector,
    expected: usize,
    digest: u64,
    handshake_timeout: Duration,
    sink: Option<FrameSink>,
) -> Result<(ServerEngine, Vec<RoundTrace>)> {
    listener.set_nonblocking(true)?;
    let deadline = Instant::now() + handshake_timeout;
    let mut conns: Vec<(u32, TcpStream)> = Vec::with_capacity(expected);
    while conns.len() < expected {
        match listener.accept() {
            Ok((mut stream, _)) => {
                stream.set_nodelay(true)?;
                let remaining = deadline
                    .checked_duration_since(Instant::now())
                    .unwrap_or(Duration::from_millis(1));
                stream.set_read_timeout(Some(remaining))?;
                let frame = wire::read_frame(&mut stream)?;
                capture(&sink, &frame);
                let msg = decode(&frame)?;
                let assigned = match msg.payload {
                    Payload::Join {
                        version,
                        claimed_id,
                    } => {
                        if version != PROTOCOL_VERSION {
                            return Err(FedSimError::Protocol(format!(
                                "protocol version {version} rejected"
                            )));
                        }
                        if claimed_id == CLAIM_ASSIGN {
                            let mut next = 0u32;
                            while conns.iter().any(|(id, _)| *id == next) {
                                next += 1;
                            }
                            next
                        } else {
                            claimed_id
                        }
                    }
                    _ => return Err(FedSimError::Protocol("expected JOIN".into())),
                };
                if conns.iter().any(|(id, _)| *id == assigned) {
                    return Err(FedSimError::Protocol(format!(
                        "duplicate client id {assigned}"
                    )));
                }
                let ack = encode(&Message {
                    round: 0,
                    sender: SERVER_SENDER,
                    payload: Payload::JoinAck {
                        assigned_id: assigned,
                        config_digest: digest,
                    },
                })?;
                capture(&sink, &ack);
                stream.write_all(&ack)?;
                stream.set_read_timeout(None)?;
                conns.push((assigned, stream));
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                if Instant::now() >= deadline {
                    return Err(FedSimError::Startup(format!(
                        "handshake timed out with {}/{expected} clients joined",
                        conns.len()
                    )));
                }
                std::thread::sleep(Duration::from_millis(2));
            }
            Err(e) => return Err(e.into()),
        }
    }
    conns.sort_by_key(|(id, _)| *id);
    let ids: Vec<u32> = conns.iter().map(|(id, _)| *id).collect();
    let mut server = ServerEngine::new(cfg.clone(), initial, &ids)?;

    let mut trace = Vec::with_capacity(cfg.rounds as usize);
    for round in 1..=cfg.rounds {
        let broadcast = encode(&Message {
            round,
            sender: SERVER_SENDER,
            payload: Payload::GlobalModel(server.state.global_params.clone()),
        })?;
        for (_, stream) in conns.iter_mut() {
            capture(&sink, &broadcast);
            stream.write_all(&broadcast)?;
        }
        let mut reports = Vec::with_capacity(conns.len());
        for (id, stream) in conns.iter_mut() {
            let frame = wire::read_frame(stream)?;
            capture(&sink, &frame);
            let msg = decode(&frame)?;
            match msg.payload {
                Payload::ClientUpdate(report) => {
                    if msg.sender != *id {
                        return Err(FedSimError::Protocol(format!(
                            "update from sender {} on client {id}'s connection",
                            msg.sender
                        )));
                    }
                    reports.push(report);
                }
                _ => return Err(FedSimError::Protocol("expected CLIENT_UPDATE".into())),
            }
        }
        apply_round(&mut server, reports, &mut trace)?;
        let done = encode(&Message {
            round,
            sender: SERVER_SENDER,
            payload: Payload::RoundDone,
        })?;
        for (_, stream) in conns.iter_mut() {
            capture(&sink, &done);
            stream.write_all(&done)?;
        }
    }
    let bye = encode(&Message {
        round: cfg.rounds,
        sender: SERVER_SENDER,
        payload: Payload::Shutdown,
    })?;
    for (_, stream) in conns.iter_mut() {
        capture(&sink, &bye);
        stream.write_all(&bye)?;
    }
    Ok((server, trace))
}

/// Client side of the socket carrier: connect, JOIN, then serve rounds until
/// SHUTDOWN.
pub fn join_socket(
    addr: SocketAddr,
    session: &mut ClientSession,
    handshake_timeout: Duration,
) -> Result<()> {
    let mut stream = TcpStream::connect_timeout(&addr, handshake_timeout)
        .map_err(|e| FedSimError::Startup(format!("connect {addr}: {e}")))?;
    stream.set_nodelay(true)?;
    stream.set_read_timeout(Some(handshake_timeout))?;
    stream.write_all(&encode(&session.join_message())?)?;
    let ack = decode(&wire::read_frame(&mut stream)?)?;
    session.accept_ack(&ack)?;
    stream.set_read_timeout(None)?;
    loop {
        let msg = decode(&wire::read_frame(&mut stream)?)?;
        match session.handle(&msg)? {
            SessionStep::Reply(reply) => stream.write_all(&encode(&reply)?)?,
            SessionStep::Continue => {}
            SessionStep::Done => return Ok(()),
        }
    }
}
