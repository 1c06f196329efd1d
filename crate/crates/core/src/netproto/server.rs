use std::io;
use std::net::{TcpListener, TcpStream};
use std::thread;
use std::time::{Duration, Instant};

use super::codec::{decode_message, read_frame, write_message, Message};
use super::{is_timeout, NetError, DONE, STALE_ROUND};
use crate::orchestrator::{initial_global, ExperimentConfig, MetricsLog};
use crate::params::ParameterSet;
use crate::strategies::aggregate_fedavg;

struct Conn {
    id: u32,
    n_train: u32,
    stream: TcpStream,
}

impl Conn {
    fn send(&mut self, m: &Message) -> Result<(), NetError> {
        write_message(&mut self.stream, m)
            .map(|_| ())
            .map_err(|e| NetError::io(format!("send {} to client {}", m.kind(), self.id), e))
    }

    fn recv(&mut self) -> Result<Message, NetError> {
        let frame = read_frame(&mut self.stream).map_err(|e| match e.kind() {
            io::ErrorKind::UnexpectedEof
            | io::ErrorKind::ConnectionReset
            | io::ErrorKind::ConnectionAborted
            | io::ErrorKind::BrokenPipe => NetError::Disconnected(self.id),
            _ if is_timeout(&e) => NetError::Timeout(format!("no reply from client {}", self.id)),
            _ => NetError::io(format!("read from client {}", self.id), e),
        })?;
        Ok(decode_message(&frame)?)
    }
}

/// Binds `bind` and serves one experiment.
pub fn serve(cfg: &ExperimentConfig, bind: &str) -> Result<MetricsLog, NetError> {
    let listener = TcpListener::bind(bind).map_err(|e| NetError::io(format!("bind {bind}"), e))?;
    serve_on(cfg, listener)
}

/// Serves one experiment on an already-bound listener: waits for every
/// client, runs the rounds, and returns the metrics the clients reported.
pub fn serve_on(cfg: &ExperimentConfig, listener: TcpListener) -> Result<MetricsLog, NetError> {
    cfg.validate()?;
    let mut conns = accept_clients(cfg, &listener)?;
    let io_timeout = match cfg.network.io_timeout_secs {
        0 => None,
        s => Some(Duration::from_secs(s)),
    };
    for c in &conns {
        c.stream
            .set_read_timeout(io_timeout)
            .map_err(|e| NetError::io("set read timeout", e))?;
    }
    match run_rounds(cfg, &mut conns) {
        Ok(log) => {
            broadcast_shutdown(&mut conns, DONE);
            Ok(log)
        }
        Err(e) => {
            log::error!("aborting experiment: {e}");
            broadcast_shutdown(&mut conns, &format!("aborted: {e}"));
            Err(e)
        }
    }
}

fn broadcast_shutdown(conns: &mut [Conn], reason: &str) {
    for c in conns {
        let _ = c.send(&Message::Shutdown {
            reason: reason.to_string(),
        });
    }
}

fn refuse(stream: &mut TcpStream, reason: String) {
    log::warn!("refusing connection: {reason}");
    let _ = write_message(stream, &Message::Shutdown { reason });
}

fn accept_clients(cfg: &ExperimentConfig, listener: &TcpListener) -> Result<Vec<Conn>, NetError> {
    let n = cfg.network.clients;
    let timeout = Duration::from_secs(cfg.network.join_timeout_secs);
    let deadline = Instant::now() + timeout;
    listener
        .set_nonblocking(true)
        .map_err(|e| NetError::io("listener", e))?;
    let mut slots: Vec<Option<Conn>> = (0..n).map(|_| None).collect();
    let mut joined = 0;
    while joined < n {
        match listener.accept() {
            Ok((mut stream, addr)) => {
                let setup = stream
                    .set_nonblocking(false)
                    .and_then(|_| stream.set_read_timeout(Some(Duration::from_secs(10))))
                    .and_then(|_| stream.set_nodelay(true));
                if let Err(e) = setup {
                    log::warn!("{addr}: {e}");
                    continue;
                }
                let hello = read_frame(&mut stream)
                    .map_err(|e| e.to_string())
                    .and_then(|f| decode_message(&f).map_err(|e| e.to_string()));
                match hello {
                    Ok(Message::Join { client_id, n_train }) => {
                        let id = client_id as usize;
                        if id >= n {
                            refuse(&mut stream, format!("client_id {client_id} out of range 0..{n}"));
                        } else if slots[id].is_some() {
                            refuse(&mut stream, format!("duplicate client_id {client_id}"));
                        } else if n_train == 0 {
                            refuse(&mut stream, "n_train must be positive".into());
                        } else {
                            let mut conn = Conn {
                                id: client_id,
                                n_train,
                                stream,
                            };
                            conn.send(&Message::Welcome {
                                round: 0,
                                config: Box::new(cfg.clone()),
                            })?;
                            log::info!("client {client_id} joined from {addr} with {n_train} samples");
                            slots[id] = Some(conn);
                            joined += 1;
                        }
                    }
                    Ok(other) => refuse(&mut stream, format!("expected JOIN, got {}", other.kind())),
                    Err(e) => log::warn!("{addr}: bad JOIN: {e}"),
                }
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                if Instant::now() >= deadline {
                    let mut present: Vec<Conn> = slots.into_iter().flatten().collect();
                    let msg = format!(
                        "only {joined} of {n} clients joined within {}s",
                        timeout.as_secs()
                    );
                    broadcast_shutdown(&mut present, &format!("aborted: {msg}"));
                    return Err(NetError::Timeout(msg));
                }
                thread::sleep(Duration::from_millis(10));
            }
            Err(e) => return Err(NetError::io("accept", e)),
        }
    }
    Ok(slots.into_iter().map(|s| s.expect("all slots filled")).collect())
}

fn run_rounds(cfg: &ExperimentConfig, conns: &mut [Conn]) -> Result<MetricsLog, NetError> {
    let rounds = cfg.rounds as u32;
    let mut log = MetricsLog::new(cfg.strategy.kind, conns.iter().map(|c| c.n_train).collect());
    let mut w: ParameterSet = initial_global(cfg);
    for round in 0..=rounds {
        let global = Message::Global {
            round,
            params: w.clone(),
        };
        for c in conns.iter_mut() {
            c.send(&global)?;
        }
        let mut payloads = Vec::with_capacity(conns.len());
        for c in conns.iter_mut() {
            if round > 0 {
                match c.recv()? {
                    Message::Metric(r) if r.round + 1 == round && r.client == c.id => log.push(r),
                    other => return Err(unexpected(c, other, "METRIC", round - 1)),
                }
            }
            if round < rounds {
                match c.recv()? {
                    Message::Update(p) if p.round != round => {
                        let _ = c.send(&Message::Shutdown {
                            reason: STALE_ROUND.into(),
                        });
                        return Err(NetError::Protocol(format!(
                            "client {} sent UPDATE for round {} during round {round}",
                            c.id, p.round
                        )));
                    }
                    Message::Update(p) if p.client_id == c.id && p.n_i == c.n_train => payloads.push(p),
                    other => return Err(unexpected(c, other, "UPDATE", round)),
                }
            }
        }
        if round < rounds {
            w = aggregate_fedavg(&w, &payloads).map_err(|e| NetError::Run(e.into()))?;
            log::info!("round {round} aggregated");
        }
    }
    Ok(log)
}

fn unexpected(c: &Conn, got: Message, want: &str, round: u32) -> NetError {
    match got {
        Message::Shutdown { reason } => {
            NetError::Protocol(format!("client {} aborted: {reason}", c.id))
        }
        other => NetError::Protocol(format!(
            "client {}: expected {want} for round {round}, got {} ({})",
            c.id,
            other.kind(),
            describe(&other)
        )),
    }
}

fn describe(m: &Message) -> String {
    match m {
        Message::Update(p) => format!("client {} round {} n_i {}", p.client_id, p.round, p.n_i),
        Message::Metric(r) => format!("client {} round {}", r.client, r.round),
        Message::Join { client_id, .. } => format!("client {client_id}"),
        _ => String::new(),
    }
}
