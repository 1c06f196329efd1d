use std::io;
use std::net::TcpStream;
use std::thread;
use std::time::Duration;

use super::codec::{decode_message, read_frame, write_message, Message};
use super::{NetError, DONE};
use crate::data::{split_site, split_sizes, BenchmarkConfig, SkeletonFile};
use crate::model::ModelError;
use crate::orchestrator::{ClientRuntime, ExperimentConfig, NetworkConfig, OrchestratorError};

/// Connection behavior and an optional local config to check the server's against.
#[derive(Clone, Debug)]
pub struct JoinOptions {
    pub connect_retries: u32,
    pub retry_delay: Duration,
    /// When set, the server's config must match it (the `network` table aside).
    pub expected: Option<ExperimentConfig>,
}

impl Default for JoinOptions {
    fn default() -> Self {
        let n = NetworkConfig::default();
        JoinOptions {
            connect_retries: n.connect_retries,
            retry_delay: Duration::from_millis(n.retry_delay_ms),
            expected: None,
        }
    }
}

impl JoinOptions {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        JoinOptions {
            connect_retries: cfg.network.connect_retries,
            retry_delay: Duration::from_millis(cfg.network.retry_delay_ms),
            expected: Some(cfg.clone()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct JoinOutcome {
    pub rounds: u32,
    pub bytes_sent: u64,
}

struct Link {
    stream: TcpStream,
    bytes_sent: u64,
}

impl Link {
    fn send(&mut self, m: &Message) -> Result<(), NetError> {
        let n = write_message(&mut self.stream, m)
            .map_err(|e| NetError::io(format!("send {}", m.kind()), e))?;
        self.bytes_sent += n as u64;
        Ok(())
    }

    fn recv(&mut self) -> Result<Message, NetError> {
        let frame = read_frame(&mut self.stream).map_err(|e| match e.kind() {
            io::ErrorKind::UnexpectedEof | io::ErrorKind::ConnectionReset => NetError::ServerGone,
            _ => NetError::io("read from server", e),
        })?;
        Ok(decode_message(&frame)?)
    }

    /// Tells the server why this client is leaving, then returns `err`.
    fn abort(&mut self, err: NetError) -> NetError {
        let _ = self.send(&Message::Shutdown {
            reason: err.to_string(),
        });
        err
    }
}

fn connect(addr: &str, opts: &JoinOptions) -> Result<TcpStream, NetError> {
    let mut last = None;
    for attempt in 0..=opts.connect_retries {
        match TcpStream::connect(addr) {
            Ok(s) => return Ok(s),
            Err(e) => {
                log::warn!("connect {addr} attempt {}: {e}", attempt + 1);
                last = Some(e);
                if attempt < opts.connect_retries {
                    thread::sleep(opts.retry_delay);
                }
            }
        }
    }
    Err(NetError::io(
        format!("connect {addr} ({} attempts)", opts.connect_retries + 1),
        last.expect("at least one attempt"),
    ))
}

fn without_network(c: &ExperimentConfig) -> ExperimentConfig {
    ExperimentConfig {
        network: NetworkConfig::default(),
        ..c.clone()
    }
}

fn check_shape(site: &SkeletonFile, cfg: &ExperimentConfig) -> Result<(), NetError> {
    if site.joints != cfg.model.joints {
        return Err(NetError::Shape(format!(
            "data has V={} joints, model expects V={}",
            site.joints, cfg.model.joints
        )));
    }
    if let Some(s) = site.samples.iter().find(|s| s.label >= cfg.model.classes) {
        return Err(NetError::Shape(format!(
            "sample {} has label {}, model has {} classes",
            s.id, s.label, cfg.model.classes
        )));
    }
    Ok(())
}

/// Runs the client half of the protocol on one site's samples.
pub fn join(
    addr: &str,
    client_id: u32,
    site: SkeletonFile,
    opts: &JoinOptions,
) -> Result<JoinOutcome, NetError> {
    let local_fraction = opts
        .expected
        .as_ref()
        .map_or(BenchmarkConfig::default().test_fraction, |c| c.data.test_fraction);
    let (n_train, _) = split_sizes(site.samples.len(), local_fraction)?;
    let stream = connect(addr, opts)?;
    stream
        .set_nodelay(true)
        .map_err(|e| NetError::io("socket", e))?;
    let mut link = Link {
        stream,
        bytes_sent: 0,
    };
    link.send(&Message::Join {
        client_id,
        n_train: n_train as u32,
    })?;
    let cfg = match link.recv()? {
        Message::Welcome { config, .. } => *config,
        Message::Shutdown { reason } => return Err(NetError::Refused(reason)),
        other => return Err(link.abort(NetError::Protocol(format!("expected WELCOME, got {}", other.kind())))),
    };
    if let Some(local) = &opts.expected {
        if without_network(local) != without_network(&cfg) {
            return Err(link.abort(NetError::Protocol(
                "server config differs from the local config".into(),
            )));
        }
    }
    if let Err(e) = check_shape(&site, &cfg) {
        return Err(link.abort(e));
    }
    let dataset = match split_site(site.samples, client_id as usize, cfg.data.test_fraction, cfg.seed) {
        Ok(d) => d,
        Err(e) => return Err(link.abort(e.into())),
    };
    if dataset.train.len() != n_train {
        return Err(link.abort(NetError::Protocol(format!(
            "announced n_train {n_train} but the server's split gives {}",
            dataset.train.len()
        ))));
    }
    let rounds = cfg.rounds as u32;
    let mut dataset = Some(dataset);
    let mut runtime: Option<ClientRuntime> = None;
    let mut expect = 0u32;
    loop {
        match link.recv()? {
            Message::Global { round, params } if round == expect => {
                let rt = match runtime.as_mut() {
                    Some(rt) => {
                        let record = rt.report(&params)?;
                        link.send(&Message::Metric(record))?;
                        rt
                    }
                    None => {
                        let ds = dataset.take().expect("dataset used once");
                        match ClientRuntime::new(&cfg, ds, &params) {
                            Ok(rt) => runtime.insert(rt),
                            Err(e) => return Err(link.abort(runtime_error(e))),
                        }
                    }
                };
                if round < rounds {
                    let payload = rt.train_round(round, &params)?;
                    link.send(&Message::Update(payload))?;
                }
                expect += 1;
            }
            Message::Shutdown { reason } if reason == DONE && expect == rounds + 1 => {
                return Ok(JoinOutcome {
                    rounds,
                    bytes_sent: link.bytes_sent,
                });
            }
            Message::Shutdown { reason } => return Err(NetError::Refused(reason)),
            other => {
                return Err(link.abort(NetError::Protocol(format!(
                    "expected GLOBAL for round {expect}, got {}",
                    other.kind()
                ))))
            }
        }
    }
}

fn runtime_error(e: OrchestratorError) -> NetError {
    match e {
        OrchestratorError::Model(m @ (ModelError::SampleShape { .. } | ModelError::Label { .. })) => {
            NetError::Shape(m.to_string())
        }
        other => NetError::Run(other),
    }
}
