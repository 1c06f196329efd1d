//! Deterministic round driver: broadcast, local training, upload,
//! aggregation, evaluation.

mod config;
mod metrics;
mod seed;

use std::thread;

use thiserror::Error;

use crate::data::{make_benchmark, DataError, SiteDataset};
use crate::model::{Model, ModelError, NormState};
use crate::netproto::update_frame_len;
use crate::params::{ParamError, ParameterSet};
use crate::strategies::{
    aggregate_fedavg, eval_model_for, local_round, ClientState, LocalHyper, StrategyError,
    StrategyKind, UploadPayload,
};

pub use config::{ConfigError, ExperimentConfig, FieldError, NetworkConfig};
pub use metrics::{MetricRecord, MetricsLog, RoundSummary, Summary, CSV_HEADER};
pub use seed::{seed_stream, SERVER_STREAM};

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Strategy(#[from] StrategyError),
    #[error(transparent)]
    Params(#[from] ParamError),
    #[error("client {client}: {reason}")]
    Client { client: u32, reason: String },
}

/// Learning rate for a round: linear from `lr / 10` at round 0 to `lr` at
/// `warmup_rounds`, then flat.
pub fn warmup_lr(round: usize, cfg: &ExperimentConfig) -> f64 {
    let lr = cfg.lr;
    if round >= cfg.warmup_rounds {
        return lr;
    }
    let start = lr / 10.0;
    start + (round as f64 / cfg.warmup_rounds as f64) * (lr - start)
}

/// Root seed of the `index`-th repetition in a multi-seed sweep.
pub fn sweep_seed(base: u64, index: usize) -> u64 {
    seed_stream(base, index as u64, SERVER_STREAM, "sweep")
}

/// The server's initial global model `w^0`.
pub fn initial_global(cfg: &ExperimentConfig) -> ParameterSet {
    let (w, _) = crate::model::init_model(&cfg.model, seed_stream(cfg.seed, 0, SERVER_STREAM, "init"));
    w
}

/// Mixing weight a client starts with. Only APFL learns it; the others
/// report the fixed value their evaluation model corresponds to.
fn initial_alpha(cfg: &ExperimentConfig) -> f64 {
    match cfg.strategy.kind {
        StrategyKind::APFL => cfg.strategy.alpha_init,
        StrategyKind::Local => 1.0,
        _ => 0.0,
    }
}

#[derive(Clone, Copy, Debug)]
struct Pending {
    round: u32,
    train_loss: f64,
    lr: f64,
    upload_bytes: u64,
}

/// Client half of a round, shared by the simulation and the TCP client.
#[derive(Clone, Debug)]
pub struct ClientRuntime {
    model: Model,
    cfg: ExperimentConfig,
    state: ClientState,
    pending: Option<Pending>,
}

impl ClientRuntime {
    pub fn new(
        cfg: &ExperimentConfig,
        dataset: SiteDataset,
        w0: &ParameterSet,
    ) -> Result<Self, OrchestratorError> {
        let model = Model::new(cfg.model.clone())?;
        let norm = NormState::from_params(w0, cfg.model.hidden.len())?;
        let state = ClientState::new(&model, dataset, w0, norm, initial_alpha(cfg), cfg.sgd(cfg.lr))?;
        if state.train_features.rows() == 0 || state.test_features.rows() == 0 {
            return Err(OrchestratorError::Client {
                client: state.client_id,
                reason: "empty train or test split".into(),
            });
        }
        Ok(ClientRuntime {
            model,
            cfg: cfg.clone(),
            state,
            pending: None,
        })
    }

    pub fn client_id(&self) -> u32 {
        self.state.client_id
    }

    pub fn n_train(&self) -> u32 {
        self.state.n_train()
    }

    pub fn state(&self) -> &ClientState {
        &self.state
    }

    /// Runs the strategy's local round against `w_global` and returns the upload.
    pub fn train_round(
        &mut self,
        round: u32,
        w_global: &ParameterSet,
    ) -> Result<UploadPayload, OrchestratorError> {
        let lr = warmup_lr(round as usize, &self.cfg);
        let hyper = LocalHyper {
            sgd: self.cfg.sgd(lr),
            batch_size: self.cfg.batch_size,
            local_epochs: self.cfg.local_epochs,
            round,
            seed: self.cfg.seed,
            personalize: round as usize >= self.cfg.personalization_delay,
        };
        let (payload, train_loss) =
            local_round(&self.model, &self.cfg.strategy, &mut self.state, w_global, &hyper)?;
        self.pending = Some(Pending {
            round,
            train_loss,
            lr,
            upload_bytes: update_frame_len(&payload) as u64,
        });
        Ok(payload)
    }

    /// Evaluates against the post-aggregation global model and closes the
    /// round opened by the last [`ClientRuntime::train_round`].
    pub fn report(&mut self, w_next: &ParameterSet) -> Result<MetricRecord, OrchestratorError> {
        let pending = self.pending.take().ok_or_else(|| OrchestratorError::Client {
            client: self.client_id(),
            reason: "report without a trained round".into(),
        })?;
        let (params, norm) = eval_model_for(self.cfg.strategy.kind, &self.state, w_next)?;
        let test = &self.state.test_features;
        let acc = self.model.evaluate_features(&params, &norm, test)?.accuracy;
        let global_norm = NormState::from_params(w_next, self.cfg.model.hidden.len())?;
        let global_acc = self.model.evaluate_features(w_next, &global_norm, test)?.accuracy;
        Ok(MetricRecord {
            round: pending.round,
            client: self.client_id(),
            train_loss: pending.train_loss,
            test_acc: acc,
            global_acc,
            alpha: self.state.alpha,
            lr: pending.lr,
            upload_bytes: pending.upload_bytes,
        })
    }
}

/// How the simulation schedules client work within a round.
#[derive(Clone, Debug)]
pub enum Execution {
    /// One thread per client.
    Parallel,
    /// One at a time, in the given client order.
    Sequential(Vec<usize>),
}

/// Runs the configured experiment on the synthetic benchmark.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<MetricsLog, OrchestratorError> {
    run_experiment_with(cfg, Execution::Parallel)
}

pub fn run_experiment_with(
    cfg: &ExperimentConfig,
    exec: Execution,
) -> Result<MetricsLog, OrchestratorError> {
    cfg.validate()?;
    let sites = make_benchmark(&cfg.data, cfg.seed)?;
    run_on_sites(cfg, sites, exec)
}

/// Runs the round loop on already-split site data.
pub fn run_on_sites(
    cfg: &ExperimentConfig,
    sites: Vec<SiteDataset>,
    exec: Execution,
) -> Result<MetricsLog, OrchestratorError> {
    run_observed(cfg, sites, exec, |_, _| {})
}

/// Like [`run_experiment`], also returning the global model after each round.
pub fn run_traced(
    cfg: &ExperimentConfig,
) -> Result<(MetricsLog, Vec<ParameterSet>), OrchestratorError> {
    cfg.validate()?;
    let sites = make_benchmark(&cfg.data, cfg.seed)?;
    let mut trace = Vec::with_capacity(cfg.rounds);
    let log = run_observed(cfg, sites, Execution::Parallel, |_, w| trace.push(w.clone()))?;
    Ok((log, trace))
}

fn run_observed(
    cfg: &ExperimentConfig,
    sites: Vec<SiteDataset>,
    exec: Execution,
    mut observe: impl FnMut(u32, &ParameterSet),
) -> Result<MetricsLog, OrchestratorError> {
    cfg.validate()?;
    let mut w = initial_global(cfg);
    let mut clients = sites
        .into_iter()
        .map(|site| ClientRuntime::new(cfg, site, &w))
        .collect::<Result<Vec<_>, _>>()?;
    let mut log = MetricsLog::new(
        cfg.strategy.kind,
        clients.iter().map(|c| c.n_train()).collect(),
    );
    for round in 0..cfg.rounds as u32 {
        let payloads = run_clients(&mut clients, &exec, |c| c.train_round(round, &w))?;
        w = aggregate_fedavg(&w, &payloads)?;
        observe(round, &w);
        for record in run_clients(&mut clients, &exec, |c| c.report(&w))? {
            log.push(record);
        }
        log::debug!("round {round} done");
    }
    Ok(log)
}

/// Applies `f` to every client; results come back in client-id order
/// whatever the schedule.
fn run_clients<T, F>(
    clients: &mut [ClientRuntime],
    exec: &Execution,
    f: F,
) -> Result<Vec<T>, OrchestratorError>
where
    T: Send,
    F: Fn(&mut ClientRuntime) -> Result<T, OrchestratorError> + Sync,
{
    let mut out: Vec<Option<T>> = clients.iter().map(|_| None).collect();
    match exec {
        Execution::Parallel => {
            let results: Vec<_> = thread::scope(|s| {
                let handles: Vec<_> = clients.iter_mut().map(|c| s.spawn(|| f(c))).collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("client thread panicked"))
                    .collect()
            });
            for (slot, r) in out.iter_mut().zip(results) {
                *slot = Some(r?);
            }
        }
        Execution::Sequential(order) => {
            for &i in order {
                out[i] = Some(f(&mut clients[i])?);
            }
        }
    }
    out.into_iter()
        .enumerate()
        .map(|(i, r)| {
            r.ok_or_else(|| OrchestratorError::Client {
                client: i as u32,
                reason: "missing from execution order".into(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_schedule_defaults() {
        let c = ExperimentConfig::default();
        assert!((warmup_lr(0, &c) - 0.01).abs() < 1e-15);
        assert!((warmup_lr(2, &c) - 0.046).abs() < 1e-15);
        for r in 5..30 {
            assert_eq!(warmup_lr(r, &c), 0.1);
        }
        let flat = ExperimentConfig {
            warmup_rounds: 0,
            ..c
        };
        assert_eq!(warmup_lr(0, &flat), 0.1);
    }
}
