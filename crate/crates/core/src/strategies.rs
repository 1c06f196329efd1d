//! The six optimization strategies behind one contract: what a client trains
//! locally, what it uploads, how the server aggregates, and which parameters
//! the client evaluates with.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::SiteDataset;
use crate::model::{
    is_running_stat, sgd_step, Features, Model, ModelError, NormState, OptimizerState, SgdHyper,
};
use crate::orchestrator::seed_stream;
use crate::params::{axpy, dot, filter_merge, LayerTag, ParamError, ParameterSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StrategyKind {
    Local,
    FedAvg,
    FedProx,
    FedBN,
    FedPer,
    APFL,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 6] = [
        StrategyKind::Local,
        StrategyKind::FedAvg,
        StrategyKind::FedProx,
        StrategyKind::FedBN,
        StrategyKind::FedPer,
        StrategyKind::APFL,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Local => "Local",
            StrategyKind::FedAvg => "FedAvg",
            StrategyKind::FedProx => "FedProx",
            StrategyKind::FedBN => "FedBN",
            StrategyKind::FedPer => "FedPer",
            StrategyKind::APFL => "APFL",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name().eq_ignore_ascii_case(s))
    }

    /// Tags a partitioned strategy keeps on the client.
    pub fn keep_local(self) -> BTreeSet<LayerTag> {
        match self {
            StrategyKind::FedBN => [LayerTag::Norm].into_iter().collect(),
            StrategyKind::FedPer => [LayerTag::Head].into_iter().collect(),
            _ => BTreeSet::new(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaMode {
    Adaptive,
    Fixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    /// FedProx proximal coefficient.
    pub mu: f64,
    /// APFL initial mixing weight.
    pub alpha_init: f64,
    /// APFL mixing-weight learning rate.
    pub eta_alpha: f64,
    pub alpha_mode: AlphaMode,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        StrategyConfig {
            kind: StrategyKind::APFL,
            mu: 0.01,
            alpha_init: 0.01,
            eta_alpha: 0.2,
            alpha_mode: AlphaMode::Adaptive,
        }
    }
}

impl StrategyConfig {
    pub fn of(kind: StrategyKind) -> Self {
        StrategyConfig {
            kind,
            ..Self::default()
        }
    }

    pub fn problems(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        if !(self.mu >= 0.0) {
            out.push(("mu".into(), "must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha_init) {
            out.push(("alpha_init".into(), "must be in [0, 1]".into()));
        }
        if !(self.eta_alpha > 0.0) {
            out.push(("eta_alpha".into(), "must be > 0".into()));
        }
        out
    }
}

#[derive(Debug, Error)]
pub enum StrategyError {
    #[error("no payloads to aggregate")]
    NoPayloads,
    #[error("payload from client {0} has n_i = 0")]
    EmptyClient(u32),
    #[error("duplicate payload from client {0}")]
    DuplicateClient(u32),
    #[error(transparent)]
    Params(#[from] ParamError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// What one client sends the server after a local round.
#[derive(Clone, Debug, PartialEq)]
pub struct UploadPayload {
    pub client_id: u32,
    pub n_i: u32,
    pub round: u32,
    /// `w_final - w_global`, zeroed on entries the client keeps local.
    pub delta: ParameterSet,
}

/// Per-round training knobs shared by every strategy.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalHyper {
    pub sgd: SgdHyper,
    pub batch_size: usize,
    pub local_epochs: usize,
    pub round: u32,
    pub seed: u64,
    /// False during the personalization delay: APFL keeps alpha frozen.
    pub personalize: bool,
}

/// One silo's persistent state.
#[derive(Clone, Debug)]
pub struct ClientState {
    pub client_id: u32,
    pub dataset: SiteDataset,
    pub train_features: Features,
    pub test_features: Features,
    /// Local-only model `u_i`.
    pub local_params: ParameterSet,
    /// Running statistics the client evaluates with.
    pub personal_norm: NormState,
    pub alpha: f64,
    pub opt_state: OptimizerState,
}

impl ClientState {
    pub fn new(
        model: &Model,
        dataset: SiteDataset,
        init: &ParameterSet,
        init_norm: NormState,
        alpha: f64,
        sgd: SgdHyper,
    ) -> Result<Self, ModelError> {
        let train_features = model.features(&dataset.train)?;
        let test_features = model.features(&dataset.test)?;
        Ok(ClientState {
            client_id: dataset.client_id as u32,
            dataset,
            train_features,
            test_features,
            local_params: init.clone(),
            personal_norm: init_norm,
            alpha,
            opt_state: OptimizerState::new(init, sgd),
        })
    }

    pub fn n_train(&self) -> u32 {
        self.train_features.rows() as u32
    }
}

/// Shuffled minibatch index lists for one epoch.
fn epoch_batches(n: usize, batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
}

/// Every minibatch of the round, epoch by epoch.
fn round_batches(client: &ClientState, hyper: &LocalHyper) -> Vec<Features> {
    (0..hyper.local_epochs)
        .flat_map(|epoch| {
            let seed = seed_stream(
                hyper.seed,
                hyper.round as u64,
                client.client_id as u64,
                &format!("shuffle/{epoch}"),
            );
            epoch_batches(client.train_features.rows(), hyper.batch_size, seed)
        })
        .map(|idx| client.train_features.select(&idx))
        .collect()
}

struct Trained {
    params: ParameterSet,
    norm: NormState,
    opt: OptimizerState,
    mean_loss: f64,
}

/// Minibatch SGD from `start`. With `prox = Some((mu, anchor))` every
/// gradient gets `mu * (w - anchor)` added on trainable entries.
fn train_sgd(
    model: &Model,
    client: &ClientState,
    start: &ParameterSet,
    mut norm: NormState,
    hyper: &LocalHyper,
    prox: Option<(f64, &ParameterSet)>,
) -> Result<Trained, StrategyError> {
    let mut params = start.clone();
    let mut opt = OptimizerState::new(start, hyper.sgd);
    let mut loss_sum = 0.0;
    let mut seen = 0usize;
    for batch in round_batches(client, hyper) {
        let (loss, mut grads) = model.loss_and_grad_features(&params, &mut norm, &batch)?;
        if let Some((mu, anchor)) = prox {
            if mu != 0.0 {
                let pulled = params.zip_map(anchor, |e, w, a| {
                    if is_running_stat(&e.name) {
                        0.0
                    } else {
                        mu * (w - a)
                    }
                })?;
                grads = axpy(1.0, &pulled, &grads)?;
            }
        }
        let (next, next_opt) = sgd_step(&params, &grads, &opt)?;
        params = next;
        opt = next_opt;
        loss_sum += loss * batch.rows() as f64;
        seen += batch.rows();
    }
    let params = norm.write_into(&params)?;
    Ok(Trained {
        params,
        norm,
        opt,
        mean_loss: loss_sum / seen.max(1) as f64,
    })
}

fn payload(client: &ClientState, hyper: &LocalHyper, delta: ParameterSet) -> UploadPayload {
    UploadPayload {
        client_id: client.client_id,
        n_i: client.n_train(),
        round: hyper.round,
        delta,
    }
}

fn norm_layers(model: &Model) -> usize {
    model.spec().hidden.len()
}

/// Isolated training of `u_i`; uploads an all-zero delta.
pub fn local_train_isolated(
    model: &Model,
    client: &mut ClientState,
    w_global: &ParameterSet,
    hyper: &LocalHyper,
) -> Result<(UploadPayload, f64), StrategyError> {
    let t = train_sgd(
        model,
        client,
        &client.local_params,
        client.personal_norm.clone(),
        hyper,
        None,
    )?;
    client.local_params = t.params;
    client.personal_norm = t.norm;
    client.opt_state = t.opt;
    Ok((payload(client, hyper, w_global.zeros_like()), t.mean_loss))
}

/// FedProx local objective `F_i(w) + mu/2 |w - w_global|^2`; `mu = 0` is FedAvg.
pub fn local_train_fedprox(
    model: &Model,
    client: &mut ClientState,
    w_global: &ParameterSet,
    mu: f64,
    hyper: &LocalHyper,
) -> Result<(UploadPayload, f64), StrategyError> {
    let norm = NormState::from_params(w_global, norm_layers(model))?;
    let t = train_sgd(model, client, w_global, norm, hyper, Some((mu, w_global)))?;
    let delta = axpy(-1.0, w_global, &t.params)?;
    client.local_params = t.params;
    client.personal_norm = t.norm;
    client.opt_state = t.opt;
    Ok((payload(client, hyper, delta), t.mean_loss))
}

/// FedBN (`keep_local = {Norm}`) and FedPer (`keep_local = {Head}`): start
/// from the global model with the client's kept entries swapped in, train,
/// keep everything locally, upload the delta of the shared entries only.
pub fn local_train_partitioned(
    model: &Model,
    client: &mut ClientState,
    w_global: &ParameterSet,
    keep_local: &BTreeSet<LayerTag>,
    hyper: &LocalHyper,
) -> Result<(UploadPayload, f64), StrategyError> {
    let start = filter_merge(w_global, &client.local_params, keep_local)?;
    let norm = NormState::from_params(&start, norm_layers(model))?;
    let t = train_sgd(model, client, &start, norm, hyper, None)?;
    let delta = axpy(-1.0, w_global, &t.params)?.mask(|e| !keep_local.contains(&e.tag));
    client.local_params = t.params;
    client.personal_norm = t.norm;
    client.opt_state = t.opt;
    Ok((payload(client, hyper, delta), t.mean_loss))
}

/// `alpha * u + (1 - alpha) * w`, exact at the endpoints.
pub fn apfl_mix(u: &ParameterSet, w: &ParameterSet, alpha: f64) -> Result<ParameterSet, ParamError> {
    u.check_congruent(w)?;
    if alpha == 0.0 {
        return Ok(w.clone());
    }
    if alpha == 1.0 {
        return Ok(u.clone());
    }
    u.zip_map(w, |_, a, b| alpha * a + (1.0 - alpha) * b)
}

/// One gradient step on the mixing weight, clipped to `[0, 1]`:
/// `alpha - eta * <grad_v, u - w>`.
pub fn apfl_alpha_update(
    alpha: f64,
    grad_v: &ParameterSet,
    u: &ParameterSet,
    w: &ParameterSet,
    eta_alpha: f64,
) -> Result<f64, ParamError> {
    let diff = axpy(-1.0, w, u)?;
    let g = dot(grad_v, &diff)?;
    Ok((alpha - eta_alpha * g).clamp(0.0, 1.0))
}

/// APFL local round. Per minibatch, all from the pre-step iterates:
/// gradient of the global copy `w`, gradient of the mixture `v`, then
/// `w` steps on its own gradient, `u` steps on `alpha * grad_v`, and alpha
/// steps on `<grad_v, u - w>` when adaptive.
pub fn local_round_apfl(
    model: &Model,
    client: &mut ClientState,
    w_global: &ParameterSet,
    cfg: &StrategyConfig,
    hyper: &LocalHyper,
) -> Result<(UploadPayload, f64), StrategyError> {
    let mut w = w_global.clone();
    let mut norm_w = NormState::from_params(w_global, norm_layers(model))?;
    let mut u = client.local_params.clone();
    let mut norm_v = client.personal_norm.clone();
    let mut opt_w = OptimizerState::new(&w, hyper.sgd);
    let mut opt_u = OptimizerState::new(&u, hyper.sgd);
    let mut alpha = client.alpha;
    let adaptive = cfg.alpha_mode == AlphaMode::Adaptive && hyper.personalize;
    let mut loss_sum = 0.0;
    let mut seen = 0usize;
    for batch in round_batches(client, hyper) {
        let (_, grad_w) = model.loss_and_grad_features(&w, &mut norm_w, &batch)?;
        let v = apfl_mix(&u, &w, alpha)?;
        let (loss_v, grad_v) = model.loss_and_grad_features(&v, &mut norm_v, &batch)?;
        let next_alpha = if adaptive {
            apfl_alpha_update(alpha, &grad_v, &u, &w, cfg.eta_alpha)?
        } else {
            alpha
        };
        let (w_next, o) = sgd_step(&w, &grad_w, &opt_w)?;
        w = w_next;
        opt_w = o;
        let grad_u = if alpha == 1.0 {
            grad_v
        } else {
            grad_v.map(|_, g| alpha * g)
        };
        let (u_next, o) = sgd_step(&u, &grad_u, &opt_u)?;
        u = u_next;
        opt_u = o;
        alpha = next_alpha;
        loss_sum += loss_v * batch.rows() as f64;
        seen += batch.rows();
    }
    let w = norm_w.write_into(&w)?;
    let delta = axpy(-1.0, w_global, &w)?;
    client.local_params = norm_v.write_into(&u)?;
    client.personal_norm = norm_v;
    client.alpha = alpha;
    client.opt_state = opt_u;
    Ok((payload(client, hyper, delta), loss_sum / seen.max(1) as f64))
}

/// Dispatches one local round for the configured strategy.
pub fn local_round(
    model: &Model,
    cfg: &StrategyConfig,
    client: &mut ClientState,
    w_global: &ParameterSet,
    hyper: &LocalHyper,
) -> Result<(UploadPayload, f64), StrategyError> {
    match cfg.kind {
        StrategyKind::Local => local_train_isolated(model, client, w_global, hyper),
        StrategyKind::FedAvg => local_train_fedprox(model, client, w_global, 0.0, hyper),
        StrategyKind::FedProx => local_train_fedprox(model, client, w_global, cfg.mu, hyper),
        StrategyKind::FedBN | StrategyKind::FedPer => {
            local_train_partitioned(model, client, w_global, &cfg.kind.keep_local(), hyper)
        }
        // During the personalization delay APFL trains like FedAvg and keeps
        // the locally adapted copy as its starting `u`.
        StrategyKind::APFL if !hyper.personalize => {
            local_train_fedprox(model, client, w_global, 0.0, hyper)
        }
        StrategyKind::APFL => local_round_apfl(model, client, w_global, cfg, hyper),
    }
}

/// `w + sum_i (n_i / n) * delta_i`, summed in ascending client id.
///
/// This is `sum_i (n_i / n) (w + delta_i)` with the `w` terms collected, which
/// keeps zero deltas an exact fixed point.
pub fn aggregate_fedavg(
    global_w: &ParameterSet,
    payloads: &[UploadPayload],
) -> Result<ParameterSet, StrategyError> {
    if payloads.is_empty() {
        return Err(StrategyError::NoPayloads);
    }
    let mut sorted: Vec<&UploadPayload> = payloads.iter().collect();
    sorted.sort_by_key(|p| p.client_id);
    for pair in sorted.windows(2) {
        if pair[0].client_id == pair[1].client_id {
            return Err(StrategyError::DuplicateClient(pair[0].client_id));
        }
    }
    let mut total = 0u64;
    for p in &sorted {
        if p.n_i == 0 {
            return Err(StrategyError::EmptyClient(p.client_id));
        }
        global_w.check_congruent(&p.delta)?;
        total += p.n_i as u64;
    }
    let mut step = global_w.zeros_like();
    for p in &sorted {
        let weight = p.n_i as f64 / total as f64;
        step = step.zip_map(&p.delta, |_, acc, d| acc + weight * d)?;
    }
    Ok(axpy(1.0, &step, global_w)?)
}

/// The parameters and running statistics a client evaluates with.
pub fn eval_model_for(
    kind: StrategyKind,
    client: &ClientState,
    w_global: &ParameterSet,
) -> Result<(ParameterSet, NormState), ParamError> {
    let params = match kind {
        StrategyKind::Local => client.local_params.clone(),
        StrategyKind::FedAvg | StrategyKind::FedProx => w_global.clone(),
        StrategyKind::FedBN | StrategyKind::FedPer => {
            filter_merge(w_global, &client.local_params, &kind.keep_local())?
        }
        StrategyKind::APFL => apfl_mix(&client.local_params, w_global, client.alpha)?,
    };
    Ok((params, client.personal_norm.clone()))
}
