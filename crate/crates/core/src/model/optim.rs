use serde::{Deserialize, Serialize};

use super::is_decay_exempt;
use crate::params::{ParamError, ParameterSet};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdHyper {
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
}

/// Momentum buffers plus the step hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub momentum_buffers: ParameterSet,
    pub hyper: SgdHyper,
}

impl OptimizerState {
    /// Zeroed buffers congruent to `params`.
    pub fn new(params: &ParameterSet, hyper: SgdHyper) -> Self {
        OptimizerState {
            momentum_buffers: params.zeros_like(),
            hyper,
        }
    }
}

/// One SGD step with momentum and decoupled-from-norm weight decay:
/// `g' = g + wd * p` (skipped for Norm and bias/shift entries),
/// `buf = momentum * buf + g'`, `p = p - lr * buf`.
pub fn sgd_step(
    params: &ParameterSet,
    grads: &ParameterSet,
    opt: &OptimizerState,
) -> Result<(ParameterSet, OptimizerState), ParamError> {
    params.check_congruent(grads)?;
    params.check_congruent(&opt.momentum_buffers)?;
    let SgdHyper {
        lr,
        weight_decay,
        momentum,
    } = opt.hyper;
    let effective = grads.zip_map(params, |e, g, p| {
        if weight_decay != 0.0 && !is_decay_exempt(&e.name, e.tag) {
            g + weight_decay * p
        } else {
            g
        }
    })?;
    let buffers = opt
        .momentum_buffers
        .zip_map(&effective, |_, b, g| momentum * b + g)?;
    let next = if lr == 0.0 {
        params.clone()
    } else {
        params.zip_map(&buffers, |_, p, b| p - lr * b)?
    };
    Ok((
        next,
        OptimizerState {
            momentum_buffers: buffers,
            hyper: opt.hyper,
        },
    ))
}
