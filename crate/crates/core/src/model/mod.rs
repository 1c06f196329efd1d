//! Frequency-aware skeleton classifier with hand-written backprop.
//!
//! Architecture: DCT features, then `[linear -> batch norm -> ReLU]` for each
//! hidden width, then a linear head. Parameter naming and tagging:
//!
//! | entries                                   | tag  |
//! |-------------------------------------------|------|
//! | `fcN.weight`, `fcN.bias`                  | Base |
//! | `bnN.gamma`, `bnN.beta`, `bnN.running_*`  | Norm |
//! | `head.weight`, `head.bias`                | Head |

mod dct;
mod network;
mod optim;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::{LayerTag, ParamError, ParameterSet};

pub use dct::DctBasis;
pub use network::{argmax, dct_features, evaluate, init_model, EvalReport, Features, ForwardCache, Model};
pub use optim::{sgd_step, OptimizerState, SgdHyper};

/// One labeled sample: `frames x joints x 3` coordinates, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonSequence {
    pub id: u64,
    pub frames: usize,
    pub joints: usize,
    pub coords: Vec<f64>,
    pub label: usize,
    pub theme: usize,
}

impl SkeletonSequence {
    #[inline]
    pub fn at(&self, t: usize, v: usize, c: usize) -> f64 {
        self.coords[(t * self.joints + v) * 3 + c]
    }

    /// Linear resampling along time to `frames` frames. Identity when the
    /// length already matches.
    pub fn resampled(&self, frames: usize) -> SkeletonSequence {
        if frames == self.frames {
            return self.clone();
        }
        let width = self.joints * 3;
        let mut coords = Vec::with_capacity(frames * width);
        for t in 0..frames {
            let pos = if frames == 1 || self.frames == 1 {
                0.0
            } else {
                t as f64 * (self.frames - 1) as f64 / (frames - 1) as f64
            };
            let lo = (pos.floor() as usize).min(self.frames - 1);
            let hi = (lo + 1).min(self.frames - 1);
            let frac = pos - lo as f64;
            for j in 0..width {
                let a = self.coords[lo * width + j];
                let b = self.coords[hi * width + j];
                coords.push(a + (b - a) * frac);
            }
        }
        SkeletonSequence {
            frames,
            coords,
            ..self.clone()
        }
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    /// Sequence length after resampling.
    pub frames: usize,
    pub joints: usize,
    pub classes: usize,
    /// Retained DCT coefficients per joint-coordinate channel.
    pub dct_coeffs: usize,
    pub hidden: Vec<usize>,
    pub norm_epsilon: f64,
    pub norm_momentum: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            frames: 32,
            joints: 25,
            classes: 11,
            dct_coeffs: 16,
            hidden: vec![128, 64],
            norm_epsilon: 1e-5,
            norm_momentum: 0.1,
        }
    }
}

impl ModelSpec {
    pub fn feature_dim(&self) -> usize {
        self.joints * 3 * self.dct_coeffs
    }

    /// Human-readable problems with this spec, empty when valid.
    pub fn problems(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let mut bad = |field: &str, msg: String| out.push((field.to_string(), msg));
        if self.frames == 0 {
            bad("frames", "must be >= 1".into());
        }
        if self.joints == 0 {
            bad("joints", "must be >= 1".into());
        }
        if self.classes < 2 {
            bad("classes", "must be >= 2".into());
        }
        if self.dct_coeffs == 0 || self.dct_coeffs > self.frames {
            bad(
                "dct_coeffs",
                format!("must be in 1..={} (frames)", self.frames),
            );
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            bad("hidden", "must be a nonempty list of positive widths".into());
        }
        if !(self.norm_epsilon > 0.0) {
            bad("norm_epsilon", "must be > 0".into());
        }
        if !(self.norm_momentum > 0.0 && self.norm_momentum < 1.0) {
            bad("norm_momentum", "must be in (0, 1)".into());
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("empty dataset")]
    EmptyDataset,
    #[error("dct_coeffs {coeffs} exceeds sequence length {frames}")]
    TooManyCoeffs { coeffs: usize, frames: usize },
    #[error("sample {id}: shape {frames}x{joints} does not match model {want_frames}x{want_joints}")]
    SampleShape {
        id: u64,
        frames: usize,
        joints: usize,
        want_frames: usize,
        want_joints: usize,
    },
    #[error("sample {id}: label {label} out of range for {classes} classes")]
    Label { id: u64, label: usize, classes: usize },
    #[error(transparent)]
    Params(#[from] ParamError),
}

/// Running mean/variance for each normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct NormState {
    pub layers: Vec<NormStats>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl NormState {
    pub fn fresh(spec: &ModelSpec) -> Self {
        NormState {
            layers: spec
                .hidden
                .iter()
                .map(|&h| NormStats {
                    running_mean: vec![0.0; h],
                    running_var: vec![1.0; h],
                })
                .collect(),
        }
    }

    /// Reads the running-stat entries out of a parameter set.
    pub fn from_params(params: &ParameterSet, layers: usize) -> Result<Self, ParamError> {
        let layers = (1..=layers)
            .map(|l| {
                Ok(NormStats {
                    running_mean: params.values(&running_mean_name(l))?.to_vec(),
                    running_var: params.values(&running_var_name(l))?.to_vec(),
                })
            })
            .collect::<Result<_, ParamError>>()?;
        Ok(NormState { layers })
    }

    /// Returns `params` with its running-stat entries replaced by this state.
    pub fn write_into(&self, params: &ParameterSet) -> Result<ParameterSet, ParamError> {
        let mut out = params.clone();
        for (i, stats) in self.layers.iter().enumerate() {
            let l = i + 1;
            out = out.with_values(&running_mean_name(l), stats.running_mean.clone())?;
            out = out.with_values(&running_var_name(l), stats.running_var.clone())?;
        }
        Ok(out)
    }
}

pub(crate) fn running_mean_name(layer: usize) -> String {
    format!("bn{layer}.running_mean")
}

pub(crate) fn running_var_name(layer: usize) -> String {
    format!("bn{layer}.running_var")
}

/// Running statistics are carried in the parameter set but never trained.
pub fn is_running_stat(name: &str) -> bool {
    name.ends_with(".running_mean") || name.ends_with(".running_var")
}

/// Entries excluded from weight decay: normalization and bias/shift terms.
pub fn is_decay_exempt(name: &str, tag: LayerTag) -> bool {
    tag == LayerTag::Norm || name.ends_with(".bias") || name.ends_with(".beta")
}
