use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    running_mean_name, running_var_name, DctBasis, Mode, ModelError, ModelSpec, NormState,
    SkeletonSequence,
};
use crate::params::{Entry, LayerTag, ParameterSet};

/// A model architecture with its DCT basis precomputed.
#[derive(Clone, Debug)]
pub struct Model {
    spec: ModelSpec,
    basis: DctBasis,
}

/// Dense feature rows for a batch, plus their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Features {
    pub dim: usize,
    pub data: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Features {
    pub fn rows(&self) -> usize {
        self.labels.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Gathers the given rows into a new batch.
    pub fn select(&self, idx: &[usize]) -> Features {
        let mut data = Vec::with_capacity(idx.len() * self.dim);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            data.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Features {
            dim: self.dim,
            data,
            labels,
        }
    }
}

struct HiddenCache {
    /// Input to the linear layer, `B x in`.
    input: Vec<f64>,
    /// Normalized pre-activations, `B x H`.
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    /// Post-norm activations before ReLU, `B x H`.
    pre_relu: Vec<f64>,
}

/// Intermediates retained by [`Model::forward`] for backprop.
pub struct ForwardCache {
    batch: usize,
    mode: Mode,
    hidden: Vec<HiddenCache>,
    /// Input to the head, `B x H_last`.
    head_input: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub mean_loss: f64,
}

/// Orthonormal DCT-II features of one sequence, in (joint, coordinate,
/// frequency) order.
pub fn dct_features(s: &SkeletonSequence, coeffs: usize) -> Result<Vec<f64>, ModelError> {
    if coeffs == 0 || coeffs > s.frames {
        return Err(ModelError::TooManyCoeffs {
            coeffs,
            frames: s.frames,
        });
    }
    let basis = DctBasis::new(s.frames, coeffs);
    Ok(features_with(&basis, s))
}

fn features_with(basis: &DctBasis, s: &SkeletonSequence) -> Vec<f64> {
    let k = basis.coeffs();
    let mut out = vec![0.0; s.joints * 3 * k];
    for v in 0..s.joints {
        for c in 0..3 {
            let slot = (v * 3 + c) * k;
            basis.forward_into(|t| s.at(t, v, c), &mut out[slot..slot + k]);
        }
    }
    out
}

/// Seeded initialization: He-uniform weights, zero biases, unit norm scale,
/// zero shift, running stats (0, 1).
pub fn init_model(spec: &ModelSpec, seed: u64) -> (ParameterSet, NormState) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    let he = |rng: &mut ChaCha8Rng, out_dim: usize, in_dim: usize| -> Vec<f64> {
        let bound = (6.0 / in_dim as f64).sqrt();
        (0..out_dim * in_dim)
            .map(|_| rng.random_range(-bound..bound))
            .collect()
    };
    let mut fan_in = spec.feature_dim();
    for (i, &h) in spec.hidden.iter().enumerate() {
        let l = i + 1;
        let base = |name: &str, shape: Vec<usize>, values: Vec<f64>| {
            Entry::new(format!("fc{l}.{name}"), LayerTag::Base, shape, values).unwrap()
        };
        entries.push(base("weight", vec![h, fan_in], he(&mut rng, h, fan_in)));
        entries.push(base("bias", vec![h], vec![0.0; h]));
        let norm = |name: String, values: Vec<f64>| {
            Entry::new(name, LayerTag::Norm, vec![h], values).unwrap()
        };
        entries.push(norm(format!("bn{l}.gamma"), vec![1.0; h]));
        entries.push(norm(format!("bn{l}.beta"), vec![0.0; h]));
        entries.push(norm(running_mean_name(l), vec![0.0; h]));
        entries.push(norm(running_var_name(l), vec![1.0; h]));
        fan_in = h;
    }
    let c = spec.classes;
    entries.push(
        Entry::new("head.weight", LayerTag::Head, vec![c, fan_in], he(&mut rng, c, fan_in))
            .unwrap(),
    );
    entries.push(Entry::new("head.bias", LayerTag::Head, vec![c], vec![0.0; c]).unwrap());
    let params = ParameterSet::from_entries(entries).expect("generated names are unique");
    (params, NormState::fresh(spec))
}

/// `out[b][o] = bias[o] + sum_i w[o][i] * x[b][i]`.
fn linear(x: &[f64], batch: usize, in_dim: usize, w: &[f64], bias: &[f64]) -> Vec<f64> {
    let out_dim = bias.len();
    let mut out = Vec::with_capacity(batch * out_dim);
    for b in 0..batch {
        let row = &x[b * in_dim..(b + 1) * in_dim];
        for o in 0..out_dim {
            let wrow = &w[o * in_dim..(o + 1) * in_dim];
            let mut acc = 0.0;
            for (a, c) in wrow.iter().zip(row) {
                acc += a * c;
            }
            out.push(bias[o] + acc);
        }
    }
    out
}

/// Gradients of a linear layer given `dout` (`B x out`).
fn linear_backward(
    x: &[f64],
    dout: &[f64],
    batch: usize,
    in_dim: usize,
    w: &[f64],
    need_dx: bool,
) -> (Vec<f64>, Vec<f64>, Option<Vec<f64>>) {
    let out_dim = dout.len() / batch;
    let mut dw = vec![0.0; out_dim * in_dim];
    let mut db = vec![0.0; out_dim];
    for b in 0..batch {
        let row = &x[b * in_dim..(b + 1) * in_dim];
        for o in 0..out_dim {
            let g = dout[b * out_dim + o];
            db[o] += g;
            if g != 0.0 {
                let dwrow = &mut dw[o * in_dim..(o + 1) * in_dim];
                for (d, xi) in dwrow.iter_mut().zip(row) {
                    *d += g * xi;
                }
            }
        }
    }
    let dx = need_dx.then(|| {
        let mut dx = vec![0.0; batch * in_dim];
        for b in 0..batch {
            let drow = &mut dx[b * in_dim..(b + 1) * in_dim];
            for o in 0..out_dim {
                let g = dout[b * out_dim + o];
                if g != 0.0 {
                    for (d, wi) in drow.iter_mut().zip(&w[o * in_dim..(o + 1) * in_dim]) {
                        *d += g * wi;
                    }
                }
            }
        }
        dx
    });
    (dw, db, dx)
}

impl Model {
    pub fn new(spec: ModelSpec) -> Result<Self, ModelError> {
        if spec.dct_coeffs == 0 || spec.dct_coeffs > spec.frames {
            return Err(ModelError::TooManyCoeffs {
                coeffs: spec.dct_coeffs,
                frames: spec.frames,
            });
        }
        let basis = DctBasis::new(spec.frames, spec.dct_coeffs);
        Ok(Model { spec, basis })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn init(&self, seed: u64) -> (ParameterSet, NormState) {
        init_model(&self.spec, seed)
    }

    /// Featurizes a batch, resampling sequences to the model's frame count.
    pub fn features(&self, batch: &[SkeletonSequence]) -> Result<Features, ModelError> {
        let dim = self.spec.feature_dim();
        let mut data = Vec::with_capacity(batch.len() * dim);
        let mut labels = Vec::with_capacity(batch.len());
        for s in batch {
            if s.joints != self.spec.joints {
                return Err(ModelError::SampleShape {
                    id: s.id,
                    frames: s.frames,
                    joints: s.joints,
                    want_frames: self.spec.frames,
                    want_joints: self.spec.joints,
                });
            }
            if s.label >= self.spec.classes {
                return Err(ModelError::Label {
                    id: s.id,
                    label: s.label,
                    classes: self.spec.classes,
                });
            }
            if s.frames == self.spec.frames {
                data.extend(features_with(&self.basis, s));
            } else {
                data.extend(features_with(&self.basis, &s.resampled(self.spec.frames)));
            }
            labels.push(s.label);
        }
        Ok(Features { dim, data, labels })
    }

    pub fn forward(
        &self,
        params: &ParameterSet,
        norm: &mut NormState,
        batch: &[SkeletonSequence],
        mode: Mode,
    ) -> Result<(Vec<f64>, ForwardCache), ModelError> {
        let feats = self.features(batch)?;
        self.forward_features(params, norm, &feats, mode)
    }

    /// Logits (`B x C`, row-major). Train mode normalizes with batch
    /// statistics and folds them into `norm`; Eval mode reads `norm` only.
    pub fn forward_features(
        &self,
        params: &ParameterSet,
        norm: &mut NormState,
        feats: &Features,
        mode: Mode,
    ) -> Result<(Vec<f64>, ForwardCache), ModelError> {
        let batch = feats.rows();
        if batch == 0 {
            return Err(ModelError::EmptyBatch);
        }
        let eps = self.spec.norm_epsilon;
        let momentum = self.spec.norm_momentum;
        let mut x = feats.data.clone();
        let mut in_dim = feats.dim;
        let mut hidden = Vec::with_capacity(self.spec.hidden.len());
        for (i, &h) in self.spec.hidden.iter().enumerate() {
            let l = i + 1;
            let w = params.values(&format!("fc{l}.weight"))?;
            let b = params.values(&format!("fc{l}.bias"))?;
            let gamma = params.values(&format!("bn{l}.gamma"))?;
            let beta = params.values(&format!("bn{l}.beta"))?;
            let z = linear(&x, batch, in_dim, w, b);

            let stats = &mut norm.layers[i];
            let (mean, var) = match mode {
                Mode::Train => {
                    let mut mean = vec![0.0; h];
                    for row in z.chunks(h) {
                        for (m, v) in mean.iter_mut().zip(row) {
                            *m += v;
                        }
                    }
                    mean.iter_mut().for_each(|m| *m /= batch as f64);
                    let mut var = vec![0.0; h];
                    for row in z.chunks(h) {
                        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                            *s += (v - m) * (v - m);
                        }
                    }
                    var.iter_mut().for_each(|s| *s /= batch as f64);
                    for j in 0..h {
                        stats.running_mean[j] =
                            (1.0 - momentum) * stats.running_mean[j] + momentum * mean[j];
                        stats.running_var[j] =
                            (1.0 - momentum) * stats.running_var[j] + momentum * var[j];
                    }
                    (mean, var)
                }
                Mode::Eval => (stats.running_mean.clone(), stats.running_var.clone()),
            };
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            let mut xhat = Vec::with_capacity(batch * h);
            let mut pre_relu = Vec::with_capacity(batch * h);
            for row in z.chunks(h) {
                for j in 0..h {
                    let xh = (row[j] - mean[j]) * inv_std[j];
                    xhat.push(xh);
                    pre_relu.push(gamma[j] * xh + beta[j]);
                }
            }
            let next: Vec<f64> = pre_relu.iter().map(|&v| v.max(0.0)).collect();
            hidden.push(HiddenCache {
                input: std::mem::replace(&mut x, next),
                xhat,
                inv_std,
                pre_relu,
            });
            in_dim = h;
        }
        let hw = params.values("head.weight")?;
        let hb = params.values("head.bias")?;
        let logits = linear(&x, batch, in_dim, hw, hb);
        Ok((
            logits,
            ForwardCache {
                batch,
                mode,
                hidden,
                head_input: x,
            },
        ))
    }

    pub fn loss_and_grad(
        &self,
        params: &ParameterSet,
        norm: &mut NormState,
        batch: &[SkeletonSequence],
    ) -> Result<(f64, ParameterSet), ModelError> {
        let feats = self.features(batch)?;
        self.loss_and_grad_features(params, norm, &feats)
    }

    /// Mean cross-entropy over a Train-mode forward pass and its exact
    /// gradient. Running-stat entries get zero gradient.
    pub fn loss_and_grad_features(
        &self,
        params: &ParameterSet,
        norm: &mut NormState,
        feats: &Features,
    ) -> Result<(f64, ParameterSet), ModelError> {
        let (logits, cache) = self.forward_features(params, norm, feats, Mode::Train)?;
        let c = self.spec.classes;
        let batch = cache.batch;
        let mut loss = 0.0;
        let mut dlogits = Vec::with_capacity(logits.len());
        for (row, &label) in logits.chunks(c).zip(&feats.labels) {
            let (lse, probs) = softmax(row);
            loss += lse - row[label];
            for (k, p) in probs.into_iter().enumerate() {
                let target = if k == label { 1.0 } else { 0.0 };
                dlogits.push((p - target) / batch as f64);
            }
        }
        loss /= batch as f64;
        let grads = self.backward(params, &cache, &dlogits)?;
        Ok((loss, grads))
    }

    /// Backprop of `dlogits` through a cached forward pass.
    pub fn backward(
        &self,
        params: &ParameterSet,
        cache: &ForwardCache,
        dlogits: &[f64],
    ) -> Result<ParameterSet, ModelError> {
        let batch = cache.batch;
        let mut grads: Vec<(String, Vec<f64>)> = Vec::new();
        let last = *self.spec.hidden.last().expect("validated nonempty");
        let hw = params.values("head.weight")?;
        let (dw, db, dx) =
            linear_backward(&cache.head_input, dlogits, batch, last, hw, true);
        grads.push(("head.weight".into(), dw));
        grads.push(("head.bias".into(), db));
        let mut da = dx.expect("requested");

        for (i, &h) in self.spec.hidden.iter().enumerate().rev() {
            let l = i + 1;
            let hc = &cache.hidden[i];
            let gamma = params.values(&format!("bn{l}.gamma"))?;
            let mut dgamma = vec![0.0; h];
            let mut dbeta = vec![0.0; h];
            let mut dxhat = vec![0.0; batch * h];
            for b in 0..batch {
                for j in 0..h {
                    let k = b * h + j;
                    let dy = if hc.pre_relu[k] > 0.0 { da[k] } else { 0.0 };
                    dgamma[j] += dy * hc.xhat[k];
                    dbeta[j] += dy;
                    dxhat[k] = dy * gamma[j];
                }
            }
            let dz = match cache.mode {
                Mode::Train => {
                    let mut sum_dxhat = vec![0.0; h];
                    let mut sum_dxhat_xhat = vec![0.0; h];
                    for b in 0..batch {
                        for j in 0..h {
                            let k = b * h + j;
                            sum_dxhat[j] += dxhat[k];
                            sum_dxhat_xhat[j] += dxhat[k] * hc.xhat[k];
                        }
                    }
                    let n = batch as f64;
                    let mut dz = vec![0.0; batch * h];
                    for b in 0..batch {
                        for j in 0..h {
                            let k = b * h + j;
                            dz[k] = hc.inv_std[j] / n
                                * (n * dxhat[k] - sum_dxhat[j] - hc.xhat[k] * sum_dxhat_xhat[j]);
                        }
                    }
                    dz
                }
                Mode::Eval => dxhat
                    .chunks(h)
                    .flat_map(|row| row.iter().zip(&hc.inv_std).map(|(d, s)| d * s))
                    .collect(),
            };
            let in_dim = hc.input.len() / batch;
            let w = params.values(&format!("fc{l}.weight"))?;
            let (dw, db, dx) = linear_backward(&hc.input, &dz, batch, in_dim, w, i > 0);
            grads.push((format!("fc{l}.weight"), dw));
            grads.push((format!("fc{l}.bias"), db));
            grads.push((format!("bn{l}.gamma"), dgamma));
            grads.push((format!("bn{l}.beta"), dbeta));
            if let Some(dx) = dx {
                da = dx;
            }
        }

        let mut out = params.zeros_like();
        for (name, g) in grads {
            out = out.with_values(&name, g)?;
        }
        Ok(out)
    }

    /// Eval-mode accuracy and mean loss over a featurized dataset.
    pub fn evaluate_features(
        &self,
        params: &ParameterSet,
        norm: &NormState,
        feats: &Features,
    ) -> Result<EvalReport, ModelError> {
        if feats.rows() == 0 {
            return Err(ModelError::EmptyDataset);
        }
        let mut scratch = norm.clone();
        let (logits, _) = self.forward_features(params, &mut scratch, feats, Mode::Eval)?;
        let c = self.spec.classes;
        let mut correct = 0usize;
        let mut loss = 0.0;
        for (row, &label) in logits.chunks(c).zip(&feats.labels) {
            if argmax(row) == label {
                correct += 1;
            }
            let (lse, _) = softmax(row);
            loss += lse - row[label];
        }
        let n = feats.rows() as f64;
        Ok(EvalReport {
            accuracy: correct as f64 / n,
            mean_loss: loss / n,
        })
    }
}

/// Eval-mode accuracy and loss over raw sequences.
pub fn evaluate(
    model: &Model,
    params: &ParameterSet,
    norm: &NormState,
    dataset: &[SkeletonSequence],
) -> Result<EvalReport, ModelError> {
    if dataset.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let feats = model.features(dataset)?;
    model.evaluate_features(params, norm, &feats)
}

/// Log-sum-exp and the softmax probabilities of one logit row.
fn softmax(row: &[f64]) -> (f64, Vec<f64>) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    (max + sum.ln(), exps.into_iter().map(|e| e / sum).collect())
}

/// Index of the largest value; lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}
