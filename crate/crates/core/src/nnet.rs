//! Two-headed dense back-end with PReLU, batch normalization, dropout and
//! max-norm, trained on the masked joint loss.
//!
//! Both heads read the same (frozen) embedding. The detection head ends in a
//! single sigmoid unit, the classification head in a K-way softmax. Each
//! hidden layer computes `affine -> batch norm -> PReLU -> dropout`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::Label;
use crate::error::{Error, Result};

pub const PRELU_INIT: f64 = 0.25;
pub const BN_EPSILON: f64 = 1e-6;
pub const BN_MOMENTUM: f64 = 0.99;
pub const PROB_CLAMP: f64 = 1e-7;

pub const MAX_LAYERS: usize = 6;
pub const MIN_NODES: usize = 32;
pub const MAX_NODES: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub input_dim: usize,
    pub n_classes: usize,
    pub det_layers: usize,
    pub det_nodes: usize,
    pub cls_layers: usize,
    pub cls_nodes: usize,
    pub dropout: f64,
    pub max_norm: f64,
}

impl BackendConfig {
    pub fn new(input_dim: usize, n_classes: usize) -> Self {
        Self {
            input_dim,
            n_classes,
            det_layers: 2,
            det_nodes: 128,
            cls_layers: 2,
            cls_nodes: 128,
            dropout: 0.2,
            max_norm: 3.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::config("backend.input_dim", "must be positive"));
        }
        if self.n_classes == 0 {
            return Err(Error::config("backend.n_classes", "must be positive"));
        }
        for (field, layers) in [
            ("backend.det_layers", self.det_layers),
            ("backend.cls_layers", self.cls_layers),
        ] {
            if !(1..=MAX_LAYERS).contains(&layers) {
                return Err(Error::config(field, format!("{layers} not in 1..={MAX_LAYERS}")));
            }
        }
        for (field, nodes) in [
            ("backend.det_nodes", self.det_nodes),
            ("backend.cls_nodes", self.cls_nodes),
        ] {
            if !(MIN_NODES..=MAX_NODES).contains(&nodes) {
                return Err(Error::config(
                    field,
                    format!("{nodes} not in {MIN_NODES}..={MAX_NODES}"),
                ));
            }
        }
        if !(0.0..=0.9).contains(&self.dropout) {
            return Err(Error::config("backend.dropout", "must lie in [0, 0.9]"));
        }
        if !(self.max_norm > 0.0 && self.max_norm.is_finite()) {
            return Err(Error::config("backend.max_norm", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HiddenLayer {
    pub inputs: usize,
    pub units: usize,
    /// `units x inputs`, row-major: row `u` is the incoming vector of unit `u`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub prelu: f64,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputLayer {
    pub inputs: usize,
    pub units: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub hidden: Vec<HiddenLayer>,
    pub output: OutputLayer,
}

/// All back-end parameters. The same shape doubles as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: BackendConfig,
    pub detector: Head,
    pub classifier: Head,
}

fn he_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, (2.0 / cols as f64).sqrt()).expect("valid std");
    (0..rows * cols).map(|_| normal.sample(rng)).collect()
}

fn build_head(
    rng: &mut ChaCha8Rng,
    input_dim: usize,
    layers: usize,
    nodes: usize,
    outputs: usize,
) -> Head {
    let mut hidden = Vec::with_capacity(layers);
    let mut fan_in = input_dim;
    for _ in 0..layers {
        hidden.push(HiddenLayer {
            inputs: fan_in,
            units: nodes,
            weights: he_matrix(rng, nodes, fan_in),
            bias: vec![0.0; nodes],
            gamma: vec![1.0; nodes],
            beta: vec![0.0; nodes],
            prelu: PRELU_INIT,
            running_mean: vec![0.0; nodes],
            running_var: vec![1.0; nodes],
        });
        fan_in = nodes;
    }
    Head {
        hidden,
        output: OutputLayer {
            inputs: fan_in,
            units: outputs,
            weights: he_matrix(rng, outputs, fan_in),
            bias: vec![0.0; outputs],
        },
    }
}

/// He-normal weights, zero biases, PReLU slope 0.25, identity batch norm.
pub fn init_backend(cfg: &BackendConfig, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let detector = build_head(&mut rng, cfg.input_dim, cfg.det_layers, cfg.det_nodes, 1);
    let classifier = build_head(
        &mut rng,
        cfg.input_dim,
        cfg.cls_layers,
        cfg.cls_nodes,
        cfg.n_classes,
    );
    Ok(ModelParams {
        config: *cfg,
        detector,
        classifier,
    })
}

impl ModelParams {
    /// Trainable tensors in a fixed order (running statistics excluded).
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for head in [&self.detector, &self.classifier] {
            for l in &head.hidden {
                out.push(l.weights.as_slice());
                out.push(&l.bias);
                out.push(&l.gamma);
                out.push(&l.beta);
                out.push(std::slice::from_ref(&l.prelu));
            }
            out.push(&head.output.weights);
            out.push(&head.output.bias);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.split_tensors_mut().0
    }

    /// Every stored tensor, running statistics included (checkpoint order).
    pub fn all_tensors(&self) -> Vec<&[f64]> {
        let mut out = self.tensors();
        for head in [&self.detector, &self.classifier] {
            for l in &head.hidden {
                out.push(&l.running_mean);
                out.push(&l.running_var);
            }
        }
        out
    }

    pub fn all_tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let (mut out, stats) = self.split_tensors_mut();
        out.extend(stats);
        out
    }

    fn split_tensors_mut(&mut self) -> (Vec<&mut [f64]>, Vec<&mut [f64]>) {
        let mut trainable: Vec<&mut [f64]> = Vec::new();
        let mut stats: Vec<&mut [f64]> = Vec::new();
        for head in [&mut self.detector, &mut self.classifier] {
            for l in &mut head.hidden {
                let HiddenLayer {
                    weights,
                    bias,
                    gamma,
                    beta,
                    prelu,
                    running_mean,
                    running_var,
                    ..
                } = l;
                trainable.push(weights);
                trainable.push(bias);
                trainable.push(gamma);
                trainable.push(beta);
                trainable.push(std::slice::from_mut(prelu));
                stats.push(running_mean);
                stats.push(running_var);
            }
            trainable.push(&mut head.output.weights);
            trainable.push(&mut head.output.bias);
        }
        (trainable, stats)
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Same shapes, every trainable value zero.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.all_tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    pub fn is_finite(&self) -> bool {
        self.all_tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-frame outputs of both heads.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionBatch {
    pub p_signal: Vec<f64>,
    /// `batch x n_classes`, row-major.
    pub class_probs: Vec<f64>,
    pub n_classes: usize,
}

impl PredictionBatch {
    pub fn len(&self) -> usize {
        self.p_signal.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p_signal.is_empty()
    }

    pub fn probs(&self, i: usize) -> &[f64] {
        &self.class_probs[i * self.n_classes..(i + 1) * self.n_classes]
    }

    /// Most probable class of frame `i`; ties go to the smallest index.
    pub fn argmax(&self, i: usize) -> usize {
        let row = self.probs(i);
        let mut best = 0;
        for (k, &p) in row.iter().enumerate() {
            if p > row[best] {
                best = k;
            }
        }
        best
    }
}

#[derive(Debug, Clone)]
struct LayerCache {
    input: Vec<f64>,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    batch_mean: Vec<f64>,
    batch_var: Vec<f64>,
    pre_act: Vec<f64>,
    mask: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
struct HeadCache {
    layers: Vec<LayerCache>,
    last: Vec<f64>,
}

/// Activations kept by a train-mode forward pass for [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    batch: usize,
    detector: HeadCache,
    classifier: HeadCache,
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = 4 * c;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// `x (batch x inputs) -> x W^T + b (batch x units)`.
fn affine(x: &[f64], batch: usize, weights: &[f64], bias: &[f64], inputs: usize) -> Vec<f64> {
    let units = bias.len();
    let mut z = vec![0.0; batch * units];
    for b in 0..batch {
        let row = &x[b * inputs..(b + 1) * inputs];
        let out = &mut z[b * units..(b + 1) * units];
        for (u, o) in out.iter_mut().enumerate() {
            *o = dot(&weights[u * inputs..(u + 1) * inputs], row) + bias[u];
        }
    }
    z
}

fn head_forward(
    head: &Head,
    x: &[f64],
    batch: usize,
    mode: Mode,
    dropout: f64,
    rng: &mut ChaCha8Rng,
    cache: Option<&mut HeadCache>,
) -> Vec<f64> {
    let mut caches = Vec::new();
    let mut h = x.to_vec();
    for layer in &head.hidden {
        let units = layer.units;
        let z = affine(&h, batch, &layer.weights, &layer.bias, layer.inputs);
        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = vec![0.0; units];
                let mut var = vec![0.0; units];
                for b in 0..batch {
                    for u in 0..units {
                        mean[u] += z[b * units + u];
                    }
                }
                mean.iter_mut().for_each(|m| *m /= batch as f64);
                for b in 0..batch {
                    for u in 0..units {
                        let d = z[b * units + u] - mean[u];
                        var[u] += d * d;
                    }
                }
                var.iter_mut().for_each(|v| *v /= batch as f64);
                (mean, var)
            }
            Mode::Eval => (layer.running_mean.clone(), layer.running_var.clone()),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect();
        let mut xhat = vec![0.0; batch * units];
        let mut pre = vec![0.0; batch * units];
        let mut out = vec![0.0; batch * units];
        for b in 0..batch {
            for u in 0..units {
                let i = b * units + u;
                xhat[i] = (z[i] - mean[u]) * inv_std[u];
                pre[i] = layer.gamma[u] * xhat[i] + layer.beta[u];
                out[i] = if pre[i] > 0.0 { pre[i] } else { layer.prelu * pre[i] };
            }
        }
        let mask = if mode == Mode::Train && dropout > 0.0 {
            let keep = 1.0 - dropout;
            let m: Vec<f64> = (0..batch * units)
                .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                .collect();
            out.iter_mut().zip(&m).for_each(|(o, s)| *o *= s);
            Some(m)
        } else {
            None
        };
        if cache.is_some() {
            caches.push(LayerCache {
                input: std::mem::take(&mut h),
                xhat,
                inv_std,
                batch_mean: mean,
                batch_var: var,
                pre_act: pre,
                mask,
            });
        }
        h = out;
    }
    let logits = affine(&h, batch, &head.output.weights, &head.output.bias, head.output.inputs);
    if let Some(c) = cache {
        c.layers = caches;
        c.last = h;
    }
    logits
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softmax_rows(logits: &mut [f64], k: usize) {
    for row in logits.chunks_mut(k) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
}

fn check_input(params: &ModelParams, x: &[f64], batch: usize) -> Result<()> {
    if batch == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    let d = params.config.input_dim;
    if x.len() != batch * d {
        return Err(Error::Shape(format!(
            "{} values for a batch of {batch} with dimension {d}",
            x.len()
        )));
    }
    Ok(())
}

fn run_forward(
    params: &ModelParams,
    x: &[f64],
    batch: usize,
    mode: Mode,
    dropout_seed: u64,
    mut cache: Option<&mut ForwardCache>,
) -> PredictionBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
    let dropout = params.config.dropout;
    let det_logits = head_forward(
        &params.detector,
        x,
        batch,
        mode,
        dropout,
        &mut rng,
        cache.as_deref_mut().map(|c| &mut c.detector),
    );
    let mut cls = head_forward(
        &params.classifier,
        x,
        batch,
        mode,
        dropout,
        &mut rng,
        cache.as_deref_mut().map(|c| &mut c.classifier),
    );
    let k = params.config.n_classes;
    softmax_rows(&mut cls, k);
    PredictionBatch {
        p_signal: det_logits.into_iter().map(sigmoid).collect(),
        class_probs: cls,
        n_classes: k,
    }
}

/// Runs both heads on `batch` embeddings laid out row-major in `x`.
///
/// Train mode normalizes with batch statistics and applies dropout drawn
/// from `dropout_seed`; eval mode uses running statistics and no dropout.
pub fn forward(
    params: &ModelParams,
    x: &[f64],
    batch: usize,
    mode: Mode,
    dropout_seed: u64,
) -> Result<(PredictionBatch, Option<ForwardCache>)> {
    check_input(params, x, batch)?;
    match mode {
        Mode::Eval => Ok((run_forward(params, x, batch, mode, dropout_seed, None), None)),
        Mode::Train => {
            let empty = || HeadCache {
                layers: Vec::new(),
                last: Vec::new(),
            };
            let mut cache = ForwardCache {
                batch,
                detector: empty(),
                classifier: empty(),
            };
            let preds = run_forward(params, x, batch, mode, dropout_seed, Some(&mut cache));
            Ok((preds, Some(cache)))
        }
    }
}

/// Eval-mode forward pass.
pub fn predict(params: &ModelParams, x: &[f64], batch: usize) -> Result<PredictionBatch> {
    forward(params, x, batch, Mode::Eval, 0).map(|(p, _)| p)
}

/// Folds the batch statistics of a train-mode pass into the running averages.
pub fn update_running_stats(params: &mut ModelParams, cache: &ForwardCache, momentum: f64) {
    for (head, hc) in [
        (&mut params.detector, &cache.detector),
        (&mut params.classifier, &cache.classifier),
    ] {
        for (layer, lc) in head.hidden.iter_mut().zip(&hc.layers) {
            for u in 0..layer.units {
                layer.running_mean[u] =
                    momentum * layer.running_mean[u] + (1.0 - momentum) * lc.batch_mean[u];
                layer.running_var[u] =
                    momentum * layer.running_var[u] + (1.0 - momentum) * lc.batch_var[u];
            }
        }
    }
}

/// Batch-normalization statistics seen by a train-mode pass, per head and layer.
pub fn batch_statistics(cache: &ForwardCache) -> Vec<(Vec<f64>, Vec<f64>)> {
    cache
        .detector
        .layers
        .iter()
        .chain(&cache.classifier.layers)
        .map(|l| (l.batch_mean.clone(), l.batch_var.clone()))
        .collect()
}

/// Normalized pre-activations (before scale and shift) of every hidden layer.
pub fn normalized_preactivations(cache: &ForwardCache) -> Vec<&[f64]> {
    cache
        .detector
        .layers
        .iter()
        .chain(&cache.classifier.layers)
        .map(|l| l.xhat.as_slice())
        .collect()
}

/// Components of the masked joint loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    /// Batch mean of `binary cross-entropy + [signal] * categorical cross-entropy`.
    pub total: f64,
    /// Mean binary cross-entropy over the batch.
    pub binary: f64,
    /// Mean categorical cross-entropy over signal frames only (0 when there are none).
    pub multi: f64,
    /// Fraction of signal frames in the batch.
    pub signal_fraction: f64,
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Joint loss: binary cross-entropy plus the classification cross-entropy
/// gated by the signal indicator, averaged over the batch.
pub fn joint_loss(preds: &PredictionBatch, labels: &[Label]) -> Result<LossParts> {
    if preds.len() != labels.len() {
        return Err(Error::LengthMismatch {
            left: preds.len(),
            right: labels.len(),
        });
    }
    let n = labels.len().max(1) as f64;
    let mut binary = 0.0;
    let mut multi_sum = 0.0;
    let mut n_signal = 0usize;
    for (i, label) in labels.iter().enumerate() {
        let p = clamp_prob(preds.p_signal[i]);
        match label {
            Label::Noise => binary -= (1.0 - p).ln(),
            Label::Vocalization(k) => {
                binary -= p.ln();
                if *k >= preds.n_classes {
                    return Err(Error::LabelOutOfRange {
                        label: *k,
                        classes: preds.n_classes,
                    });
                }
                multi_sum -= clamp_prob(preds.probs(i)[*k]).ln();
                n_signal += 1;
            }
        }
    }
    let binary = binary / n;
    Ok(LossParts {
        total: binary + multi_sum / n,
        binary,
        multi: if n_signal > 0 {
            multi_sum / n_signal as f64
        } else {
            0.0
        },
        signal_fraction: n_signal as f64 / n,
    })
}

fn output_backward(
    layer: &OutputLayer,
    grad: &mut OutputLayer,
    input: &[f64],
    dlogits: &[f64],
    batch: usize,
) -> Vec<f64> {
    let (ni, nu) = (layer.inputs, layer.units);
    let mut dinput = vec![0.0; batch * ni];
    for b in 0..batch {
        let x = &input[b * ni..(b + 1) * ni];
        let dx = &mut dinput[b * ni..(b + 1) * ni];
        for u in 0..nu {
            let g = dlogits[b * nu + u];
            if g == 0.0 {
                continue;
            }
            grad.bias[u] += g;
            let w = &layer.weights[u * ni..(u + 1) * ni];
            let gw = &mut grad.weights[u * ni..(u + 1) * ni];
            for i in 0..ni {
                gw[i] += g * x[i];
                dx[i] += g * w[i];
            }
        }
    }
    dinput
}

fn hidden_backward(
    layer: &HiddenLayer,
    grad: &mut HiddenLayer,
    cache: &LayerCache,
    mut dout: Vec<f64>,
    batch: usize,
) -> Vec<f64> {
    let (ni, nu) = (layer.inputs, layer.units);
    if let Some(mask) = &cache.mask {
        dout.iter_mut().zip(mask).for_each(|(d, m)| *d *= m);
    }
    // through PReLU
    let mut dprelu = 0.0;
    for (d, &y) in dout.iter_mut().zip(&cache.pre_act) {
        if y <= 0.0 {
            dprelu += *d * y;
            *d *= layer.prelu;
        }
    }
    grad.prelu += dprelu;
    // through batch norm
    let nb = batch as f64;
    let mut sum_dxhat = vec![0.0; nu];
    let mut sum_dxhat_xhat = vec![0.0; nu];
    for b in 0..batch {
        for u in 0..nu {
            let i = b * nu + u;
            grad.gamma[u] += dout[i] * cache.xhat[i];
            grad.beta[u] += dout[i];
            let dxhat = dout[i] * layer.gamma[u];
            sum_dxhat[u] += dxhat;
            sum_dxhat_xhat[u] += dxhat * cache.xhat[i];
        }
    }
    let mut dz = vec![0.0; batch * nu];
    for b in 0..batch {
        for u in 0..nu {
            let i = b * nu + u;
            let dxhat = dout[i] * layer.gamma[u];
            dz[i] = cache.inv_std[u] / nb
                * (nb * dxhat - sum_dxhat[u] - cache.xhat[i] * sum_dxhat_xhat[u]);
        }
    }
    // through the affine map
    let mut dinput = vec![0.0; batch * ni];
    for b in 0..batch {
        let x = &cache.input[b * ni..(b + 1) * ni];
        let dx = &mut dinput[b * ni..(b + 1) * ni];
        for u in 0..nu {
            let g = dz[b * nu + u];
            grad.bias[u] += g;
            let w = &layer.weights[u * ni..(u + 1) * ni];
            let gw = &mut grad.weights[u * ni..(u + 1) * ni];
            for i in 0..ni {
                gw[i] += g * x[i];
                dx[i] += g * w[i];
            }
        }
    }
    dinput
}

fn head_backward(head: &Head, grad: &mut Head, cache: &HeadCache, dlogits: &[f64], batch: usize) {
    let mut d = output_backward(&head.output, &mut grad.output, &cache.last, dlogits, batch);
    for ((layer, g), lc) in head
        .hidden
        .iter()
        .zip(grad.hidden.iter_mut())
        .zip(&cache.layers)
        .rev()
    {
        d = hidden_backward(layer, g, lc, d, batch);
    }
}

/// Exact gradients of [`joint_loss`] (its `total`) for a train-mode pass.
pub fn backward(
    params: &ModelParams,
    cache: &ForwardCache,
    preds: &PredictionBatch,
    labels: &[Label],
) -> Result<ModelParams> {
    let batch = cache.batch;
    if labels.len() != batch || preds.len() != batch {
        return Err(Error::LengthMismatch {
            left: batch,
            right: labels.len(),
        });
    }
    let n = batch as f64;
    let k = params.config.n_classes;
    let mut d_det = vec![0.0; batch];
    let mut d_cls = vec![0.0; batch * k];
    for (i, label) in labels.iter().enumerate() {
        let p = preds.p_signal[i];
        let target = if label.is_signal() { 1.0 } else { 0.0 };
        // the clamp has zero slope outside its range
        if (PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p) {
            d_det[i] = (p - target) / n;
        }
        if let Label::Vocalization(c) = *label {
            let q = preds.probs(i);
            if (PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&q[c]) {
                for j in 0..k {
                    let onehot = if j == c { 1.0 } else { 0.0 };
                    d_cls[i * k + j] = (q[j] - onehot) / n;
                }
            }
        }
    }
    let mut grads = params.zeros_like();
    head_backward(&params.detector, &mut grads.detector, &cache.detector, &d_det, batch);
    head_backward(
        &params.classifier,
        &mut grads.classifier,
        &cache.classifier,
        &d_cls,
        batch,
    );
    Ok(grads)
}

/// Rescales every hidden unit's incoming weight vector to L2 norm at most `c`.
pub fn apply_max_norm(params: &mut ModelParams, c: f64) {
    for head in [&mut params.detector, &mut params.classifier] {
        for layer in &mut head.hidden {
            for row in layer.weights.chunks_mut(layer.inputs) {
                let norm = row.iter().map(|w| w * w).sum::<f64>().sqrt();
                if norm > c {
                    let s = c / norm;
                    row.iter_mut().for_each(|w| *w *= s);
                }
            }
        }
    }
}

/// Largest incoming-vector norm over all hidden units.
pub fn max_hidden_norm(params: &ModelParams) -> f64 {
    let mut m = 0.0f64;
    for head in [&params.detector, &params.classifier] {
        for layer in &head.hidden {
            for row in layer.weights.chunks(layer.inputs) {
                m = m.max(row.iter().map(|w| w * w).sum::<f64>().sqrt());
            }
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> BackendConfig {
        BackendConfig {
            input_dim: 5,
            n_classes: 3,
            det_layers: 1,
            det_nodes: 32,
            cls_layers: 1,
            cls_nodes: 32,
            dropout: 0.0,
            max_norm: 3.0,
        }
    }

    #[test]
    fn init_statistics() {
        let cfg = BackendConfig {
            input_dim: 512,
            det_nodes: 64,
            ..BackendConfig::new(512, 2)
        };
        let p = init_backend(&cfg, 7).unwrap();
        let w = &p.detector.hidden[0].weights;
        assert!(w.len() >= 10_000);
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64;
        let target = 2.0 / 512.0;
        assert!(var > 0.9 * target && var < 1.1 * target, "{var} vs {target}");
        for head in [&p.detector, &p.classifier] {
            for l in &head.hidden {
                assert!(l.bias.iter().all(|&b| b == 0.0));
                assert_eq!(l.prelu, 0.25);
                assert!(l.gamma.iter().all(|&g| g == 1.0));
            }
            assert!(head.output.bias.iter().all(|&b| b == 0.0));
        }
        assert_eq!(init_backend(&cfg, 7).unwrap(), p);
    }

    #[test]
    fn config_ranges_enforced() {
        let mut cfg = small_cfg();
        cfg.det_layers = 7;
        assert!(init_backend(&cfg, 0).is_err());
        cfg.det_layers = 1;
        cfg.cls_nodes = 16;
        assert!(init_backend(&cfg, 0).is_err());
        cfg.cls_nodes = 2048;
        assert!(init_backend(&cfg, 0).is_err());
    }

    #[test]
    fn zero_input_gives_half() {
        let p = init_backend(&small_cfg(), 1).unwrap();
        let preds = predict(&p, &[0.0; 10], 2).unwrap();
        for &ps in &preds.p_signal {
            assert!((ps - 0.5).abs() < 1e-12);
        }
        let (train, _) = forward(&p, &[0.0; 10], 2, Mode::Train, 0).unwrap();
        assert!((train.p_signal[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch() {
        let p = init_backend(&small_cfg(), 1).unwrap();
        assert!(matches!(predict(&p, &[0.0; 9], 2), Err(Error::Shape(_))));
    }

    #[test]
    fn loss_examples() {
        let preds = PredictionBatch {
            p_signal: vec![0.5],
            class_probs: vec![0.5, 0.5],
            n_classes: 2,
        };
        let l = joint_loss(&preds, &[Label::Vocalization(0)]).unwrap();
        assert!((l.total - 1.3863).abs() < 1e-4);

        let noise = joint_loss(
            &PredictionBatch {
                p_signal: vec![0.3],
                class_probs: vec![0.01, 0.99],
                n_classes: 2,
            },
            &[Label::Noise],
        )
        .unwrap();
        assert_eq!(noise.multi, 0.0);
        assert!((noise.total - noise.binary).abs() == 0.0);

        let perfect = joint_loss(
            &PredictionBatch {
                p_signal: vec![1.0, 0.0],
                class_probs: vec![1.0, 0.0, 0.0, 1.0],
                n_classes: 2,
            },
            &[Label::Vocalization(0), Label::Noise],
        )
        .unwrap();
        assert!(perfect.total <= 2.0 * -(1.0f64 - 1e-7).ln() + 1e-15);
    }

    #[test]
    fn max_norm_behaviour() {
        let mut p = init_backend(&small_cfg(), 3).unwrap();
        let before = p.clone();
        apply_max_norm(&mut p, 1e6);
        assert_eq!(p, before);

        let row: Vec<f64> = p.detector.hidden[0].weights[..5].to_vec();
        let norm = row.iter().map(|w| w * w).sum::<f64>().sqrt();
        let c = norm / 2.0;
        for w in &mut p.detector.hidden[0].weights[5..10] {
            *w = 0.0;
        }
        apply_max_norm(&mut p, c);
        let after: f64 = p.detector.hidden[0].weights[..5]
            .iter()
            .map(|w| w * w)
            .sum::<f64>()
            .sqrt();
        assert!((after - c).abs() < 1e-9);
        assert!(p.detector.hidden[0].weights[5..10].iter().all(|&w| w == 0.0));
        assert!(max_hidden_norm(&p) <= c + 1e-9);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let p = init_backend(&small_cfg(), 5).unwrap();
        let x: Vec<f64> = (0..20).map(|i| (i as f64 * 0.77).sin() * 30.0).collect();
        let preds = predict(&p, &x, 4).unwrap();
        for i in 0..4 {
            let s: f64 = preds.probs(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!((0.0..=1.0).contains(&preds.p_signal[i]));
        }
    }
}
