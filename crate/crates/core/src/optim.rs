//! NAdam, the plateau/early-stopping schedule and the training loop.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{epoch_iterations, BalancedSampler, FramePool, Label, SamplingConfig};
use crate::error::{Error, Result};
use crate::nnet::{
    apply_max_norm, backward, forward, init_backend, joint_loss, predict, update_running_stats,
    BackendConfig, LossParts, Mode, ModelParams, PredictionBatch, BN_MOMENTUM,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NAdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for NAdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl NAdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("optimizer.lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return Err(Error::config("optimizer.beta1", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("optimizer.beta2", "must lie in [0, 1)"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config("optimizer.epsilon", "must be positive"));
        }
        Ok(())
    }
}

/// Moment estimates of NAdam (Adam with a Nesterov look-ahead on the first moment).
#[derive(Debug, Clone, PartialEq)]
pub struct NAdamState {
    pub config: NAdamConfig,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl NAdamState {
    pub fn new(n_params: usize, config: NAdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    /// Advances one step and returns the parameter increments.
    pub fn step(&mut self, grads: &[f64]) -> Result<Vec<f64>> {
        if grads.len() != self.m.len() {
            return Err(Error::LengthMismatch {
                left: self.m.len(),
                right: grads.len(),
            });
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient {
                step: self.step + 1,
            });
        }
        self.step += 1;
        let NAdamConfig {
            lr,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let mut deltas = Vec::with_capacity(grads.len());
        for ((m, v), &g) in self.m.iter_mut().zip(self.v.iter_mut()).zip(grads) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            let look_ahead = beta1 * m_hat + (1.0 - beta1) * g / c1;
            deltas.push(-lr * look_ahead / (v_hat.sqrt() + epsilon));
        }
        Ok(deltas)
    }

    /// One step applied in place to `params`.
    pub fn apply(&mut self, params: &mut ModelParams, grads: &ModelParams) -> Result<()> {
        let flat = grads.flatten();
        let deltas = self.step(&flat)?;
        let mut it = deltas.into_iter();
        for t in params.tensors_mut() {
            for (p, d) in t.iter_mut().zip(it.by_ref()) {
                *p += d;
            }
        }
        Ok(())
    }
}

/// Functional form of [`NAdamState::step`].
pub fn nadam_step(state: &NAdamState, grads: &[f64]) -> Result<(NAdamState, Vec<f64>)> {
    let mut next = state.clone();
    let deltas = next.step(grads)?;
    Ok((next, deltas))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainLoopConfig {
    pub max_epochs: usize,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub early_stop_patience: usize,
    /// Smallest decrease of the validation loss that counts as an improvement.
    pub min_delta: f64,
    /// Overrides the per-epoch batch count derived from the pool.
    pub iterations_per_epoch: Option<usize>,
}

impl Default for TrainLoopConfig {
    fn default() -> Self {
        Self {
            max_epochs: 200,
            plateau_patience: 5,
            plateau_factor: 0.2,
            early_stop_patience: 20,
            min_delta: 1e-5,
            iterations_per_epoch: None,
        }
    }
}

impl TrainLoopConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 {
            return Err(Error::config("train.max_epochs", "must be at least 1"));
        }
        if self.plateau_patience == 0 {
            return Err(Error::config("train.plateau_patience", "must be at least 1"));
        }
        if self.early_stop_patience == 0 {
            return Err(Error::config("train.early_stop_patience", "must be at least 1"));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(Error::config("train.plateau_factor", "must lie in (0, 1)"));
        }
        if self.iterations_per_epoch == Some(0) {
            return Err(Error::config("train.iterations_per_epoch", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScheduleOutcome {
    pub improved: bool,
    pub stop: bool,
}

/// Learning-rate reduction on plateau plus early stopping, both driven by the
/// validation loss. Both counters reset on improvement.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    cfg: TrainLoopConfig,
    lr: f64,
    best: f64,
    plateau_wait: usize,
    stop_wait: usize,
}

impl Schedule {
    pub fn new(cfg: &TrainLoopConfig, lr: f64) -> Self {
        Self {
            cfg: *cfg,
            lr,
            best: f64::INFINITY,
            plateau_wait: 0,
            stop_wait: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn observe(&mut self, val_loss: f64) -> ScheduleOutcome {
        if val_loss < self.best - self.cfg.min_delta {
            self.best = val_loss;
            self.plateau_wait = 0;
            self.stop_wait = 0;
            return ScheduleOutcome {
                improved: true,
                stop: false,
            };
        }
        self.plateau_wait += 1;
        self.stop_wait += 1;
        if self.plateau_wait >= self.cfg.plateau_patience {
            self.lr *= self.cfg.plateau_factor;
            self.plateau_wait = 0;
        }
        ScheduleOutcome {
            improved: false,
            stop: self.stop_wait >= self.cfg.early_stop_patience,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub total_loss: f64,
    pub binary_loss: f64,
    pub multi_loss: f64,
    pub val_total: f64,
    pub val_binary: f64,
    pub val_multi: f64,
    pub lr: f64,
    pub val_binary_acc: f64,
    pub val_multi_acc: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl History {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs.iter().find(|e| e.epoch == self.best_epoch)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(
            f,
            "epoch,total_loss,binary_loss,multi_loss,val_total,val_binary,val_multi,lr"
        )?;
        for e in &self.epochs {
            writeln!(
                f,
                "{},{},{},{},{},{},{},{}",
                e.epoch,
                e.total_loss,
                e.binary_loss,
                e.multi_loss,
                e.val_total,
                e.val_binary,
                e.val_multi,
                e.lr
            )?;
        }
        f.flush()?;
        Ok(())
    }
}

/// Eval-mode predictions for every row of `pool`, in row order.
pub fn predict_pool(params: &ModelParams, pool: &FramePool) -> Result<PredictionBatch> {
    const CHUNK: usize = 512;
    let k = params.config.n_classes;
    let mut out = PredictionBatch {
        p_signal: Vec::with_capacity(pool.len()),
        class_probs: Vec::with_capacity(pool.len() * k),
        n_classes: k,
    };
    let rows: Vec<usize> = (0..pool.len()).collect();
    for chunk in rows.chunks(CHUNK) {
        let (x, _) = pool.gather(chunk);
        let p = predict(params, &x, chunk.len())?;
        out.p_signal.extend(p.p_signal);
        out.class_probs.extend(p.class_probs);
    }
    Ok(out)
}

/// Binary accuracy over all frames and class accuracy over signal frames.
pub fn accuracies(preds: &PredictionBatch, labels: &[Label]) -> (f64, f64) {
    let mut bin_ok = 0usize;
    let mut cls_ok = 0usize;
    let mut n_sig = 0usize;
    for (i, l) in labels.iter().enumerate() {
        let predicted_signal = preds.p_signal[i] > 0.5;
        if predicted_signal == l.is_signal() {
            bin_ok += 1;
        }
        if let Label::Vocalization(k) = l {
            n_sig += 1;
            if preds.argmax(i) == *k {
                cls_ok += 1;
            }
        }
    }
    let n = labels.len().max(1) as f64;
    (
        bin_ok as f64 / n,
        if n_sig > 0 { cls_ok as f64 / n_sig as f64 } else { 0.0 },
    )
}

/// Loss and accuracies of `params` on a whole pool.
pub fn evaluate_pool(params: &ModelParams, pool: &FramePool) -> Result<(LossParts, f64, f64)> {
    let preds = predict_pool(params, pool)?;
    let loss = joint_loss(&preds, pool.labels())?;
    let (b, m) = accuracies(&preds, pool.labels());
    Ok((loss, b, m))
}

fn mix_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ stream.wrapping_mul(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Result of [`train`]: the best-validation parameters and the full history.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub params: ModelParams,
    pub history: History,
}

/// Everything [`train`] needs besides the data.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub sampling: SamplingConfig,
    pub backend: BackendConfig,
    pub optimizer: NAdamConfig,
    pub schedule: TrainLoopConfig,
    pub seed: u64,
}

/// Trains the back-end on balanced batches from `train_pool`, selecting the
/// epoch with the lowest validation loss on `val_pool`.
///
/// Each epoch draws `epoch_iterations` batches, applies one NAdam step and
/// the max-norm constraint per batch, then evaluates the validation loss in
/// eval mode. Single-threaded and reproducible for a given seed.
pub fn train(train_pool: &FramePool, val_pool: &FramePool, settings: &TrainSettings) -> Result<TrainedModel> {
    let TrainSettings {
        sampling,
        backend,
        optimizer,
        schedule,
        seed,
    } = settings;
    backend.validate()?;
    optimizer.validate()?;
    schedule.validate()?;
    if train_pool.dim() != backend.input_dim || val_pool.dim() != backend.input_dim {
        return Err(Error::DimensionMismatch {
            expected: backend.input_dim,
            found: train_pool.dim(),
        });
    }
    if val_pool.is_empty() {
        return Err(Error::config("train", "validation pool is empty"));
    }
    let mut params = init_backend(backend, mix_seed(*seed, 1))?;
    let sampler_cfg = SamplingConfig {
        seed: mix_seed(*seed ^ sampling.seed, 2),
        ..sampling.clone()
    };
    let mut sampler = BalancedSampler::new(train_pool, &sampler_cfg)?;
    let iterations = schedule.iterations_per_epoch.unwrap_or_else(|| {
        epoch_iterations(
            train_pool.n_classes(),
            train_pool.largest_class().max(1),
            sampling.batch_size,
        )
    });
    let dropout_stream = mix_seed(*seed, 3);
    let mut opt = NAdamState::new(params.n_params(), *optimizer);
    let mut sched = Schedule::new(schedule, optimizer.lr);
    let mut history = History::default();
    let mut best = params.clone();
    let mut step: u64 = 0;

    for epoch in 1..=schedule.max_epochs {
        let lr = sched.lr();
        opt.config.lr = lr;
        let (mut tot, mut bin, mut multi) = (0.0, 0.0, 0.0);
        for _ in 0..iterations {
            let rows = sampler.batch(sampling.batch_size);
            let (x, y) = train_pool.gather(&rows);
            step += 1;
            let (preds, cache) = forward(
                &params,
                &x,
                rows.len(),
                Mode::Train,
                mix_seed(dropout_stream, step),
            )?;
            let cache = cache.expect("train mode keeps activations");
            let loss = joint_loss(&preds, &y)?;
            if !loss.total.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    history: Box::new(history),
                });
            }
            tot += loss.total;
            bin += loss.binary;
            multi += loss.multi;
            let grads = backward(&params, &cache, &preds, &y)?;
            update_running_stats(&mut params, &cache, BN_MOMENTUM);
            if let Err(e) = opt.apply(&mut params, &grads) {
                log::error!("epoch {epoch}: {e}");
                return Err(Error::Diverged {
                    epoch,
                    history: Box::new(history),
                });
            }
            apply_max_norm(&mut params, backend.max_norm);
        }
        let (val, val_bin_acc, val_multi_acc) = evaluate_pool(&params, val_pool)?;
        if !val.total.is_finite() || !params.is_finite() {
            return Err(Error::Diverged {
                epoch,
                history: Box::new(history),
            });
        }
        let n = iterations as f64;
        history.epochs.push(EpochRecord {
            epoch,
            total_loss: tot / n,
            binary_loss: bin / n,
            multi_loss: multi / n,
            val_total: val.total,
            val_binary: val.binary,
            val_multi: val.multi,
            lr,
            val_binary_acc: val_bin_acc,
            val_multi_acc: val_multi_acc,
        });
        log::debug!(
            "epoch {epoch}: train {:.4} val {:.4} (bin acc {:.4}, cls acc {:.4}) lr {lr:e}",
            tot / n,
            val.total,
            val_bin_acc,
            val_multi_acc
        );
        let outcome = sched.observe(val.total);
        if outcome.improved {
            best = params.clone();
            history.best_epoch = epoch;
        }
        if outcome.stop {
            log::info!("early stop after epoch {epoch}");
            break;
        }
    }
    Ok(TrainedModel {
        params: best,
        history,
    })
}
