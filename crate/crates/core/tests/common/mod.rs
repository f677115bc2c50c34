//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vocalseg::dataset::Label;
use vocalseg::nnet::{backward, forward, init_backend, joint_loss, BackendConfig, Mode};

/// A detected span as `(first, last, positive frame indices)`, 1-based.
pub type Span = (usize, usize, Vec<usize>);

/// Detection over a whole sequence with random access to past frames.
///
/// Frame `b` is positive and nothing in `b-L..b-1` is positive: a new span
/// starts. Positive with some positive in that range: merged. Negative with
/// frame `b-L` positive and nothing after it: the open span ends there.
pub fn detect_reference(flags: &[bool], lookback: usize) -> Vec<Span> {
    let y = |i: usize| flags[i - 1];
    let mut done = Vec::new();
    let mut open: Option<Span> = None;
    for b in 1..=flags.len() {
        let lo = b.saturating_sub(lookback).max(1);
        let any_recent = (lo..b).any(y);
        if y(b) {
            if any_recent {
                let s = open.as_mut().expect("a recent positive implies an open span");
                s.1 = b;
                s.2.push(b);
            } else {
                done.extend(open.take());
                open = Some((b, b, vec![b]));
            }
        } else if b > lookback && y(b - lookback) && !(b - lookback + 1..b).any(y) {
            let s = open.take().expect("span open at its last positive");
            assert_eq!(s.1, b - lookback);
            done.push(s);
        }
    }
    done.extend(open);
    done
}

/// Class with the most votes, smallest index on ties, by counting each
/// candidate separately.
pub fn vote_reference(classes: &[usize], n_classes: usize) -> usize {
    let mut best = 0;
    let mut best_count = 0;
    for k in 0..n_classes {
        let count = classes.iter().filter(|&&c| c == k).count();
        if count > best_count {
            best = k;
            best_count = count;
        }
    }
    best
}

/// Scalar NAdam written straight from the moment and bias-correction updates.
pub struct NadamReference {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: i32,
    pub m: f64,
    pub v: f64,
}

impl NadamReference {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: 0.0,
            v: 0.0,
        }
    }

    /// Parameter change for gradient `g`.
    pub fn delta(&mut self, g: f64) -> f64 {
        self.t += 1;
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * g;
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * g * g;
        let m_hat = self.m / (1.0 - self.beta1.powi(self.t));
        let v_hat = self.v / (1.0 - self.beta2.powi(self.t));
        let g_hat = g / (1.0 - self.beta1.powi(self.t));
        let m_bar = self.beta1 * m_hat + (1.0 - self.beta1) * g_hat;
        -self.lr * m_bar / (v_hat.sqrt() + self.eps)
    }
}

/// Random mixed batch: row-major embeddings and labels with at least one of each kind.
pub fn random_batch(dim: usize, n_classes: usize, batch: usize, seed: u64) -> (Vec<f64>, Vec<Label>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = (0..dim * batch).map(|_| rng.random_range(-2.0..2.0)).collect();
    let labels = (0..batch)
        .map(|i| match i % 3 {
            0 => Label::Noise,
            _ => Label::Vocalization(rng.random_range(0..n_classes)),
        })
        .collect();
    (x, labels)
}

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub coordinates: usize,
    /// Largest relative error over coordinates whose stencil stays on one
    /// side of every PReLU kink.
    pub max_rel_err: f64,
    /// Coordinates whose `+-h` stencil flips the sign of some pre-activation.
    pub kink_crossings: usize,
    /// Largest relative error on those coordinates, re-checked with a step
    /// small enough to stay on one linear piece.
    pub max_rel_err_refined: f64,
}

/// Sign of every PReLU input, per head and layer.
fn activation_pattern(p: &vocalseg::nnet::ModelParams, x: &[f64], batch: usize, seed: u64) -> Vec<bool> {
    let (_, cache) = forward(p, x, batch, Mode::Train, seed).unwrap();
    let cache = cache.unwrap();
    let layers = p.detector.hidden.iter().chain(&p.classifier.hidden);
    let mut out = Vec::new();
    for (layer, xhat) in layers.zip(vocalseg::nnet::normalized_preactivations(&cache)) {
        for (i, v) in xhat.iter().enumerate() {
            let u = i % layer.units;
            out.push(layer.gamma[u] * v + layer.beta[u] > 0.0);
        }
    }
    out
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs()).max(1e-7)
}

/// Compares the analytic gradient of the train-mode loss (fixed dropout
/// mask) with central differences of step `h`.
pub fn gradient_check(cfg: &BackendConfig, x: &[f64], labels: &[Label], seed: u64, h: f64) -> GradCheck {
    let batch = labels.len();
    let mut params = init_backend(cfg, seed).unwrap();
    // move batch-norm scales and PReLU slopes away from their initial values
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    for head in [&mut params.detector, &mut params.classifier] {
        for l in &mut head.hidden {
            l.gamma.iter_mut().for_each(|g| *g = rng.random_range(0.5..1.5));
            l.beta.iter_mut().for_each(|b| *b = rng.random_range(-0.3..0.3));
            l.prelu = rng.random_range(0.05..0.5);
        }
    }
    let drop_seed = seed.wrapping_add(17);
    let loss = |p: &vocalseg::nnet::ModelParams| {
        let (preds, _) = forward(p, x, batch, Mode::Train, drop_seed).unwrap();
        joint_loss(&preds, labels).unwrap().total
    };
    let (preds, cache) = forward(&params, x, batch, Mode::Train, drop_seed).unwrap();
    let grads = backward(&params, &cache.unwrap(), &preds, labels).unwrap();
    let analytic = grads.flatten();
    let base = activation_pattern(&params, x, batch, drop_seed);

    let mut out = GradCheck {
        coordinates: analytic.len(),
        max_rel_err: 0.0,
        kink_crossings: 0,
        max_rel_err_refined: 0.0,
    };
    let mut flat_index = 0;
    let n_tensors = params.tensors().len();
    for t in 0..n_tensors {
        let len = params.tensors()[t].len();
        for j in 0..len {
            let orig = params.tensors()[t][j];
            let mut central = |step: f64| {
                params.tensors_mut()[t][j] = orig + step;
                let up = (loss(&params), activation_pattern(&params, x, batch, drop_seed));
                params.tensors_mut()[t][j] = orig - step;
                let down = (loss(&params), activation_pattern(&params, x, batch, drop_seed));
                params.tensors_mut()[t][j] = orig;
                ((up.0 - down.0) / (2.0 * step), up.1 == base && down.1 == base)
            };
            let a = analytic[flat_index];
            let (numeric, smooth) = central(h);
            if smooth {
                out.max_rel_err = out.max_rel_err.max(rel_err(a, numeric));
            } else {
                out.kink_crossings += 1;
                let mut step = h;
                let refined = loop {
                    step /= 10.0;
                    let (n, ok) = central(step);
                    if ok || step < 1e-9 {
                        break n;
                    }
                };
                out.max_rel_err_refined = out.max_rel_err_refined.max(rel_err(a, refined));
            }
            flat_index += 1;
        }
    }
    assert_eq!(flat_index, analytic.len());
    out
}

/// Every classification-head gradient is exactly zero on an all-noise batch.
pub fn classifier_grad_is_zero_for_noise(cfg: &BackendConfig, batch: usize, seed: u64) -> bool {
    let (x, _) = random_batch(cfg.input_dim, cfg.n_classes, batch, seed);
    let labels = vec![Label::Noise; batch];
    let params = init_backend(cfg, seed).unwrap();
    let (preds, cache) = forward(&params, &x, batch, Mode::Train, seed).unwrap();
    let grads = backward(&params, &cache.unwrap(), &preds, &labels).unwrap();
    let det_nonzero = grads
        .detector
        .output
        .weights
        .iter()
        .any(|&g| g != 0.0);
    let cls_zero = grads.classifier.hidden.iter().all(|l| {
        l.weights.iter().chain(&l.bias).chain(&l.gamma).chain(&l.beta).all(|&g| g == 0.0)
            && l.prelu == 0.0
    }) && grads
        .classifier
        .output
        .weights
        .iter()
        .chain(&grads.classifier.output.bias)
        .all(|&g| g == 0.0);
    det_nonzero && cls_zero
}

/// Pool with `sizes[k]` frames of class `k` and `noise` noise frames.
pub fn class_pool(sizes: &[usize], noise: usize) -> vocalseg::dataset::FramePool {
    let mut pool = vocalseg::dataset::FramePool::new(1, sizes.len());
    for i in 0..noise {
        pool.push("noise", i + 1, Label::Noise, &[0.0]).unwrap();
    }
    for (k, &n) in sizes.iter().enumerate() {
        for i in 0..n {
            pool.push(&format!("c{k}"), i + 1, Label::Vocalization(k), &[k as f64]).unwrap();
        }
    }
    pool
}

/// Two-sided binomial p-value of the signal count and chi-square p-value of
/// class uniformity among signal draws.
pub fn sampler_balance(pool: &vocalseg::dataset::FramePool, draws: usize, seed: u64) -> (f64, f64) {
    use statrs::distribution::{Binomial, ChiSquared, ContinuousCDF, DiscreteCDF};
    let cfg = vocalseg::dataset::SamplingConfig {
        seed,
        ..Default::default()
    };
    let mut sampler = vocalseg::dataset::balanced_sampler(pool, &cfg).unwrap();
    let k = pool.n_classes();
    let mut counts = vec![0u64; k];
    let mut signal = 0u64;
    for _ in 0..draws {
        if let Label::Vocalization(c) = pool.label(sampler.draw()) {
            counts[c] += 1;
            signal += 1;
        }
    }
    let binom = Binomial::new(0.5, draws as u64).unwrap();
    let lower = binom.cdf(signal);
    let upper = 1.0 - if signal == 0 { 0.0 } else { binom.cdf(signal - 1) };
    let p_binom = (2.0 * lower.min(upper)).min(1.0);
    let expected = signal as f64 / k as f64;
    let stat: f64 = counts
        .iter()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum();
    let p_chi2 = 1.0 - ChiSquared::new((k - 1) as f64).unwrap().cdf(stat);
    (p_binom, p_chi2)
}

/// Soundscape, its labeled clips (partitioned) and a model trained on them.
pub fn train_on_soundscape(
    dir: &std::path::Path,
    spec: &vocalseg::synth::SoundscapeSpec,
    cfg: &vocalseg::config::RunConfig,
    seed: u64,
) -> vocalseg::checkpoint::Model {
    let (audio, truth) = vocalseg::synth::generate_soundscape(spec, seed).unwrap();
    let repertoire = spec.repertoire().unwrap();
    let manifest = vocalseg::synth::cut_manifest(
        &audio,
        &truth,
        &repertoire,
        &cfg.cut,
        "clip",
        dir.join("clips"),
    )
    .unwrap();
    let manifest = vocalseg::dataset::partition(&manifest, seed).unwrap();
    vocalseg::cli::train_from_manifest(cfg, &manifest).unwrap()
}

/// For each true event: whether some segment overlaps it, and whether the
/// segment overlapping it most carries the right class.
pub fn match_events(
    events: &[vocalseg::synth::TruthEvent],
    segments: &[vocalseg::segment::Segment],
    repertoire: &vocalseg::dataset::Repertoire,
) -> Vec<(bool, bool)> {
    events
        .iter()
        .map(|e| {
            let best = segments
                .iter()
                .map(|s| (s.end_s.min(e.end_s) - s.start_s.max(e.start_s), s))
                .filter(|(o, _)| *o > 0.0)
                .max_by(|a, b| a.0.total_cmp(&b.0));
            match best {
                Some((_, s)) => (true, repertoire.name(s.class) == e.class),
                None => (false, false),
            }
        })
        .collect()
}
