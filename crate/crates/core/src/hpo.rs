//! Bayesian optimization over back-end hyper-parameters.
//!
//! A Gaussian process with a squared-exponential ARD kernel models the score
//! on the unit cube; new points maximize expected improvement.

use std::path::Path;
use std::time::Instant;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::nnet::{BackendConfig, MAX_LAYERS, MAX_NODES, MIN_NODES};
use crate::optim::NAdamConfig;

pub const JITTER: f64 = 1e-8;

const LOG_LS: (f64, f64) = (-4.6, 2.3); // lengthscale in [0.01, 10]
const LOG_SF2: (f64, f64) = (-4.6, 4.6);
const LOG_NOISE: (f64, f64) = (-18.4, 0.0); // noise variance in [1e-8, 1]

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GpConfig {
    /// Learn the noise variance; when false it stays at `noise_var`.
    pub learn_noise: bool,
    /// Noise variance in standardized units.
    pub noise_var: f64,
    pub restarts: usize,
    pub iterations: usize,
}

impl Default for GpConfig {
    fn default() -> Self {
        Self {
            learn_noise: true,
            noise_var: 1e-6,
            restarts: 8,
            iterations: 100,
        }
    }
}

impl GpConfig {
    pub fn noiseless() -> Self {
        Self {
            learn_noise: false,
            noise_var: 0.0,
            ..Self::default()
        }
    }
}

/// Log-scale kernel hyper-parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GpHyper {
    pub log_lengthscales: Vec<f64>,
    pub log_signal_var: f64,
    pub log_noise_var: Option<f64>,
}

/// Fitted GP posterior.
#[derive(Debug, Clone)]
pub struct GpState {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
    pub hyper: GpHyper,
    /// Noise variance in standardized units, jitter excluded.
    pub noise_var: f64,
    y_mean: f64,
    y_scale: f64,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    lengthscales: Vec<f64>,
    signal_var: f64,
}

fn sq_dist_scaled(a: &[f64], b: &[f64], ls: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .zip(ls)
        .map(|((x, y), l)| {
            let d = (x - y) / l;
            d * d
        })
        .sum()
}

fn kernel_matrix(x: &[Vec<f64>], ls: &[f64], sf2: f64, diag: f64) -> DMatrix<f64> {
    let n = x.len();
    DMatrix::from_fn(n, n, |i, j| {
        let k = sf2 * (-0.5 * sq_dist_scaled(&x[i], &x[j], ls)).exp();
        if i == j {
            k + diag
        } else {
            k
        }
    })
}

struct LmlEval {
    value: f64,
    grad: Vec<f64>,
}

/// Log marginal likelihood and its gradient in the packed log parameters
/// `[log ls_1..d, log sf2, (log noise)]`.
fn log_marginal(x: &[Vec<f64>], y: &DVector<f64>, theta: &[f64], cfg: &GpConfig) -> Option<LmlEval> {
    let n = x.len();
    let d = x[0].len();
    let ls: Vec<f64> = theta[..d].iter().map(|t| t.exp()).collect();
    let sf2 = theta[d].exp();
    let noise = if cfg.learn_noise { theta[d + 1].exp() } else { cfg.noise_var };
    let k = kernel_matrix(x, &ls, sf2, noise + JITTER);
    let chol = Cholesky::new(k.clone())?;
    let alpha = chol.solve(y);
    let log_det: f64 = chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>() * 2.0;
    let value = -0.5 * y.dot(&alpha) - 0.5 * log_det - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
    // W = alpha alpha^T - K^-1
    let k_inv = chol.inverse();
    let w = &alpha * alpha.transpose() - k_inv;
    let mut grad = vec![0.0; theta.len()];
    for i in 0..n {
        for j in 0..n {
            let kse = if i == j { k[(i, i)] - noise - JITTER } else { k[(i, j)] };
            let wij = w[(i, j)];
            for (dim, g) in grad[..d].iter_mut().enumerate() {
                let diff = (x[i][dim] - x[j][dim]) / ls[dim];
                *g += 0.5 * wij * kse * diff * diff;
            }
            grad[d] += 0.5 * wij * kse;
        }
    }
    if cfg.learn_noise {
        grad[d + 1] = 0.5 * noise * (0..n).map(|i| w[(i, i)]).sum::<f64>();
    }
    Some(LmlEval { value, grad })
}

fn bounds(d: usize, learn_noise: bool) -> Vec<(f64, f64)> {
    let mut b = vec![LOG_LS; d];
    b.push(LOG_SF2);
    if learn_noise {
        b.push(LOG_NOISE);
    }
    b
}

fn ascend(x: &[Vec<f64>], y: &DVector<f64>, start: Vec<f64>, cfg: &GpConfig) -> Option<(Vec<f64>, f64)> {
    let b = bounds(x[0].len(), cfg.learn_noise);
    let mut theta = start;
    let mut cur = log_marginal(x, y, &theta, cfg)?;
    let mut step = 0.1;
    for _ in 0..cfg.iterations {
        let norm = cur.grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm < 1e-8 {
            break;
        }
        let cand: Vec<f64> = theta
            .iter()
            .zip(&cur.grad)
            .zip(&b)
            .map(|((t, g), (lo, hi))| (t + step * g / norm).clamp(*lo, *hi))
            .collect();
        match log_marginal(x, y, &cand, cfg) {
            Some(next) if next.value > cur.value => {
                theta = cand;
                cur = next;
                step = (step * 1.5).min(2.0);
            }
            _ => {
                step *= 0.5;
                if step < 1e-6 {
                    break;
                }
            }
        }
    }
    Some((theta, cur.value))
}

/// Fits kernel hyper-parameters by multi-start gradient ascent on the log
/// marginal likelihood. Targets are standardized internally.
pub fn gp_fit(x: &[Vec<f64>], y: &[f64], cfg: &GpConfig, seed: u64) -> Result<GpState> {
    if x.len() < 2 || x.len() != y.len() {
        return Err(Error::config("gp", "need at least two observations with matching targets"));
    }
    let d = x[0].len();
    if d == 0 || x.iter().any(|p| p.len() != d) {
        return Err(Error::Shape("observation points differ in dimension".into()));
    }
    let n = y.len() as f64;
    let y_mean = y.iter().sum::<f64>() / n;
    let sd = (y.iter().map(|v| (v - y_mean).powi(2)).sum::<f64>() / n).sqrt();
    let y_scale = if sd > 0.0 { sd } else { 1.0 };
    let ys = DVector::from_iterator(y.len(), y.iter().map(|v| (v - y_mean) / y_scale));

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(Vec<f64>, f64)> = None;
    for r in 0..cfg.restarts.max(1) {
        let mut start: Vec<f64> = if r == 0 {
            vec![(0.3f64).ln(); d]
        } else {
            (0..d).map(|_| rng.random_range(0.05f64..2.0).ln()).collect()
        };
        start.push(if r == 0 { 0.0 } else { rng.random_range(0.5f64..2.0).ln() });
        if cfg.learn_noise {
            start.push(if r == 0 { (1e-4f64).ln() } else { rng.random_range(1e-6f64..1e-2).ln() });
        }
        if let Some((theta, v)) = ascend(x, &ys, start, cfg) {
            if best.as_ref().is_none_or(|(_, bv)| v > *bv) {
                best = Some((theta, v));
            }
        }
    }
    let (theta, _) = best.ok_or(Error::SingularKernel)?;
    let lengthscales: Vec<f64> = theta[..d].iter().map(|t| t.exp()).collect();
    let signal_var = theta[d].exp();
    let noise_var = if cfg.learn_noise { theta[d + 1].exp() } else { cfg.noise_var };
    let k = kernel_matrix(x, &lengthscales, signal_var, noise_var + JITTER);
    let chol = Cholesky::new(k).ok_or(Error::SingularKernel)?;
    let alpha = chol.solve(&ys);
    Ok(GpState {
        x: x.to_vec(),
        y: y.to_vec(),
        hyper: GpHyper {
            log_lengthscales: theta[..d].to_vec(),
            log_signal_var: theta[d],
            log_noise_var: cfg.learn_noise.then(|| theta[d + 1]),
        },
        noise_var,
        y_mean,
        y_scale,
        chol,
        alpha,
        lengthscales,
        signal_var,
    })
}

impl GpState {
    /// Posterior mean and latent variance at `point`, in the units of `y`.
    pub fn posterior(&self, point: &[f64]) -> (f64, f64) {
        let ks = DVector::from_iterator(
            self.x.len(),
            self.x.iter().map(|xi| {
                self.signal_var * (-0.5 * sq_dist_scaled(xi, point, &self.lengthscales)).exp()
            }),
        );
        let mean = ks.dot(&self.alpha);
        let v = self.chol.l().solve_lower_triangular(&ks).expect("triangular factor");
        let var = (self.signal_var - v.dot(&v)).max(0.0);
        (
            self.y_mean + self.y_scale * mean,
            var * self.y_scale * self.y_scale,
        )
    }

    /// Noise plus jitter, in the units of `y`.
    pub fn floor_variance(&self) -> f64 {
        (self.noise_var + JITTER) * self.y_scale * self.y_scale
    }

    /// Lowest posterior mean over the observed points; the EI incumbent.
    pub fn incumbent(&self) -> f64 {
        self.x
            .iter()
            .map(|p| self.posterior(p).0)
            .fold(f64::INFINITY, f64::min)
    }
}

/// Closed-form expected improvement below `best` for a normal predictive.
///
/// With `sigma == 0` this is the limit `max(best - mean, 0)`.
pub fn ei_closed_form(mean: f64, sigma: f64, best: f64) -> f64 {
    if sigma <= 0.0 {
        return (best - mean).max(0.0);
    }
    let z = (best - mean) / sigma;
    let n = Normal::standard();
    ((best - mean) * n.cdf(z) + sigma * n.pdf(z)).max(0.0)
}

/// Expected improvement of `point` over the GP incumbent (minimization).
///
/// The predictive spread excludes the noise and jitter floor, so EI
/// vanishes at an observed incumbent of a noiseless fit.
pub fn expected_improvement(gp: &GpState, point: &[f64]) -> f64 {
    expected_improvement_over(gp, point, gp.incumbent())
}

pub fn expected_improvement_over(gp: &GpState, point: &[f64], best: f64) -> f64 {
    let (mean, var) = gp.posterior(point);
    // below this the excess over the floor is rounding error
    let tol = 1e-9 * gp.signal_var * gp.y_scale * gp.y_scale;
    let excess = var - gp.floor_variance();
    let sigma = if excess > tol { excess.sqrt() } else { 0.0 };
    ei_closed_form(mean, sigma, best)
}

const PRIMES: [u64; 16] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53];

/// Halton sequence with a random digit permutation per dimension (zero kept fixed).
#[derive(Debug, Clone)]
pub struct ScrambledHalton {
    perms: Vec<Vec<u64>>,
    next: u64,
}

impl ScrambledHalton {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 || dim > PRIMES.len() {
            return Err(Error::config("hpo", format!("Halton dimension must be 1..={}", PRIMES.len())));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let perms = PRIMES[..dim]
            .iter()
            .map(|&p| {
                let mut tail: Vec<u64> = (1..p).collect();
                tail.shuffle(&mut rng);
                let mut perm = vec![0];
                perm.extend(tail);
                perm
            })
            .collect();
        Ok(Self { perms, next: 1 })
    }

    pub fn point(&mut self) -> Vec<f64> {
        let i = self.next;
        self.next += 1;
        self.perms
            .iter()
            .zip(PRIMES)
            .map(|(perm, p)| {
                let mut k = i;
                let mut f = 1.0 / p as f64;
                let mut v = 0.0;
                while k > 0 {
                    v += perm[(k % p) as usize] as f64 * f;
                    k /= p;
                    f /= p as f64;
                }
                v
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoConfig {
    pub budget: usize,
    pub n_init: usize,
    pub n_candidates: usize,
    pub gp: GpConfig,
    pub seed: u64,
}

impl Default for BoConfig {
    fn default() -> Self {
        Self {
            budget: 20,
            n_init: 5,
            n_candidates: 1024,
            gp: GpConfig::default(),
            seed: 0,
        }
    }
}

/// One evaluation of the objective.
#[derive(Debug, Clone, PartialEq)]
pub struct BoTrial {
    pub index: usize,
    pub point: Vec<f64>,
    /// `None` when the objective failed.
    pub value: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoResult {
    pub trials: Vec<BoTrial>,
    /// Index into `trials` of the lowest value.
    pub best: usize,
}

impl BoResult {
    pub fn best_point(&self) -> &[f64] {
        &self.trials[self.best].point
    }

    pub fn best_value(&self) -> f64 {
        self.trials[self.best].value.expect("best trial succeeded")
    }
}

fn pattern_search(gp: &GpState, best: f64, start: &[f64]) -> (Vec<f64>, f64) {
    let mut x = start.to_vec();
    let mut fx = expected_improvement_over(gp, &x, best);
    let mut step = 0.05;
    while step > 1e-3 {
        let mut moved = false;
        for d in 0..x.len() {
            for dir in [-1.0, 1.0] {
                let mut c = x.clone();
                c[d] = (c[d] + dir * step).clamp(0.0, 1.0);
                let fc = expected_improvement_over(gp, &c, best);
                if fc > fx {
                    x = c;
                    fx = fc;
                    moved = true;
                }
            }
        }
        if !moved {
            step *= 0.5;
        }
    }
    (x, fx)
}

fn same_point(a: &[f64], b: &[f64]) -> bool {
    a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-9)
}

/// Minimizes `objective` over the unit cube of dimension `dim`.
///
/// `snap` maps a raw proposal to the point actually evaluated (e.g. rounding
/// integer dimensions). Failed evaluations consume budget but are not
/// modelled.
pub fn minimize<S, F>(dim: usize, snap: S, mut objective: F, cfg: &BoConfig) -> Result<BoResult>
where
    S: Fn(&[f64]) -> Vec<f64>,
    F: FnMut(usize, &[f64]) -> Result<f64>,
{
    if cfg.budget == 0 {
        return Err(Error::config("hpo.budget", "must be at least 1"));
    }
    let mut halton = ScrambledHalton::new(dim, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5DEE_CE66);
    let mut trials: Vec<BoTrial> = Vec::with_capacity(cfg.budget);
    for index in 0..cfg.budget {
        let observed: Vec<(&[f64], f64)> = trials
            .iter()
            .filter_map(|t| t.value.map(|v| (t.point.as_slice(), v)))
            .collect();
        let point = if index < cfg.n_init || observed.len() < 2 {
            snap(&halton.point())
        } else {
            let xs: Vec<Vec<f64>> = observed.iter().map(|(p, _)| p.to_vec()).collect();
            let ys: Vec<f64> = observed.iter().map(|(_, v)| *v).collect();
            match gp_fit(&xs, &ys, &cfg.gp, cfg.seed.wrapping_add(index as u64)) {
                Ok(gp) => propose(&gp, dim, &snap, &trials, cfg.n_candidates, &mut rng),
                Err(e) => {
                    log::warn!("trial {index}: surrogate fit failed ({e}); sampling at random");
                    snap(&(0..dim).map(|_| rng.random::<f64>()).collect::<Vec<_>>())
                }
            }
        };
        let t0 = Instant::now();
        let value = match objective(index, &point) {
            Ok(v) if v.is_finite() => Some(v),
            Ok(v) => {
                log::warn!("trial {index}: non-finite score {v}");
                None
            }
            Err(e) => {
                log::warn!("trial {index} failed: {e}");
                None
            }
        };
        trials.push(BoTrial {
            index,
            point,
            value,
            seconds: t0.elapsed().as_secs_f64(),
        });
    }
    let best = trials
        .iter()
        .filter(|t| t.value.is_some())
        .min_by(|a, b| a.value.unwrap().total_cmp(&b.value.unwrap()))
        .map(|t| t.index)
        .ok_or_else(|| Error::config("hpo", "every trial failed"))?;
    Ok(BoResult { trials, best })
}

fn propose<S: Fn(&[f64]) -> Vec<f64>>(
    gp: &GpState,
    dim: usize,
    snap: &S,
    trials: &[BoTrial],
    n_candidates: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let best = gp.incumbent();
    let mut scored: Vec<(f64, Vec<f64>)> = (0..n_candidates.max(1))
        .map(|_| {
            let c: Vec<f64> = (0..dim).map(|_| rng.random::<f64>()).collect();
            (expected_improvement_over(gp, &c, best), c)
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut refined: Vec<(f64, Vec<f64>)> = scored
        .iter()
        .take(5)
        .map(|(_, c)| {
            let (x, f) = pattern_search(gp, best, c);
            (f, x)
        })
        .collect();
    refined.extend(scored.into_iter().skip(5));
    refined.sort_by(|a, b| b.0.total_cmp(&a.0));
    let fresh = |p: &Vec<f64>| !trials.iter().any(|t| same_point(&t.point, p));
    refined
        .iter()
        .map(|(_, c)| snap(c))
        .find(fresh)
        .unwrap_or_else(|| snap(&(0..dim).map(|_| rng.random::<f64>()).collect::<Vec<_>>()))
}

/// Bounds of the continuous hyper-parameters; layer and node ranges are fixed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSpace {
    pub dropout: (f64, f64),
    pub max_norm: (f64, f64),
    pub log10_lr: (f64, f64),
    pub beta1: (f64, f64),
    pub beta2: (f64, f64),
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            dropout: (0.0, 0.7),
            max_norm: (0.5, 8.0),
            log10_lr: (-5.0, -2.0),
            beta1: (0.8, 0.999),
            beta2: (0.9, 0.9999),
        }
    }
}

/// A point of the search space in natural units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperConfig {
    pub dropout: f64,
    pub max_norm: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub det_layers: usize,
    pub det_nodes: usize,
    pub cls_layers: usize,
    pub cls_nodes: usize,
}

impl HyperConfig {
    pub fn backend(&self, input_dim: usize, n_classes: usize) -> BackendConfig {
        BackendConfig {
            input_dim,
            n_classes,
            det_layers: self.det_layers,
            det_nodes: self.det_nodes,
            cls_layers: self.cls_layers,
            cls_nodes: self.cls_nodes,
            dropout: self.dropout,
            max_norm: self.max_norm,
        }
    }

    pub fn optimizer(&self) -> NAdamConfig {
        NAdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            ..NAdamConfig::default()
        }
    }
}

fn lerp((lo, hi): (f64, f64), u: f64) -> f64 {
    lo + (hi - lo) * u.clamp(0.0, 1.0)
}

fn unlerp((lo, hi): (f64, f64), v: f64) -> f64 {
    if hi > lo {
        ((v - lo) / (hi - lo)).clamp(0.0, 1.0)
    } else {
        0.0
    }
}

const MIN_LOG2_NODES: f64 = 5.0; // 32
const MAX_LOG2_NODES: f64 = 10.0; // 1024

fn layers_from(u: f64) -> usize {
    (1.0 + u.clamp(0.0, 1.0) * (MAX_LAYERS - 1) as f64).round() as usize
}

fn nodes_from(u: f64) -> usize {
    let e = (MIN_LOG2_NODES + u.clamp(0.0, 1.0) * (MAX_LOG2_NODES - MIN_LOG2_NODES)).round();
    (1usize << e as u32).clamp(MIN_NODES, MAX_NODES)
}

impl SearchSpace {
    pub const DIM: usize = 9;

    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [
            ("dropout", self.dropout),
            ("max_norm", self.max_norm),
            ("log10_lr", self.log10_lr),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
        ] {
            if !(lo <= hi) {
                return Err(Error::config(&format!("hpo.space.{name}"), "lower bound exceeds upper"));
            }
        }
        if self.dropout.0 < 0.0 || self.dropout.1 >= 1.0 {
            return Err(Error::config("hpo.space.dropout", "must lie in [0, 1)"));
        }
        if self.max_norm.0 <= 0.0 {
            return Err(Error::config("hpo.space.max_norm", "must be positive"));
        }
        if self.beta1.0 < 0.0 || self.beta1.1 >= 1.0 || self.beta2.0 < 0.0 || self.beta2.1 >= 1.0 {
            return Err(Error::config("hpo.space.beta", "must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn decode(&self, u: &[f64]) -> HyperConfig {
        HyperConfig {
            dropout: lerp(self.dropout, u[0]),
            max_norm: lerp(self.max_norm, u[1]),
            lr: 10f64.powf(lerp(self.log10_lr, u[2])),
            beta1: lerp(self.beta1, u[3]),
            beta2: lerp(self.beta2, u[4]),
            det_layers: layers_from(u[5]),
            det_nodes: nodes_from(u[6]),
            cls_layers: layers_from(u[7]),
            cls_nodes: nodes_from(u[8]),
        }
    }

    pub fn encode(&self, c: &HyperConfig) -> Vec<f64> {
        let layers = |l: usize| (l as f64 - 1.0) / (MAX_LAYERS - 1) as f64;
        let nodes = |n: usize| {
            ((n as f64).log2() - MIN_LOG2_NODES) / (MAX_LOG2_NODES - MIN_LOG2_NODES)
        };
        vec![
            unlerp(self.dropout, c.dropout),
            unlerp(self.max_norm, c.max_norm),
            unlerp(self.log10_lr, c.lr.log10()),
            unlerp(self.beta1, c.beta1),
            unlerp(self.beta2, c.beta2),
            layers(c.det_layers),
            nodes(c.det_nodes),
            layers(c.cls_layers),
            nodes(c.cls_nodes),
        ]
    }

    /// Rounds the discrete coordinates of a unit-cube point.
    pub fn snap(&self, u: &[f64]) -> Vec<f64> {
        self.encode(&self.decode(u))
    }
}

/// Which validation accuracy drives model selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selection {
    /// Binary accuracy, class accuracy breaking ties.
    #[default]
    Binary,
    /// Class accuracy, binary accuracy breaking ties.
    Multi,
    /// Mean of both.
    Mean,
}

impl Selection {
    const TIE_WEIGHT: f64 = 1e-3;

    /// Objective to minimize.
    pub fn loss(self, score: &TrialScore) -> f64 {
        match self {
            Selection::Binary => -(score.val_binary_acc + Self::TIE_WEIGHT * score.val_multi_acc),
            Selection::Multi => -(score.val_multi_acc + Self::TIE_WEIGHT * score.val_binary_acc),
            Selection::Mean => -0.5 * (score.val_binary_acc + score.val_multi_acc),
        }
    }
}

/// Validation accuracies of one trained configuration, as fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialScore {
    pub val_binary_acc: f64,
    pub val_multi_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    /// 1-based.
    pub trial: usize,
    pub config: HyperConfig,
    pub score: Option<TrialScore>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneResult {
    pub best: HyperConfig,
    pub best_trial: usize,
    pub trials: Vec<TrialRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuneConfig {
    pub space: SearchSpace,
    pub bo: BoConfig,
    pub selection: Selection,
}

impl Default for TuneConfig {
    fn default() -> Self {
        Self {
            space: SearchSpace::default(),
            bo: BoConfig::default(),
            selection: Selection::default(),
        }
    }
}

/// Searches hyper-parameters with `score` (typically: train, then measure
/// validation accuracy). Trials run sequentially.
pub fn tune<F>(cfg: &TuneConfig, mut score: F) -> Result<TuneResult>
where
    F: FnMut(usize, &HyperConfig) -> Result<TrialScore>,
{
    cfg.space.validate()?;
    let space = cfg.space;
    let mut scores: Vec<Option<TrialScore>> = Vec::new();
    let result = minimize(
        SearchSpace::DIM,
        |u| space.snap(u),
        |i, u| {
            let c = space.decode(u);
            log::info!("trial {}: {}", i + 1, serde_json::to_string(&c).unwrap_or_default());
            match score(i, &c) {
                Ok(s) => {
                    scores.push(Some(s));
                    Ok(cfg.selection.loss(&s))
                }
                Err(e) => {
                    scores.push(None);
                    Err(e)
                }
            }
        },
        &cfg.bo,
    )?;
    let trials: Vec<TrialRecord> = result
        .trials
        .iter()
        .zip(&scores)
        .map(|(t, s)| TrialRecord {
            trial: t.index + 1,
            config: space.decode(&t.point),
            score: *s,
            seconds: t.seconds,
        })
        .collect();
    Ok(TuneResult {
        best: space.decode(result.best_point()),
        best_trial: result.best + 1,
        trials,
    })
}

/// Writes `trial,config_json,val_binary_acc,val_multi_acc,seconds`; failed
/// trials have empty accuracy fields.
pub fn write_trial_log(trials: &[TrialRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["trial", "config_json", "val_binary_acc", "val_multi_acc", "seconds"])?;
    for t in trials {
        let (b, m) = match t.score {
            Some(s) => (s.val_binary_acc.to_string(), s.val_multi_acc.to_string()),
            None => (String::new(), String::new()),
        };
        w.write_record([
            t.trial.to_string(),
            serde_json::to_string(&t.config)?,
            b,
            m,
            format!("{:.3}", t.seconds),
        ])?;
    }
    w.flush()?;
    Ok(())
}
