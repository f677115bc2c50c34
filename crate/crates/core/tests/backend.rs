mod common;

use common::{classifier_grad_is_zero_for_noise, gradient_check, random_batch};
use vocalseg::dataset::Label;
use vocalseg::nnet::{forward, init_backend, joint_loss, BackendConfig, Mode};

fn config(layers: usize, dropout: f64) -> BackendConfig {
    BackendConfig {
        input_dim: 6,
        n_classes: 3,
        det_layers: layers,
        det_nodes: 32,
        cls_layers: layers,
        cls_nodes: 32,
        dropout,
        max_norm: 3.0,
    }
}

#[test]
fn gradients_match_finite_differences() {
    for layers in 1..=3 {
        let cfg = config(layers, 0.0);
        let (x, labels) = random_batch(cfg.input_dim, cfg.n_classes, 8, layers as u64);
        let r = gradient_check(&cfg, &x, &labels, 100 + layers as u64, 1e-4);
        assert!(r.max_rel_err < 1e-3 && r.max_rel_err_refined < 1e-3, "{layers} layers: {r:?}");
    }
}

#[test]
fn gradients_match_with_dropout() {
    let cfg = config(2, 0.3);
    let (x, labels) = random_batch(cfg.input_dim, cfg.n_classes, 8, 5);
    let r = gradient_check(&cfg, &x, &labels, 7, 1e-4);
    assert!(r.max_rel_err < 1e-3 && r.max_rel_err_refined < 1e-3, "{r:?}");
}

#[test]
fn all_noise_batch_leaves_classifier_untouched() {
    for layers in 1..=3 {
        assert!(classifier_grad_is_zero_for_noise(&config(layers, 0.2), 8, layers as u64));
    }
}

#[test]
fn loss_decomposes_into_binary_and_gated_multi() {
    for seed in 0..20 {
        let cfg = config(1 + (seed as usize % 3), 0.0);
        let (x, mut labels) = random_batch(cfg.input_dim, cfg.n_classes, 16, seed);
        if seed % 5 == 0 {
            labels = vec![Label::Noise; 16];
        }
        let params = init_backend(&cfg, seed).unwrap();
        let (preds, _) = forward(&params, &x, 16, Mode::Train, seed).unwrap();
        let l = joint_loss(&preds, &labels).unwrap();
        let signal = labels.iter().filter(|l| l.is_signal()).count() as f64 / 16.0;
        assert!((l.signal_fraction - signal).abs() < 1e-15);
        assert!((l.binary + l.signal_fraction * l.multi - l.total).abs() < 1e-12);
        if signal == 0.0 {
            assert_eq!(l.multi, 0.0);
            assert!((l.total - l.binary).abs() < 1e-15);
        }
    }
}
