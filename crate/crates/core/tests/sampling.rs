mod common;

use common::{class_pool, sampler_balance};
use vocalseg::dataset::{balanced_sampler, epoch_iterations, SamplingConfig};

#[test]
fn epoch_formula() {
    assert_eq!(epoch_iterations(6, 302, 32), 67);
    assert_eq!(epoch_iterations(5, 3407, 64), 320);
    assert_eq!(epoch_iterations(1, 1, 32), 1);
}

#[test]
fn balanced_over_skewed_pool() {
    let pool = class_pool(&[5, 300, 17, 1, 60, 2000], 20_000);
    let (p_binom, p_chi2) = sampler_balance(&pool, 20_000, 3);
    assert!(p_binom > 0.001, "binomial p = {p_binom}");
    assert!(p_chi2 > 0.001, "chi-square p = {p_chi2}");
}

#[test]
fn same_seed_same_stream() {
    let pool = class_pool(&[3, 4], 5);
    let cfg = SamplingConfig {
        seed: 9,
        ..Default::default()
    };
    let a: Vec<usize> = balanced_sampler(&pool, &cfg).unwrap().take(500).collect();
    let b: Vec<usize> = balanced_sampler(&pool, &cfg).unwrap().take(500).collect();
    assert_eq!(a, b);
}

#[test]
fn missing_class_is_an_error() {
    let pool = class_pool(&[3, 0], 5);
    assert!(balanced_sampler(&pool, &SamplingConfig::default()).is_err());
}
