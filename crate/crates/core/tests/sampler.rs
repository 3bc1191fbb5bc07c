//! HMC calibration on targets with known answers.

mod common;

use common::*;
use synlik::ensemble::{Ensemble, EnsembleConfig};
use synlik::evaluation::histogram_density;
use synlik::sampler::{member_log_target, run_hmc};
use synlik::simulators::BoxPrior;

#[test]
fn flat_likelihood_recovers_uniform_prior() {
    let prior = BoxPrior::new(vec![-3.0, 0.25], vec![5.0, 5.0]).unwrap();
    for p in prior_recovery_p_values(&prior, 10_000, 1) {
        assert!(p > 0.01, "KS p = {p}");
    }
}

#[test]
fn conjugate_gaussian_posterior() {
    let (mean, var) = conjugate_moments(1.3, 10_000, 2);
    assert!((mean - 1.3).abs() < 0.05, "mean {mean}");
    assert!((var - 1.0).abs() < 0.1, "variance {var}");
}

#[test]
fn standard_normal_target_moments() {
    let (mean, var) = standard_normal_moments(10_000, 3);
    assert!(mean.abs() < 0.05, "mean {mean}");
    assert!((var - 1.0).abs() < 0.1, "variance {var}");
}

#[test]
fn identical_members_union_matches_single_chain() {
    let p = identical_members_p_value(4);
    assert!(p > 0.01, "KS p = {p}");
}

#[test]
fn rigged_member_target_is_gaussian_in_theta() {
    // log target = log N(x_o | θ, 1) − log w + log-Jacobian
    let prior = BoxPrior::new(vec![-20.0], vec![20.0]).unwrap();
    let net = identity_gaussian_member(&prior);
    for u in [-1.0, 0.0, 0.7] {
        let theta = prior.from_unconstrained(&[u])[0];
        let (value, _) = member_log_target(&net, &prior, &[0.4], &[u]).unwrap();
        let s = 1.0 / (1.0 + (-u as f64).exp());
        let expected = -0.5 * (2.0 * std::f64::consts::PI).ln() - 0.5 * (0.4 - theta).powi(2) - 40f64.ln()
            + 40f64.ln()
            + (s * (1.0 - s)).ln();
        assert!((value - expected).abs() < 1e-9, "u = {u}: {value} vs {expected}");
    }
}

#[test]
fn union_histogram_normalizes() {
    let prior = BoxPrior::new(vec![-20.0], vec![20.0]).unwrap();
    let net = identity_gaussian_member(&prior);
    let pair = Ensemble::from_members(vec![net.clone(), net], EnsembleConfig::default(), 0).unwrap();
    let set = run_hmc(&pair, &[0.4], &prior, &hmc_config(2_000), 6).unwrap();
    let values: Vec<f64> = set.samples().iter().map(|t| t[0]).collect();
    let bins = 400;
    let density = histogram_density(&values, -20.0, 20.0, bins);
    let integral: f64 = density.iter().sum::<f64>() * 40.0 / bins as f64;
    assert!((integral - 1.0).abs() < 1e-9, "{integral}");
}

#[test]
fn hmc_is_deterministic_per_seed() {
    let prior = BoxPrior::new(vec![-20.0], vec![20.0]).unwrap();
    let ensemble = Ensemble::from_members(vec![identity_gaussian_member(&prior)], EnsembleConfig::default(), 0).unwrap();
    let a = run_hmc(&ensemble, &[0.4], &prior, &hmc_config(500), 7).unwrap();
    let b = run_hmc(&ensemble, &[0.4], &prior, &hmc_config(500), 7).unwrap();
    assert_eq!(a, b);
}
