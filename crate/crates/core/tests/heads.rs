//! Distribution heads and the ensemble predictive: normalization, sampling
//! against analytic moments, and the total-covariance decomposition.

mod common;

use common::*;
use ndarray::Array2;
use proptest::prelude::*;
use rand::Rng;
use synlik::acquisition::{maxinf_objective, BinomialEntropy};
use synlik::ensemble::Ensemble;
use synlik::heads::HeadKind;
use synlik::tensor::{log_sum_exp, Activation};

fn support(head: &HeadKind) -> Vec<Vec<f64>> {
    match *head {
        HeadKind::Binomial { trials, .. } => (0..=trials).map(|k| vec![k as f64]).collect(),
        HeadKind::Categorical { classes } => (0..classes).map(|k| vec![k as f64]).collect(),
        HeadKind::Gaussian { .. } => unreachable!("continuous head"),
    }
}

proptest! {
    #[test]
    fn discrete_heads_normalize(raw in prop::collection::vec(-6.0f64..6.0, 6), trials in 1u32..40) {
        let cat = HeadKind::Categorical { classes: 6 };
        let total: f64 = support(&cat).iter().map(|x| cat.log_prob(&raw, x).unwrap().exp()).sum();
        prop_assert!((total - 1.0).abs() < 1e-10);
        let bin = HeadKind::Binomial { dim: 1, trials };
        let total: f64 = support(&bin).iter().map(|x| bin.log_prob(&raw[..1], x).unwrap().exp()).sum();
        prop_assert!((total - 1.0).abs() < 1e-10);
    }

    #[test]
    fn categorical_mutual_information_is_non_negative(seed in any::<u64>(), members in 1usize..6, act in 0usize..4) {
        let mut rng = rng(seed);
        let prior = random_prior(&mut rng, 2);
        let ensemble = random_ensemble(&mut rng, HeadKind::Categorical { classes: 6 }, &prior, members, &[8], activation(act));
        let theta = interior(&mut rng, &prior);
        let v = maxinf_objective(&ensemble, &theta, BinomialEntropy::Exact).unwrap();
        prop_assert!(v.value >= -1e-9, "{}", v.value);
    }

    #[test]
    fn identical_members_carry_no_information(seed in any::<u64>(), head in 0usize..3, size in 0usize..6, members in 1usize..5) {
        let mut rng = rng(seed);
        let head = head_kind(head, size);
        let prior = random_prior(&mut rng, 2);
        let net = random_net(&mut rng, head, &prior, &[8], Activation::Tanh);
        let ensemble = Ensemble::from_members(vec![net; members], Default::default(), 0).unwrap();
        let theta = interior(&mut rng, &prior);
        let exact = maxinf_objective(&ensemble, &theta, BinomialEntropy::Exact).unwrap().value;
        prop_assert!(exact.abs() < 1e-9, "{head:?}: {exact}");
        // for binomial heads the bound keeps its slack over the exact entropy
        let bound = maxinf_objective(&ensemble, &theta, BinomialEntropy::GaussianBound).unwrap().value;
        match head {
            HeadKind::Binomial { .. } => prop_assert!(bound >= -1e-9, "{bound}"),
            _ => prop_assert!(bound.abs() < 1e-9, "{head:?}: {bound}"),
        }
    }

    #[test]
    fn categorical_total_covariance_matches_mixture(seed in any::<u64>(), members in 1usize..6) {
        let mut rng = rng(seed);
        let head = HeadKind::Categorical { classes: 6 };
        let prior = random_prior(&mut rng, 2);
        let ensemble = random_ensemble(&mut rng, head, &prior, members, &[8], Activation::Tanh);
        let theta = interior(&mut rng, &prior);
        let moments = ensemble.predictive_moments(&theta).unwrap();
        let mix: Vec<f64> = (0..6)
            .map(|k| ensemble.predictive_logprob(&theta, &[k as f64]).unwrap().exp())
            .collect();
        let direct = Array2::from_shape_fn((6, 6), |(i, j)| if i == j { mix[i] * (1.0 - mix[i]) } else { -mix[i] * mix[j] });
        let total = moments.covariance.to_dense();
        for i in 0..6 {
            prop_assert!((moments.mean[i] - mix[i]).abs() < 1e-10);
            for j in 0..6 {
                prop_assert!((total[[i, j]] - direct[[i, j]]).abs() < 1e-10);
            }
        }
    }
}

/// Sample moments against analytic ones, within 4 standard errors.
fn check_sampling(head: HeadKind, raw: &[f64], seed: u64) {
    let n = 20_000;
    let mut rng = rng(seed);
    let moments = head.moments(raw).unwrap();
    let d = moments.mean.len();
    let cov = moments.covariance.to_dense();
    let draws: Vec<Vec<f64>> = (0..n)
        .map(|_| as_vector(&head, &head.sample(raw, &mut rng).unwrap()))
        .collect();
    let nf = n as f64;
    for i in 0..d {
        let mean = draws.iter().map(|x| x[i]).sum::<f64>() / nf;
        let var = draws.iter().map(|x| (x[i] - mean).powi(2)).sum::<f64>() / nf;
        let m4 = draws.iter().map(|x| (x[i] - mean).powi(4)).sum::<f64>() / nf;
        let se_mean = (cov[[i, i]] / nf).sqrt().max(1e-12);
        assert!((mean - moments.mean[i]).abs() < 4.0 * se_mean, "{head:?} mean {i}: {mean} vs {}", moments.mean[i]);
        let se_var = ((m4 - var * var) / nf).sqrt().max(1e-12);
        assert!((var - cov[[i, i]]).abs() < 4.0 * se_var, "{head:?} var {i}: {var} vs {}", cov[[i, i]]);
    }
}

#[test]
fn head_samples_match_moments() {
    let mut rng = rng(3);
    for (k, head) in [
        HeadKind::Gaussian { dim: 2 },
        HeadKind::Binomial { dim: 3, trials: 255 },
        HeadKind::Categorical { classes: 6 },
    ]
    .into_iter()
    .enumerate()
    {
        for case in 0..3 {
            let raw: Vec<f64> = (0..head.param_count()).map(|_| rng.random_range(-1.5..1.5)).collect();
            check_sampling(head, &raw, 100 * k as u64 + case);
        }
    }
}

#[test]
fn total_covariance_matches_hierarchical_sampling() {
    let mut rng = rng(11);
    for head in [
        HeadKind::Gaussian { dim: 2 },
        HeadKind::Binomial { dim: 2, trials: 255 },
        HeadKind::Categorical { classes: 3 },
    ] {
        let prior = random_prior(&mut rng, 2);
        let ensemble = random_ensemble(&mut rng, head, &prior, 3, &[8], Activation::Tanh);
        let theta = interior(&mut rng, &prior);
        if let Err(e) = hierarchical_check(&ensemble, &theta, 1_000_000, 5) {
            panic!("{e}");
        }
    }
}

#[test]
fn gaussian_bound_dominates_monte_carlo_information() {
    let n = 100_000;
    for seed in 0..8 {
        let mut rng = rng(seed);
        let head = HeadKind::Gaussian { dim: 1 + (seed as usize % 2) };
        let prior = random_prior(&mut rng, 2);
        let ensemble = random_ensemble(&mut rng, head, &prior, 2, &[8], Activation::Tanh);
        let theta = interior(&mut rng, &prior);
        let bound = maxinf_objective(&ensemble, &theta, BinomialEntropy::Exact).unwrap().value;
        let raws: Vec<Vec<f64>> = ensemble
            .members
            .iter()
            .map(|net| net.raw_outputs(&[theta.clone()]).unwrap().row(0).to_vec())
            .collect();
        let member_entropy: f64 = raws.iter().map(|r| head.entropy(r).unwrap()).sum::<f64>() / 2.0;
        let neg_log_mix: Vec<f64> = (0..n)
            .map(|_| {
                let x = head.sample(&raws[rng.random_range(0..2)], &mut rng).unwrap();
                let lps: Vec<f64> = raws.iter().map(|r| head.log_prob(r, &x).unwrap()).collect();
                -(log_sum_exp(&lps) - 2f64.ln())
            })
            .collect();
        let h_mix = neg_log_mix.iter().sum::<f64>() / n as f64;
        let se = (neg_log_mix.iter().map(|v| (v - h_mix).powi(2)).sum::<f64>() / (n - 1) as f64 / n as f64).sqrt();
        let mc_information = h_mix - member_entropy;
        assert!(bound >= mc_information - 3.0 * se, "seed {seed}: bound {bound} < {mc_information} − 3·{se}");
    }
}
