//! Shared builders and finite-difference oracles for the integration tests.
#![allow(dead_code)]

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use synlik::acquisition::{maxinf_objective, maxvar_objective, BinomialEntropy};
use synlik::ensemble::{Dataset, EmulatorNet, Ensemble, EnsembleConfig, Record};
use synlik::heads::HeadKind;
use synlik::sampler::member_log_target;
use synlik::simulators::BoxPrior;
use synlik::tensor::{Activation, Mlp};

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOLERANCE: f64 = 1e-4;
/// Smoothness test threshold; a kink inside the stencil shows up at the
/// size of its slope jump, round-off at a few 1e-6 of the scale.
pub const SMOOTHNESS_TOLERANCE: f64 = 1e-3;

/// Relative error with the denominator floored at 1e-2: central
/// differences at `h = 1e-5` carry round-off of a few 1e-7 on the binomial
/// objectives, so components below 1e-2 are compared at 1e-6 absolute.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-2)
}

/// Outcome of comparing an analytic gradient with central differences.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GradCheck {
    pub worst: f64,
    pub checked: usize,
    /// Components skipped because the differences at `h` and `2h` disagree,
    /// i.e. the stencil straddles a kink (ReLU, clamp).
    pub skipped: usize,
}

impl GradCheck {
    pub fn merge(self, other: GradCheck) -> GradCheck {
        GradCheck {
            worst: self.worst.max(other.worst),
            checked: self.checked + other.checked,
            skipped: self.skipped + other.skipped,
        }
    }

    pub fn passes(&self) -> bool {
        self.worst < GRAD_TOLERANCE
    }
}

pub fn compare(analytic: &[f64], numeric: &[Option<f64>]) -> GradCheck {
    assert_eq!(analytic.len(), numeric.len());
    let mut out = GradCheck::default();
    for (a, b) in analytic.iter().zip(numeric) {
        match b {
            Some(b) => {
                out.worst = out.worst.max(rel_err(*a, *b));
                out.checked += 1;
            }
            None => out.skipped += 1,
        }
    }
    out
}

/// Central differences of `f` at `x` on the listed coordinates; `None`
/// where the stencil is not smooth at the tolerance. Two signals catch a
/// kink at distance `δ ≤ 2h`: the `h` and `2h` central differences
/// disagree (`δ > 0`), or the second differences violate their `h²`
/// scaling (`δ ≈ 0`). Neither fires for a smooth function, so an analytic
/// gradient error cannot hide behind a skip.
pub fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], coords: &[usize]) -> Vec<Option<f64>> {
    let h = FD_STEP;
    let centre = f(x);
    let mut probe = x.to_vec();
    coords
        .iter()
        .map(|&i| {
            let mut at = |offset: f64| {
                probe[i] = x[i] + offset;
                let v = f(&probe);
                probe[i] = x[i];
                v
            };
            let (p1, m1, p2, m2) = (at(h), at(-h), at(2.0 * h), at(-2.0 * h));
            let fine = (p1 - m1) / (2.0 * h);
            let coarse = (p2 - m2) / (4.0 * h);
            let curvature_defect = ((p2 - 2.0 * centre + m2) - 4.0 * (p1 - 2.0 * centre + m1)) / (2.0 * h);
            let smooth = rel_err(fine, coarse) < SMOOTHNESS_TOLERANCE
                && curvature_defect.abs() / fine.abs().max(1e-2) < SMOOTHNESS_TOLERANCE;
            smooth.then_some(fine)
        })
        .collect()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Head families used by the experiments, indexed for property tests.
pub fn head_kind(which: usize, dim: usize) -> HeadKind {
    match which % 3 {
        0 => HeadKind::Gaussian { dim: 1 + dim % 3 },
        1 => HeadKind::Binomial {
            dim: 1 + dim % 6,
            trials: 255,
        },
        _ => HeadKind::Categorical { classes: 6 },
    }
}

pub fn activation(which: usize) -> Activation {
    [Activation::Tanh, Activation::Relu, Activation::Softplus, Activation::Sigmoid][which % 4]
}

/// Everything but ReLU is differentiable everywhere.
pub fn is_smooth(which: usize) -> bool {
    activation(which) != Activation::Relu
}

pub fn random_prior<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> BoxPrior {
    let lower: Vec<f64> = (0..dim).map(|_| rng.random_range(-10.0..0.0)).collect();
    let upper = lower.iter().map(|l| l + rng.random_range(0.5..12.0)).collect();
    BoxPrior::new(lower, upper).unwrap()
}

/// A network with weights spread wider than the default initialization so
/// that heads leave their near-uniform regime.
pub fn random_net<R: Rng + ?Sized>(
    rng: &mut R,
    head: HeadKind,
    prior: &BoxPrior,
    hidden: &[usize],
    act: Activation,
) -> EmulatorNet {
    let mut sizes = vec![prior.dim()];
    sizes.extend(hidden);
    sizes.push(head.param_count());
    let mut mlp = Mlp::new(&sizes, act, rng);
    let scale = rng.random_range(0.5..2.5);
    let params: Vec<f64> = mlp.flatten().iter().map(|w| w * scale + 0.1 * normal(rng)).collect();
    mlp.set_flat(&params).unwrap();
    EmulatorNet::new(mlp, head, prior).unwrap()
}

/// Interior point of the box, away from the edges by 1% of each width.
pub fn interior<R: Rng + ?Sized>(rng: &mut R, prior: &BoxPrior) -> Vec<f64> {
    prior
        .lower()
        .iter()
        .zip(prior.upper())
        .map(|(l, u)| {
            let m = 0.01 * (u - l);
            rng.random_range(l + m..u - m)
        })
        .collect()
}

pub fn random_x<R: Rng + ?Sized>(rng: &mut R, head: &HeadKind) -> Vec<f64> {
    match *head {
        HeadKind::Gaussian { dim } => (0..dim).map(|_| 2.0 * normal(rng)).collect(),
        HeadKind::Binomial { dim, trials } => (0..dim).map(|_| rng.random_range(0..=trials) as f64).collect(),
        HeadKind::Categorical { classes } => vec![rng.random_range(0..classes) as f64],
    }
}

pub fn random_dataset<R: Rng + ?Sized>(rng: &mut R, head: &HeadKind, prior: &BoxPrior, n: usize) -> Dataset {
    Dataset::from_records(
        (0..n)
            .map(|i| Record {
                round: i,
                theta: interior(rng, prior),
                x: random_x(rng, head),
            })
            .collect(),
    )
}

/// Up to `limit` coordinates, always including the first and last.
pub fn coordinate_subset<R: Rng + ?Sized>(rng: &mut R, len: usize, limit: usize) -> Vec<usize> {
    if len <= limit {
        return (0..len).collect();
    }
    let mut coords = vec![0, len - 1];
    while coords.len() < limit {
        coords.push(rng.random_range(0..len));
    }
    coords
}

/// `∂ loss / ∂ weights` of one member against central differences.
pub fn weight_grad_error(net: &EmulatorNet, data: &Dataset, coords: &[usize]) -> GradCheck {
    let indices: Vec<usize> = (0..data.len()).collect();
    let (_, grad) = net.loss_and_grad(data, &indices).unwrap();
    let base = net.mlp.flatten();
    let numeric = central_diff(
        |w| {
            let mut probe = net.clone();
            probe.mlp.set_flat(w).unwrap();
            probe.loss_and_grad(data, &indices).unwrap().0
        },
        &base,
        coords,
    );
    let analytic: Vec<f64> = coords.iter().map(|&i| grad[i]).collect();
    compare(&analytic, &numeric)
}

/// `∂ Σ adj⊙f(v) / ∂ (weights, v)` of a bare network.
pub fn mlp_grad_error<R: Rng + ?Sized>(rng: &mut R, mlp: &Mlp, batch: usize) -> GradCheck {
    let input = Array2::from_shape_fn((batch, mlp.input_dim()), |_| normal(rng));
    let adjoint = Array2::from_shape_fn((batch, mlp.output_dim()), |_| normal(rng));
    let objective = |m: &Mlp, v: &Array2<f64>| (m.predict(v.view()).unwrap() * &adjoint).sum();
    let (_, tape) = mlp.forward(input.view()).unwrap();
    let (grads, input_grad) = mlp.backward(&tape, adjoint.view()).unwrap();
    let grads = grads.flatten();
    let base = mlp.flatten();
    let coords: Vec<usize> = (0..base.len()).collect();
    let numeric = central_diff(
        |w| {
            let mut probe = mlp.clone();
            probe.set_flat(w).unwrap();
            objective(&probe, &input)
        },
        &base,
        &coords,
    );
    let mut worst = compare(&grads, &numeric);
    let flat_input = input.iter().copied().collect::<Vec<_>>();
    let coords: Vec<usize> = (0..flat_input.len()).collect();
    let numeric = central_diff(
        |v| objective(mlp, &Array2::from_shape_vec(input.dim(), v.to_vec()).unwrap()),
        &flat_input,
        &coords,
    );
    let analytic: Vec<f64> = input_grad.iter().copied().collect();
    worst = worst.merge(compare(&analytic, &numeric));
    worst
}

/// `∂ log q(x|θ) / ∂ θ` against central differences.
pub fn theta_grad_error(net: &EmulatorNet, theta: &[f64], x: &[f64]) -> GradCheck {
    let (_, grad) = net.log_prob_theta_grad(theta, x).unwrap();
    let coords: Vec<usize> = (0..theta.len()).collect();
    let numeric = central_diff(|t| net.log_prob(t, x).unwrap(), theta, &coords);
    compare(&grad, &numeric)
}

/// Head log-density and entropy gradients in the raw parameters.
pub fn raw_grad_error(head: &HeadKind, raw: &[f64], x: &[f64]) -> GradCheck {
    let coords: Vec<usize> = (0..raw.len()).collect();
    let (_, g) = head.log_prob_grad(raw, x).unwrap();
    let numeric = central_diff(|r| head.log_prob(r, x).unwrap(), raw, &coords);
    let mut worst = compare(&g, &numeric);
    let (_, g) = head.entropy_grad(raw).unwrap();
    let numeric = central_diff(|r| head.entropy(r).unwrap(), raw, &coords);
    worst = worst.merge(compare(&g, &numeric));
    worst
}

/// Gradient of one member's unconstrained posterior target.
pub fn hmc_target_error(net: &EmulatorNet, prior: &BoxPrior, x_o: &[f64], u: &[f64]) -> GradCheck {
    let (_, grad) = member_log_target(net, prior, x_o, u).unwrap();
    let coords: Vec<usize> = (0..u.len()).collect();
    let numeric = central_diff(|v| member_log_target(net, prior, x_o, v).unwrap().0, u, &coords);
    compare(&grad, &numeric)
}

/// MaxVar objective gradient, or `None` on the sentinel.
pub fn maxvar_grad_error(ensemble: &Ensemble, theta: &[f64], x_o: &[f64], prior: &BoxPrior) -> Option<GradCheck> {
    let v = maxvar_objective(ensemble, theta, x_o, prior).unwrap();
    if v.sentinel {
        return None;
    }
    let coords: Vec<usize> = (0..theta.len()).collect();
    let numeric = central_diff(|t| maxvar_objective(ensemble, t, x_o, prior).unwrap().value, theta, &coords);
    Some(compare(&v.grad, &numeric))
}

pub fn maxinf_grad_error(ensemble: &Ensemble, theta: &[f64], mode: BinomialEntropy) -> GradCheck {
    let v = maxinf_objective(ensemble, theta, mode).unwrap();
    let coords: Vec<usize> = (0..theta.len()).collect();
    let numeric = central_diff(|t| maxinf_objective(ensemble, t, mode).unwrap().value, theta, &coords);
    compare(&v.grad, &numeric)
}

pub fn random_ensemble<R: Rng + ?Sized>(
    rng: &mut R,
    head: HeadKind,
    prior: &BoxPrior,
    members: usize,
    hidden: &[usize],
    act: Activation,
) -> Ensemble {
    let nets = (0..members).map(|_| random_net(rng, head, prior, hidden, act)).collect();
    let config = EnsembleConfig {
        members,
        hidden: hidden.to_vec(),
        activation: act,
        ..EnsembleConfig::default()
    };
    Ensemble::from_members(nets, config, 0).unwrap()
}

/// One randomized instance of every gradient family, keyed by family name.
pub fn gradient_suite(seed: u64) -> Vec<(&'static str, GradCheck)> {
    let mut rng = rng(seed);
    let head = head_kind(rng.random_range(0..3), rng.random_range(0..6));
    let act = activation(rng.random_range(0..4));
    let dim = rng.random_range(1..=3);
    let prior = random_prior(&mut rng, dim);
    let hidden: Vec<usize> = (0..rng.random_range(1..=2)).map(|_| rng.random_range(2..=12)).collect();
    let mut out = Vec::new();

    let mlp = Mlp::new(
        &[dim, hidden[0], head.param_count()],
        act,
        &mut rng,
    );
    out.push(("network weights and inputs", mlp_grad_error(&mut rng, &mlp, 3)));

    let net = random_net(&mut rng, head, &prior, &hidden, act);
    let data = random_dataset(&mut rng, &head, &prior, 4);
    let coords = coordinate_subset(&mut rng, net.mlp.num_params(), 40);
    out.push(("loss w.r.t. weights", weight_grad_error(&net, &data, &coords)));

    let theta = interior(&mut rng, &prior);
    let x = random_x(&mut rng, &head);
    out.push(("log q w.r.t. theta", theta_grad_error(&net, &theta, &x)));

    let raw = net.raw_outputs(&[theta.clone()]).unwrap();
    out.push(("head w.r.t. raw outputs", raw_grad_error(&head, raw.row(0).as_slice().unwrap(), &x)));

    let u: Vec<f64> = (0..dim).map(|_| 2.0 * normal(&mut rng)).collect();
    out.push(("hmc target", hmc_target_error(&net, &prior, &x, &u)));

    let members = rng.random_range(2..=5);
    let ensemble = random_ensemble(&mut rng, head, &prior, members, &hidden, act);
    if let Some(e) = maxvar_grad_error(&ensemble, &theta, &x, &prior) {
        out.push(("maxvar objective", e));
    }
    out.push(("maxinf objective", maxinf_grad_error(&ensemble, &theta, BinomialEntropy::Exact)));
    if matches!(head, HeadKind::Binomial { .. }) {
        out.push((
            "maxinf gaussian bound",
            maxinf_grad_error(&ensemble, &theta, BinomialEntropy::GaussianBound),
        ));
    }
    out
}

/// A one-dimensional Gaussian-head member representing `x | θ ~ N(θ, 1)`
/// over `prior`.
pub fn identity_gaussian_member(prior: &BoxPrior) -> EmulatorNet {
    use synlik::ensemble::emulator_from_layers;
    use synlik::heads::GaussianHead;
    use synlik::tensor::Dense;
    // the network sees v = θ·(2/w) + shift; undo that affine map
    let (l, w) = (prior.lower()[0], prior.widths()[0]);
    let scale_raw = GaussianHead {
        mean: vec![0.0],
        chol: ndarray::array![[1.0]],
    }
    .to_raw()[1];
    let layer = Dense {
        weight: ndarray::array![[w / 2.0], [0.0]],
        bias: ndarray::Array1::from(vec![l + w / 2.0, scale_raw]),
    };
    emulator_from_layers(vec![layer], Activation::Identity, HeadKind::Gaussian { dim: 1 }, prior).unwrap()
}

pub fn hmc_config(samples: usize) -> synlik::sampler::HmcConfig {
    synlik::sampler::HmcConfig {
        samples,
        ..Default::default()
    }
}

/// Marginal KS p-values of HMC draws under a flat likelihood against the
/// uniform box. KS assumes independent draws, so each marginal is thinned
/// to its effective sample size first.
pub fn prior_recovery_p_values(prior: &BoxPrior, samples: usize, seed: u64) -> Vec<f64> {
    use synlik::evaluation::{ks_one_sample, thin_to_effective};
    use synlik::sampler::{sample_box_target, BoxTarget};
    let target = BoxTarget::new(prior, |t: &[f64]| Ok((0.0, vec![0.0; t.len()])));
    let chain = sample_box_target(&target, prior, &hmc_config(samples), &mut rng(seed)).unwrap();
    assert!(chain.samples.iter().all(|t| prior.contains(t)));
    (0..prior.dim())
        .map(|d| {
            let (l, w) = (prior.lower()[d], prior.widths()[d]);
            let values: Vec<f64> = chain.samples.iter().map(|t| t[d]).collect();
            ks_one_sample(&thin_to_effective(&values), |x| ((x - l) / w).clamp(0.0, 1.0)).1
        })
        .collect()
}

/// Posterior mean and variance under the rigged `N(x_o | θ, 1)` emulator on
/// a wide box; the closed form is `N(x_o, 1)`.
pub fn conjugate_moments(x_o: f64, samples: usize, seed: u64) -> (f64, f64) {
    use synlik::evaluation::mean_sem;
    use synlik::sampler::run_hmc;
    let prior = BoxPrior::new(vec![-20.0], vec![20.0]).unwrap();
    let ensemble = Ensemble::from_members(vec![identity_gaussian_member(&prior)], EnsembleConfig::default(), 0).unwrap();
    let set = run_hmc(&ensemble, &[x_o], &prior, &hmc_config(samples), seed).unwrap();
    let values: Vec<f64> = set.samples().iter().map(|t| t[0]).collect();
    let (mean, _) = mean_sem(&values);
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (values.len() - 1) as f64;
    (mean, var)
}

/// A standard normal in the sampling space.
pub struct StandardNormalTarget(pub usize);

impl synlik::sampler::Target for StandardNormalTarget {
    fn dim(&self) -> usize {
        self.0
    }

    fn log_density_grad(&self, u: &[f64]) -> synlik::Result<(f64, Vec<f64>)> {
        Ok((-0.5 * u.iter().map(|v| v * v).sum::<f64>(), u.iter().map(|v| -v).collect()))
    }
}

pub fn standard_normal_moments(samples: usize, seed: u64) -> (f64, f64) {
    use synlik::sampler::run_chain;
    let out = run_chain(&StandardNormalTarget(1), &[0.5], &hmc_config(samples), &mut rng(seed)).unwrap();
    let n = out.samples.len() as f64;
    let mean = out.samples.iter().map(|u| u[0]).sum::<f64>() / n;
    let var = out.samples.iter().map(|u| (u[0] - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// One chain's draws of coordinate `d`, thinned to near independence.
pub fn thinned_union(set: &synlik::sampler::PosteriorSampleSet, d: usize) -> Vec<f64> {
    set.chains
        .iter()
        .flat_map(|c| {
            let values: Vec<f64> = c.samples.iter().map(|t| t[d]).collect();
            synlik::evaluation::thin_to_effective(&values)
        })
        .collect()
}

/// KS p-value between an identical-member union and a single chain of the
/// same total length.
pub fn identical_members_p_value(seed: u64) -> f64 {
    use synlik::evaluation::ks_two_sample;
    use synlik::sampler::run_hmc;
    let prior = BoxPrior::new(vec![-20.0], vec![20.0]).unwrap();
    let net = identity_gaussian_member(&prior);
    let pair = Ensemble::from_members(vec![net.clone(), net.clone()], EnsembleConfig::default(), 0).unwrap();
    let single = Ensemble::from_members(vec![net], EnsembleConfig::default(), 0).unwrap();
    let union = run_hmc(&pair, &[0.4], &prior, &hmc_config(5_000), seed).unwrap();
    let alone = run_hmc(&single, &[0.4], &prior, &hmc_config(10_000), seed + 1).unwrap();
    assert_eq!(union.len(), alone.len());
    ks_two_sample(&thinned_union(&union, 0), &thinned_union(&alone, 0)).1
}

/// Normalized density of `N(mean, sd²)` on a 1-D grid.
pub fn gaussian_on_grid(grid: &synlik::grid::Grid, mean: f64, sd: f64) -> Vec<f64> {
    let logs: Vec<f64> = grid.axis(0).iter().map(|t| -0.5 * ((t - mean) / sd).powi(2)).collect();
    grid.normalize_log_density(&logs).unwrap()
}

/// TV oracle cases as `(name, computed, expected)`: identical densities,
/// disjoint supports, and the unit-variance Gaussian pair one apart.
pub fn tv_oracles() -> Vec<(&'static str, f64, f64)> {
    use synlik::evaluation::total_variation;
    use synlik::grid::Grid;
    let prior = BoxPrior::new(vec![-10.0], vec![10.0]).unwrap();
    let grid = Grid::over_box(&prior, 20_001).unwrap();
    let volumes = grid.cell_volumes();
    let p = gaussian_on_grid(&grid, 0.0, 1.0);
    let q = gaussian_on_grid(&grid, 1.0, 1.0);
    // box densities on [-5,-1] and [1,5]
    let boxed = |lo: f64, hi: f64| {
        let raw: Vec<f64> = grid.axis(0).iter().map(|t| if *t >= lo && *t <= hi { 1.0 } else { 0.0 }).collect();
        let z = grid.integrate(&raw);
        raw.iter().map(|v| v / z).collect::<Vec<f64>>()
    };
    let half_unit = statrs::function::erf::erf(0.5 / std::f64::consts::SQRT_2);
    vec![
        ("identical densities", total_variation(&p, &p, &volumes).unwrap(), 0.0),
        (
            "disjoint supports",
            total_variation(&boxed(-5.0, -1.0), &boxed(1.0, 5.0), &volumes).unwrap(),
            1.0,
        ),
        ("N(0,1) vs N(1,1)", total_variation(&p, &q, &volumes).unwrap(), half_unit),
    ]
}

/// Indicator encoding used by categorical moments.
pub fn as_vector(head: &HeadKind, x: &[f64]) -> Vec<f64> {
    match *head {
        HeadKind::Categorical { classes } => {
            let mut v = vec![0.0; classes];
            v[x[0] as usize] = 1.0;
            v
        }
        _ => x.to_vec(),
    }
}

/// Empirical mean and covariance of `n` hierarchical draws (pick a member,
/// then sample its head) against the total predictive moments, within 3
/// standard errors per entry.
pub fn hierarchical_check(ensemble: &Ensemble, theta: &[f64], n: usize, seed: u64) -> Result<(), String> {
    let mut rng = rng(seed);
    let head = ensemble.head();
    let raws: Vec<Vec<f64>> = ensemble
        .members
        .iter()
        .map(|net| net.raw_outputs(&[theta.to_vec()]).unwrap().row(0).to_vec())
        .collect();
    let moments = ensemble.predictive_moments(theta).unwrap();
    let total = moments.covariance.to_dense();
    let d = moments.mean.len();
    let draws: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let m = rng.random_range(0..raws.len());
            as_vector(&head, &head.sample(&raws[m], &mut rng).unwrap())
        })
        .collect();
    let mean: Vec<f64> = (0..d).map(|i| draws.iter().map(|x| x[i]).sum::<f64>() / n as f64).collect();
    for i in 0..d {
        let se = (total[[i, i]] / n as f64).sqrt();
        if (mean[i] - moments.mean[i]).abs() >= 3.0 * se {
            return Err(format!("{head:?} mean {i}: empirical {} vs {} (se {se})", mean[i], moments.mean[i]));
        }
        for j in i..d {
            let products: Vec<f64> = draws.iter().map(|x| (x[i] - mean[i]) * (x[j] - mean[j])).collect();
            let c = products.iter().sum::<f64>() / (n - 1) as f64;
            let spread = products.iter().map(|p| (p - c).powi(2)).sum::<f64>() / (n - 1) as f64;
            let se = (spread / n as f64).sqrt();
            if (c - total[[i, j]]).abs() >= 3.0 * se {
                return Err(format!("{head:?} cov[{i},{j}]: empirical {c} vs {} (se {se})", total[[i, j]]));
            }
        }
    }
    Ok(())
}
