//! Hamiltonian Monte Carlo over the synthetic-likelihood posterior.
//!
//! Each ensemble member gets its own chain targeting
//! `q(x_o | θ; φ_m) p(θ)`; the union of chains is the posterior draw.
//! Chains run in an unconstrained space `u` with `θ = l + (h - l) σ(u)`, so
//! the box support never has to be enforced by rejection.

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::ensemble::{EmulatorNet, Ensemble};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::simulators::BoxPrior;
use crate::tensor::{log_sigmoid, sigmoid};

/// Energy error beyond which a trajectory counts as divergent.
const DIVERGENCE: f64 = 1000.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HmcConfig {
    /// Initial leapfrog step size; adapted during burn-in.
    pub step_size: f64,
    pub leapfrog_steps: usize,
    pub burn_in: usize,
    /// Kept samples per chain.
    pub samples: usize,
    pub target_accept: f64,
    /// Prior draws screened for the best starting point.
    pub init_candidates: usize,
    /// Relative uniform jitter of the step size on each iteration, which
    /// breaks the periodic orbits a fixed trajectory length can lock into.
    pub step_jitter: f64,
}

impl Default for HmcConfig {
    fn default() -> Self {
        Self {
            step_size: 0.1,
            leapfrog_steps: 20,
            burn_in: 500,
            samples: 2000,
            target_accept: 0.8,
            init_candidates: 20,
            step_jitter: 0.1,
        }
    }
}

impl HmcConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::Config(format!("hmc step size must be positive, got {}", self.step_size)));
        }
        if self.leapfrog_steps == 0 {
            return Err(Error::Config("hmc needs at least one leapfrog step".into()));
        }
        if self.samples == 0 {
            return Err(Error::Config("hmc needs at least one kept sample".into()));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::Config("hmc target acceptance must lie in (0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.step_jitter) {
            return Err(Error::Config("hmc step jitter must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// A differentiable log density over the sampling space.
pub trait Target {
    fn dim(&self) -> usize;
    fn log_density_grad(&self, u: &[f64]) -> Result<(f64, Vec<f64>)>;
}

/// A log-likelihood over the prior box, pulled into unconstrained space:
/// `log L(θ(u)) + log p(θ(u)) + Σ log |dθ_i/du_i|`.
pub struct BoxTarget<'a, F> {
    pub prior: &'a BoxPrior,
    pub loglik: F,
}

impl<'a, F> BoxTarget<'a, F>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    pub fn new(prior: &'a BoxPrior, loglik: F) -> Self {
        Self { prior, loglik }
    }
}

impl<F> Target for BoxTarget<'_, F>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    fn dim(&self) -> usize {
        self.prior.dim()
    }

    fn log_density_grad(&self, u: &[f64]) -> Result<(f64, Vec<f64>)> {
        if u.len() != self.dim() {
            return Err(Error::dim("unconstrained point", self.dim(), u.len()));
        }
        let theta = self.prior.from_unconstrained(u);
        let (ll, g_theta) = (self.loglik)(&theta)?;
        // the uniform prior density is constant inside the box, and θ(u)
        // never leaves it
        let log_prior = -self.prior.widths().iter().map(|w| w.ln()).sum::<f64>();
        let mut value = ll + log_prior;
        let mut grad = Vec::with_capacity(u.len());
        for ((&ui, w), gt) in u.iter().zip(self.prior.widths()).zip(g_theta) {
            let s = sigmoid(ui);
            value += w.ln() + log_sigmoid(ui) + log_sigmoid(-ui);
            grad.push(gt * w * s * (1.0 - s) + (1.0 - 2.0 * s));
        }
        Ok((value, grad))
    }
}

/// Log target of one ensemble member at unconstrained `u`.
pub fn member_log_target(net: &EmulatorNet, prior: &BoxPrior, x_o: &[f64], u: &[f64]) -> Result<(f64, Vec<f64>)> {
    BoxTarget::new(prior, |theta: &[f64]| net.log_prob_theta_grad(theta, x_o)).log_density_grad(u)
}

/// Output of a single chain, in the sampling space.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainOutput {
    pub samples: Vec<Vec<f64>>,
    /// Fraction of accepted proposals after burn-in.
    pub acceptance_rate: f64,
    /// Step size frozen at the end of burn-in.
    pub step_size: f64,
    pub divergences: usize,
}

/// Nesterov dual averaging of the log step size.
struct DualAveraging {
    mu: f64,
    target: f64,
    h_bar: f64,
    log_eps: f64,
    log_eps_bar: f64,
    iter: f64,
}

impl DualAveraging {
    const GAMMA: f64 = 0.05;
    const T0: f64 = 10.0;
    const KAPPA: f64 = 0.75;

    fn new(step: f64, target: f64) -> Self {
        Self {
            mu: (10.0 * step).ln(),
            target,
            h_bar: 0.0,
            log_eps: step.ln(),
            log_eps_bar: 0.0,
            iter: 0.0,
        }
    }

    fn update(&mut self, accept_prob: f64) -> f64 {
        self.iter += 1.0;
        let m = self.iter;
        let w = 1.0 / (m + Self::T0);
        self.h_bar = (1.0 - w) * self.h_bar + w * (self.target - accept_prob);
        self.log_eps = self.mu - m.sqrt() / Self::GAMMA * self.h_bar;
        let eta = m.powf(-Self::KAPPA);
        self.log_eps_bar = eta * self.log_eps + (1.0 - eta) * self.log_eps_bar;
        self.log_eps.exp()
    }

    fn final_step(&self) -> f64 {
        self.log_eps_bar.exp()
    }
}

/// One leapfrog trajectory. Returns the end point with its log density and
/// gradient, or `None` when the trajectory hit a non-finite density.
fn leapfrog<T: Target + ?Sized>(
    target: &T,
    u: &[f64],
    p: &[f64],
    grad: &[f64],
    eps: f64,
    steps: usize,
) -> Result<Option<(Vec<f64>, Vec<f64>, f64, Vec<f64>)>> {
    let mut u = u.to_vec();
    let mut p = p.to_vec();
    let mut g = grad.to_vec();
    let mut lp = f64::NAN;
    for _ in 0..steps {
        for (pi, gi) in p.iter_mut().zip(&g) {
            *pi += 0.5 * eps * gi;
        }
        for (ui, pi) in u.iter_mut().zip(&p) {
            *ui += eps * pi;
        }
        let (v, gn) = match target.log_density_grad(&u) {
            Ok(r) => r,
            Err(Error::NonFinite(_)) | Err(Error::Numerical(_)) => return Ok(None),
            Err(e) => return Err(e),
        };
        if !v.is_finite() || gn.iter().any(|x| !x.is_finite()) {
            return Ok(None);
        }
        lp = v;
        g = gn;
        for (pi, gi) in p.iter_mut().zip(&g) {
            *pi += 0.5 * eps * gi;
        }
    }
    Ok(Some((u, p, lp, g)))
}

fn kinetic(p: &[f64]) -> f64 {
    0.5 * p.iter().map(|x| x * x).sum::<f64>()
}

/// Runs one chain from `init` with identity mass matrix.
pub fn run_chain<T, R>(target: &T, init: &[f64], config: &HmcConfig, rng: &mut R) -> Result<ChainOutput>
where
    T: Target + ?Sized,
    R: Rng + ?Sized,
{
    config.validate()?;
    let d = target.dim();
    if init.len() != d {
        return Err(Error::dim("chain start", d, init.len()));
    }
    let mut u = init.to_vec();
    let (mut lp, mut grad) = target.log_density_grad(&u)?;
    if !lp.is_finite() {
        return Err(Error::Numerical("chain start has non-finite log density".into()));
    }
    let mut adapt = DualAveraging::new(config.step_size, config.target_accept);
    let mut eps = config.step_size;
    let mut samples = Vec::with_capacity(config.samples);
    let mut accepted = 0usize;
    let mut divergences = 0usize;
    for iter in 0..config.burn_in + config.samples {
        if iter == config.burn_in && config.burn_in > 0 {
            eps = adapt.final_step();
        }
        let jitter = if config.step_jitter > 0.0 {
            1.0 + config.step_jitter * (2.0 * rng.random::<f64>() - 1.0)
        } else {
            1.0
        };
        let p0: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let h0 = -lp + kinetic(&p0);
        let proposal = leapfrog(target, &u, &p0, &grad, eps * jitter, config.leapfrog_steps)?;
        let (accept_prob, next) = match proposal {
            Some((un, pn, lpn, gn)) => {
                let h1 = -lpn + kinetic(&pn);
                let dh = h1 - h0;
                if !dh.is_finite() || dh > DIVERGENCE {
                    divergences += 1;
                    (0.0, None)
                } else {
                    ((-dh).exp().min(1.0), Some((un, lpn, gn)))
                }
            }
            None => {
                divergences += 1;
                (0.0, None)
            }
        };
        let uniform: f64 = rng.random();
        let take = next.is_some() && uniform < accept_prob;
        if take {
            let (un, lpn, gn) = next.expect("checked");
            u = un;
            lp = lpn;
            grad = gn;
        }
        if iter < config.burn_in {
            eps = adapt.update(accept_prob);
        } else {
            accepted += usize::from(take);
            samples.push(u.clone());
        }
    }
    Ok(ChainOutput {
        samples,
        acceptance_rate: accepted as f64 / config.samples as f64,
        step_size: eps,
        divergences,
    })
}

/// Best of `n` prior draws under `target`, in unconstrained coordinates.
fn initial_point<T, R>(target: &T, prior: &BoxPrior, n: usize, rng: &mut R) -> Result<Vec<f64>>
where
    T: Target + ?Sized,
    R: Rng + ?Sized,
{
    let mut best: Option<(f64, Vec<f64>)> = None;
    for _ in 0..n.max(1) {
        let u = prior.to_unconstrained(&prior.sample(rng));
        let (lp, _) = target.log_density_grad(&u)?;
        if lp.is_finite() && best.as_ref().is_none_or(|(b, _)| lp > *b) {
            best = Some((lp, u));
        }
    }
    best.map(|(_, u)| u)
        .ok_or_else(|| Error::Numerical("no prior draw has a finite posterior density".into()))
}

/// Samples a box-supported target, returning draws mapped back onto the box.
pub fn sample_box_target<T, R>(target: &T, prior: &BoxPrior, config: &HmcConfig, rng: &mut R) -> Result<Chain>
where
    T: Target + ?Sized,
    R: Rng + ?Sized,
{
    let init = initial_point(target, prior, config.init_candidates, rng)?;
    let out = run_chain(target, &init, config, rng)?;
    Ok(Chain {
        member: 0,
        samples: out.samples.iter().map(|u| prior.from_unconstrained(u)).collect(),
        acceptance_rate: out.acceptance_rate,
        step_size: out.step_size,
        divergences: out.divergences,
    })
}

/// A chain's draws on the prior box.
#[derive(Debug, Clone, PartialEq)]
pub struct Chain {
    pub member: usize,
    pub samples: Vec<Vec<f64>>,
    pub acceptance_rate: f64,
    pub step_size: f64,
    pub divergences: usize,
}

/// Union of per-member chains.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PosteriorSampleSet {
    pub chains: Vec<Chain>,
    pub warnings: Vec<String>,
}

impl PosteriorSampleSet {
    pub fn len(&self) -> usize {
        self.chains.iter().map(|c| c.samples.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.chains
            .iter()
            .find_map(|c| c.samples.first().map(Vec::len))
            .unwrap_or(0)
    }

    /// All draws, chains concatenated in member order.
    pub fn samples(&self) -> Vec<Vec<f64>> {
        self.chains.iter().flat_map(|c| c.samples.iter().cloned()).collect()
    }

    /// Member tag of every draw, aligned with [`PosteriorSampleSet::samples`].
    pub fn members(&self) -> Vec<usize> {
        self.chains
            .iter()
            .flat_map(|c| std::iter::repeat_n(c.member, c.samples.len()))
            .collect()
    }

    pub fn acceptance_rates(&self) -> Vec<f64> {
        self.chains.iter().map(|c| c.acceptance_rate).collect()
    }

    /// Writes `member,sample_index,theta_1..theta_p`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let p = self.dim();
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["member".to_string(), "sample_index".to_string()];
        header.extend((1..=p).map(|i| format!("theta_{i}")));
        w.write_record(&header)?;
        for chain in &self.chains {
            for (i, theta) in chain.samples.iter().enumerate() {
                let mut row = vec![chain.member.to_string(), i.to_string()];
                row.extend(theta.iter().map(|v| v.to_string()));
                w.write_record(&row)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a sample CSV back; chain diagnostics are not stored and come
    /// back as NaN.
    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let mut chains: Vec<Chain> = Vec::new();
        for row in r.records() {
            let row = row?;
            let parse = |s: &str| -> Result<f64> {
                s.parse::<f64>()
                    .map_err(|e| Error::Archive(format!("bad number {s:?} in sample csv: {e}")))
            };
            let member = parse(&row[0])? as usize;
            let theta = row.iter().skip(2).map(parse).collect::<Result<Vec<_>>>()?;
            match chains.last_mut() {
                Some(c) if c.member == member => c.samples.push(theta),
                _ => chains.push(Chain {
                    member,
                    samples: vec![theta],
                    acceptance_rate: f64::NAN,
                    step_size: f64::NAN,
                    divergences: 0,
                }),
            }
        }
        Ok(Self {
            chains,
            warnings: Vec::new(),
        })
    }
}

/// Runs one chain per ensemble member against `x_o`. Chain `m` draws from
/// its own random stream, so the result does not depend on chain order.
pub fn run_hmc(
    ensemble: &Ensemble,
    x_o: &[f64],
    prior: &BoxPrior,
    config: &HmcConfig,
    seed: u64,
) -> Result<PosteriorSampleSet> {
    config.validate()?;
    ensemble.head().check_support(x_o)?;
    let mut set = PosteriorSampleSet::default();
    for (m, net) in ensemble.members.iter().enumerate() {
        let mut rng = rng::stream(seed, Stream::Hmc, m as u64);
        let target = BoxTarget::new(prior, |theta: &[f64]| net.log_prob_theta_grad(theta, x_o));
        let mut chain = sample_box_target(&target, prior, config, &mut rng)?;
        chain.member = m;
        if chain.acceptance_rate < 0.2 {
            let msg = format!(
                "member {m}: acceptance rate {:.3} below 0.2 after adaptation",
                chain.acceptance_rate
            );
            log::warn!("{msg}");
            set.warnings.push(msg);
        }
        set.chains.push(chain);
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Quadratic;

    impl Target for Quadratic {
        fn dim(&self) -> usize {
            2
        }

        fn log_density_grad(&self, u: &[f64]) -> Result<(f64, Vec<f64>)> {
            Ok((-0.5 * (u[0] * u[0] + u[1] * u[1]), vec![-u[0], -u[1]]))
        }
    }

    #[test]
    fn small_steps_on_quadratic_accept_almost_always() {
        let cfg = HmcConfig {
            step_size: 0.05,
            burn_in: 0,
            samples: 500,
            ..HmcConfig::default()
        };
        let mut rng = rng::stream(1, Stream::Hmc, 0);
        let out = run_chain(&Quadratic, &[0.3, -0.2], &cfg, &mut rng).unwrap();
        assert!(out.acceptance_rate > 0.9, "{}", out.acceptance_rate);
        assert_eq!(out.samples.len(), 500);
    }

    #[test]
    fn box_target_constant_likelihood_is_log_jacobian() {
        let prior = BoxPrior::new(vec![-2.0], vec![6.0]).unwrap();
        let t = BoxTarget::new(&prior, |_: &[f64]| Ok((0.0, vec![0.0])));
        // at u = 0 the Jacobian is 8·¼ = 2 and the prior density 1/8
        let (v, g) = t.log_density_grad(&[0.0]).unwrap();
        assert!((v - (2.0f64 / 8.0).ln()).abs() < 1e-12);
        assert!(g[0].abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_config() {
        let cfg = HmcConfig {
            leapfrog_steps: 0,
            ..HmcConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let cfg = HmcConfig {
            step_size: 0.0,
            ..HmcConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn csv_round_trip() {
        let set = PosteriorSampleSet {
            chains: vec![
                Chain {
                    member: 0,
                    samples: vec![vec![0.1, 1.0 / 3.0], vec![-2.5, 7.0]],
                    acceptance_rate: 0.8,
                    step_size: 0.1,
                    divergences: 0,
                },
                Chain {
                    member: 1,
                    samples: vec![vec![1e-17, 3.0]],
                    acceptance_rate: 0.7,
                    step_size: 0.1,
                    divergences: 0,
                },
            ],
            warnings: vec![],
        };
        let mut buf = Vec::new();
        set.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("member,sample_index,theta_1,theta_2\n"));
        let back = PosteriorSampleSet::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.samples(), set.samples());
        assert_eq!(back.members(), vec![0, 0, 1]);
    }
}
