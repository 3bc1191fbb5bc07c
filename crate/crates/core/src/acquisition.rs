//! Acquisition rules that pick the next simulation parameter.
//!
//! * MaxVar (local emulators): `log p(θ) + ½ log Var_m[exp log q(x_o|θ;φ_m)]`,
//!   the ensemble variance of the unnormalized posterior.
//! * MaxInf (global emulators): mutual information between data and
//!   network weights, `H[x|θ,D] − mean_m H[x|θ,φ_m]`.
//! * Uniform: a prior draw.
//!
//! Objectives are maximized by Adam ascent from several prior-drawn
//! starts, with `θ` reparameterized through a sigmoid onto the prior box.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ensemble::Ensemble;
use crate::error::{Error, Result};
use crate::heads::{cholesky, cholesky_inverse, GaussianHead, HeadKind, LnChoose};
use crate::simulators::BoxPrior;
use crate::tensor::{adam_step, log_sum_exp, sigmoid, softmax, AdamConfig, AdamState, Tape};

/// Value reported when the objective cannot be evaluated meaningfully
/// (zero variance or vanishing likelihoods).
pub const SENTINEL: f64 = -1e300;

const GAUSSIAN_JITTER: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rule {
    MaxVar,
    MaxInf,
    Uniform,
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Rule::MaxVar => "maxvar",
            Rule::MaxInf => "maxinf",
            Rule::Uniform => "uniform",
        })
    }
}

impl FromStr for Rule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "maxvar" => Ok(Rule::MaxVar),
            "maxinf" => Ok(Rule::MaxInf),
            "uniform" => Ok(Rule::Uniform),
            other => Err(Error::Config(format!("unknown acquisition rule '{other}'"))),
        }
    }
}

/// How the predictive entropy of binomial heads is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum BinomialEntropy {
    /// Exact per-pixel mixture entropy, summed over pixels.
    #[default]
    Exact,
    /// Gaussian upper bound from the total variance per pixel.
    GaussianBound,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AcquisitionConfig {
    pub rule: Rule,
    pub restarts: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub binomial_entropy: BinomialEntropy,
    /// Stop acquiring once the best objective drops below this value.
    pub objective_floor: Option<f64>,
}

impl Default for AcquisitionConfig {
    fn default() -> Self {
        Self {
            rule: Rule::MaxVar,
            restarts: 20,
            steps: 200,
            learning_rate: 0.05,
            binomial_entropy: BinomialEntropy::Exact,
            objective_floor: None,
        }
    }
}

/// Objective value at one `θ` with its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveValue {
    pub value: f64,
    pub grad: Vec<f64>,
    /// True when `value` is [`SENTINEL`].
    pub sentinel: bool,
}

impl ObjectiveValue {
    fn sentinel(dim: usize) -> Self {
        Self {
            value: SENTINEL,
            grad: vec![0.0; dim],
            sentinel: true,
        }
    }
}

/// Anything that can be maximized by [`maximize`].
pub trait Objective {
    fn dim(&self) -> usize;
    fn evaluate(&self, thetas: &[Vec<f64>]) -> Result<Vec<ObjectiveValue>>;
}

/// Per-member forward pass over a batch of `θ`.
struct MemberPass {
    raw: Array2<f64>,
    tape: Tape,
}

fn forward_all(ensemble: &Ensemble, thetas: &[Vec<f64>]) -> Result<Vec<MemberPass>> {
    ensemble
        .members
        .iter()
        .map(|net| {
            let (raw, tape) = net.forward(thetas)?;
            Ok(MemberPass { raw, tape })
        })
        .collect()
}

/// Adds `Σ_m adjoint_m` pulled back to `θ` into `grads`.
fn accumulate_theta_grads(
    ensemble: &Ensemble,
    passes: &[MemberPass],
    adjoints: Vec<Array2<f64>>,
    grads: &mut [Vec<f64>],
) -> Result<()> {
    for ((net, pass), adj) in ensemble.members.iter().zip(passes).zip(adjoints) {
        let g = net.theta_gradient(&pass.tape, adj.view())?;
        for (b, row) in g.rows().into_iter().enumerate() {
            for (acc, v) in grads[b].iter_mut().zip(row) {
                *acc += v;
            }
        }
    }
    Ok(())
}

/// MaxVar objective for a fixed observation.
pub struct MaxVar<'a> {
    pub ensemble: &'a Ensemble,
    pub observed: &'a [f64],
    pub prior: &'a BoxPrior,
}

impl Objective for MaxVar<'_> {
    fn dim(&self) -> usize {
        self.ensemble.theta_dim()
    }

    fn evaluate(&self, thetas: &[Vec<f64>]) -> Result<Vec<ObjectiveValue>> {
        let m = self.ensemble.len();
        if m < 2 {
            return Err(Error::Config("maxvar needs at least two ensemble members".into()));
        }
        let d = self.dim();
        let head = self.ensemble.head();
        let passes = forward_all(self.ensemble, thetas)?;
        // log-likelihoods [member][batch] and raw-output gradients
        let mut logliks = vec![vec![0.0; thetas.len()]; m];
        let mut raw_grads = Vec::with_capacity(m);
        for (k, pass) in passes.iter().enumerate() {
            let mut g = Array2::zeros(pass.raw.dim());
            for b in 0..thetas.len() {
                let (lp, gr) = head.log_prob_grad(pass.raw.row(b).as_slice().expect("contiguous"), self.observed)?;
                logliks[k][b] = lp;
                g.row_mut(b).assign(&ndarray::ArrayView1::from(&gr));
            }
            raw_grads.push(g);
        }
        let mut out = Vec::with_capacity(thetas.len());
        let mut scales = vec![vec![0.0; thetas.len()]; m];
        for (b, theta) in thetas.iter().enumerate() {
            let log_prior = self.prior.log_density(theta);
            if log_prior == f64::NEG_INFINITY {
                out.push(ObjectiveValue {
                    value: f64::NEG_INFINITY,
                    grad: vec![0.0; d],
                    sentinel: false,
                });
                continue;
            }
            let ls: Vec<f64> = (0..m).map(|k| logliks[k][b]).collect();
            match maxvar_value(&ls) {
                Some((half_log_var, dl)) => {
                    for k in 0..m {
                        scales[k][b] = dl[k];
                    }
                    out.push(ObjectiveValue {
                        value: log_prior + half_log_var,
                        grad: vec![0.0; d],
                        sentinel: false,
                    });
                }
                None => out.push(ObjectiveValue::sentinel(d)),
            }
        }
        let adjoints: Vec<Array2<f64>> = raw_grads
            .into_iter()
            .zip(&scales)
            .map(|(mut g, s)| {
                for (b, mut row) in g.rows_mut().into_iter().enumerate() {
                    row *= s[b];
                }
                g
            })
            .collect();
        let mut grads: Vec<Vec<f64>> = out.iter().map(|o| o.grad.clone()).collect();
        accumulate_theta_grads(self.ensemble, &passes, adjoints, &mut grads)?;
        for (o, g) in out.iter_mut().zip(grads) {
            if !o.sentinel && o.value.is_finite() {
                o.grad = g;
            }
        }
        Ok(out)
    }
}

/// `½ log` of the sample variance (denominator `M − 1`) of `exp(ℓ_m)` and
/// its derivative in each `ℓ_m`, computed on shifted exponentials.
/// `None` when the variance vanishes or is not finite.
pub fn maxvar_value(logliks: &[f64]) -> Option<(f64, Vec<f64>)> {
    let m = logliks.len();
    let shift = logliks.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !shift.is_finite() || m < 2 {
        return None;
    }
    let e: Vec<f64> = logliks.iter().map(|l| (l - shift).exp()).collect();
    let mean = e.iter().sum::<f64>() / m as f64;
    let var = e.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1) as f64;
    if !(var > 0.0) || !var.is_finite() {
        return None;
    }
    let value = shift + 0.5 * var.ln();
    let dl = e
        .iter()
        .map(|&ek| (ek - mean) * ek / ((m - 1) as f64 * var))
        .collect();
    Some((value, dl))
}

/// MaxVar objective at a single `θ`.
pub fn maxvar_objective(ensemble: &Ensemble, theta: &[f64], observed: &[f64], prior: &BoxPrior) -> Result<ObjectiveValue> {
    let obj = MaxVar {
        ensemble,
        observed,
        prior,
    };
    Ok(obj.evaluate(&[theta.to_vec()])?.remove(0))
}

/// MaxInf (mutual information) objective.
pub struct MaxInf<'a> {
    pub ensemble: &'a Ensemble,
    pub binomial_entropy: BinomialEntropy,
}

impl Objective for MaxInf<'_> {
    fn dim(&self) -> usize {
        self.ensemble.theta_dim()
    }

    fn evaluate(&self, thetas: &[Vec<f64>]) -> Result<Vec<ObjectiveValue>> {
        let m = self.ensemble.len();
        let head = self.ensemble.head();
        let passes = forward_all(self.ensemble, thetas)?;
        let mut adjoints: Vec<Array2<f64>> = passes.iter().map(|p| Array2::zeros(p.raw.dim())).collect();
        let mut out = Vec::with_capacity(thetas.len());
        let table = match head {
            HeadKind::Binomial { trials, .. } => Some(LnChoose::new(trials)),
            _ => None,
        };
        for b in 0..thetas.len() {
            let raws: Vec<&[f64]> = passes
                .iter()
                .map(|p| p.raw.row(b).to_slice().expect("contiguous"))
                .collect();
            let (value, raw_grads) = match head {
                HeadKind::Categorical { .. } => categorical_mutual_information(&raws),
                HeadKind::Gaussian { dim } => gaussian_information_bound(dim, &raws),
                HeadKind::Binomial { .. } => {
                    let table = table.as_ref().expect("binomial table");
                    match self.binomial_entropy {
                        BinomialEntropy::Exact => binomial_mutual_information(table, &raws),
                        BinomialEntropy::GaussianBound => binomial_gaussian_bound(table, &raws),
                    }
                }
            };
            for k in 0..m {
                adjoints[k].row_mut(b).assign(&ndarray::ArrayView1::from(&raw_grads[k]));
            }
            out.push(ObjectiveValue {
                value,
                grad: vec![0.0; self.dim()],
                sentinel: false,
            });
        }
        let mut grads: Vec<Vec<f64>> = out.iter().map(|o| o.grad.clone()).collect();
        accumulate_theta_grads(self.ensemble, &passes, adjoints, &mut grads)?;
        for (o, g) in out.iter_mut().zip(grads) {
            o.grad = g;
        }
        Ok(out)
    }
}

pub fn maxinf_objective(ensemble: &Ensemble, theta: &[f64], mode: BinomialEntropy) -> Result<ObjectiveValue> {
    let obj = MaxInf {
        ensemble,
        binomial_entropy: mode,
    };
    Ok(obj.evaluate(&[theta.to_vec()])?.remove(0))
}

/// Exact mutual information of a uniform mixture of categoricals, with
/// gradients in each member's logits.
fn categorical_mutual_information(logits: &[&[f64]]) -> (f64, Vec<Vec<f64>>) {
    let m = logits.len() as f64;
    let probs: Vec<Vec<f64>> = logits.iter().map(|z| softmax(z)).collect();
    let k = probs[0].len();
    let mix: Vec<f64> = (0..k).map(|j| probs.iter().map(|p| p[j]).sum::<f64>() / m).collect();
    let log_mix: Vec<f64> = mix.iter().map(|p| p.max(f64::MIN_POSITIVE).ln()).collect();
    let h_mix = -mix.iter().zip(&log_mix).map(|(p, l)| p * l).sum::<f64>();
    let mut h_members = 0.0;
    let mut grads = Vec::with_capacity(logits.len());
    for z in logits {
        let lse = log_sum_exp(z);
        let logp: Vec<f64> = z.iter().map(|v| v - lse).collect();
        let p: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
        let h = -p.iter().zip(&logp).map(|(p, l)| p * l).sum::<f64>();
        h_members += h / m;
        // d/dz_j of f(π) is π_j (g_j − Σ_k π_k g_k) with g = ∂f/∂π
        let g: Vec<f64> = (0..k).map(|j| (-log_mix[j] + logp[j]) / m).collect();
        let pg: f64 = p.iter().zip(&g).map(|(p, g)| p * g).sum();
        grads.push((0..k).map(|j| p[j] * (g[j] - pg)).collect());
    }
    (h_mix - h_members, grads)
}

/// Gaussian upper bound on the mixture entropy minus the mean member
/// entropy: `½ ln|Σ_D| − mean_m Σ_i ln L_m,ii`, with Σ_D the total
/// covariance (mean of covariances plus covariance of means).
fn gaussian_information_bound(dim: usize, raws: &[&[f64]]) -> (f64, Vec<Vec<f64>>) {
    let m = raws.len() as f64;
    let heads: Vec<GaussianHead> = raws.iter().map(|r| GaussianHead::from_raw(dim, r)).collect();
    let mean: Vec<f64> = (0..dim)
        .map(|i| heads.iter().map(|h| h.mean[i]).sum::<f64>() / m)
        .collect();
    let mut total = Array2::<f64>::zeros((dim, dim));
    for h in &heads {
        total += &(h.covariance() / m);
        for i in 0..dim {
            for j in 0..dim {
                total[[i, j]] += (h.mean[i] - mean[i]) * (h.mean[j] - mean[j]) / m;
            }
        }
    }
    let chol = cholesky(&total).unwrap_or_else(|| {
        log::warn!("total covariance not positive definite; adding jitter {GAUSSIAN_JITTER}");
        for i in 0..dim {
            total[[i, i]] += GAUSSIAN_JITTER;
        }
        cholesky(&total).expect("jittered covariance is positive definite")
    });
    let inv = cholesky_inverse(&chol);
    let mut value: f64 = (0..dim).map(|i| chol[[i, i]].ln()).sum();
    let mut grads = Vec::with_capacity(raws.len());
    for (h, raw) in heads.iter().zip(raws) {
        let mut g = vec![0.0; raw.len()];
        let centered: Vec<f64> = (0..dim).map(|i| h.mean[i] - mean[i]).collect();
        for i in 0..dim {
            g[i] = (0..dim).map(|j| inv[[i, j]] * centered[j]).sum::<f64>() / m;
        }
        let al = inv.dot(&h.chol);
        for i in 0..dim {
            let l = h.chol[[i, i]];
            value -= l.ln() / m;
            g[dim + i] = (al[[i, i]] / m - 1.0 / (m * l)) * sigmoid(raw[dim + i]);
        }
        let mut idx = 2 * dim;
        for i in 1..dim {
            for j in 0..i {
                g[idx] = al[[i, j]] / m;
                idx += 1;
            }
        }
        grads.push(g);
    }
    (value, grads)
}

/// Support window outside of which a binomial pmf is negligible.
fn binomial_window(n: usize, p: f64) -> (usize, usize) {
    let nf = n as f64;
    let sd = (nf * p * (1.0 - p)).sqrt();
    let lo = (nf * p - 12.0 * sd - 2.0).floor().max(0.0) as usize;
    let hi = (nf * p + 12.0 * sd + 2.0).ceil().min(nf) as usize;
    (lo, hi)
}

/// Fills `pmf[lo..=hi]` by the ratio recurrence started from an exact
/// value at `lo`; entries outside the window are left at zero.
fn binomial_pmf_window(table: &LnChoose, ratios: &[f64], a: f64, lo: usize, hi: usize, pmf: &mut [f64]) {
    let n = table.trials() as f64;
    let (lp, lq) = (-crate::tensor::softplus(-a), -crate::tensor::softplus(a));
    let odds = a.exp();
    let mut v = (table.get(lo) + lo as f64 * lp + (n - lo as f64) * lq).exp();
    pmf[lo] = v;
    for k in lo..hi {
        v *= ratios[k] * odds;
        pmf[k + 1] = v;
    }
}

/// Exact per-dimension mixture entropy minus mean member entropy for
/// independent binomial heads, with gradients in each member's logits.
fn binomial_mutual_information(table: &LnChoose, logits: &[&[f64]]) -> (f64, Vec<Vec<f64>>) {
    let m = logits.len();
    let mf = m as f64;
    let n = table.trials();
    let nf = n as f64;
    let dims = logits[0].len();
    let ratios: Vec<f64> = (0..n).map(|k| (n - k) as f64 / (k + 1) as f64).collect();
    let mut pmfs = vec![vec![0.0; n + 1]; m];
    let mut windows = vec![(0, 0); m];
    let mut mix = vec![0.0; n + 1];
    let mut log_mix = vec![0.0; n + 1];
    let mut grads = vec![vec![0.0; dims]; m];
    let mut value = 0.0;
    for i in 0..dims {
        let (mut lo_all, mut hi_all) = (n, 0);
        for k in 0..m {
            let a = logits[k][i];
            let p = sigmoid(a);
            let (lo, hi) = binomial_window(n, p);
            pmfs[k][lo..=hi].iter_mut().for_each(|v| *v = 0.0);
            binomial_pmf_window(table, &ratios, a, lo, hi, &mut pmfs[k]);
            windows[k] = (lo, hi);
            lo_all = lo_all.min(lo);
            hi_all = hi_all.max(hi);
        }
        for j in lo_all..=hi_all {
            let mut s = 0.0;
            for k in 0..m {
                let (lo, hi) = windows[k];
                if j >= lo && j <= hi {
                    s += pmfs[k][j];
                }
            }
            mix[j] = s / mf;
            log_mix[j] = if mix[j] > 0.0 { mix[j].ln() } else { 0.0 };
            value -= mix[j] * log_mix[j];
        }
        for k in 0..m {
            let a = logits[k][i];
            let p = sigmoid(a);
            let (lo, hi) = windows[k];
            let mut mean_lnc = 0.0;
            let mut cov_lnc = 0.0;
            let mut cov_mix = 0.0;
            for j in lo..=hi {
                let w = pmfs[k][j];
                let c = j as f64 - nf * p;
                mean_lnc += w * table.get(j);
                cov_lnc += w * table.get(j) * c;
                cov_mix += w * log_mix[j] * c;
            }
            let lp = -crate::tensor::softplus(-a);
            let lq = -crate::tensor::softplus(a);
            let h = -mean_lnc - nf * p * lp - nf * (1.0 - p) * lq;
            let dh = -cov_lnc - a * nf * p * (1.0 - p);
            value -= h / mf;
            grads[k][i] = (-cov_mix - dh) / mf;
            // clear the window for the next dimension
            pmfs[k][lo..=hi].iter_mut().for_each(|v| *v = 0.0);
        }
        mix[lo_all..=hi_all].iter_mut().for_each(|v| *v = 0.0);
    }
    (value, grads)
}

/// Gaussian-bound variant for binomial heads: per-dimension
/// `½ ln(2πe σ²_D)` minus exact member entropies.
fn binomial_gaussian_bound(table: &LnChoose, logits: &[&[f64]]) -> (f64, Vec<Vec<f64>>) {
    let m = logits.len();
    let mf = m as f64;
    let nf = table.trials() as f64;
    let dims = logits[0].len();
    let mut scratch = vec![0.0; table.trials() + 1];
    let mut grads = vec![vec![0.0; dims]; m];
    let mut value = 0.0;
    let two_pi_e = 2.0 * std::f64::consts::PI * std::f64::consts::E;
    for i in 0..dims {
        let p: Vec<f64> = (0..m).map(|k| sigmoid(logits[k][i])).collect();
        let mu_bar = p.iter().map(|p| nf * p).sum::<f64>() / mf;
        let var = p
            .iter()
            .map(|&p| nf * p * (1.0 - p) + (nf * p - mu_bar).powi(2))
            .sum::<f64>()
            / mf;
        value += 0.5 * (two_pi_e * var).ln();
        for k in 0..m {
            let dvar_dp = (nf * (1.0 - 2.0 * p[k]) + 2.0 * nf * (nf * p[k] - mu_bar)) / mf;
            let (h, dh) = table.entropy_grad(logits[k][i], &mut scratch);
            value -= h / mf;
            grads[k][i] = dvar_dp * p[k] * (1.0 - p[k]) / (2.0 * var) - dh / mf;
        }
    }
    (value, grads)
}

/// One optimizer restart: where it began, where it ended, final value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestartTrace {
    pub start: Vec<f64>,
    pub end: Vec<f64>,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionResult {
    pub rule: Rule,
    pub theta: Vec<f64>,
    /// Absent for the uniform rule and for fallbacks.
    pub objective: Option<f64>,
    pub restarts: Vec<RestartTrace>,
    /// Set when every restart ended on the sentinel and a prior draw was used.
    pub fallback: bool,
}

/// Multi-restart Adam ascent of `objective` inside the prior box.
///
/// The best final value wins; ties go to the lowest restart index.
pub fn maximize<R: Rng + ?Sized>(
    objective: &dyn Objective,
    prior: &BoxPrior,
    config: &AcquisitionConfig,
    rule: Rule,
    rng: &mut R,
) -> Result<AcquisitionResult> {
    if config.restarts == 0 {
        return Err(Error::Config("acquisition needs at least one restart".into()));
    }
    let starts: Vec<Vec<f64>> = (0..config.restarts).map(|_| prior.sample(rng)).collect();
    let mut us: Vec<Vec<f64>> = starts.iter().map(|s| prior.to_unconstrained(s)).collect();
    let adam = AdamConfig::with_learning_rate(config.learning_rate);
    let mut states: Vec<AdamState> = us.iter().map(|u| AdamState::new(u.len())).collect();
    for _ in 0..config.steps {
        let thetas: Vec<Vec<f64>> = us.iter().map(|u| prior.from_unconstrained(u)).collect();
        let values = objective.evaluate(&thetas)?;
        for ((u, state), v) in us.iter_mut().zip(&mut states).zip(&values) {
            if v.sentinel || !v.value.is_finite() {
                continue;
            }
            let jac = prior.unconstrained_jacobian(u);
            let descent: Vec<f64> = v.grad.iter().zip(&jac).map(|(g, j)| -g * j).collect();
            if descent.iter().all(|g| g.is_finite()) {
                adam_step(u, &descent, state, &adam)?;
            }
        }
    }
    let ends: Vec<Vec<f64>> = us.iter().map(|u| prior.from_unconstrained(u)).collect();
    let finals = objective.evaluate(&ends)?;
    let restarts: Vec<RestartTrace> = starts
        .into_iter()
        .zip(ends)
        .zip(&finals)
        .map(|((start, end), v)| RestartTrace {
            start,
            end,
            value: v.value,
        })
        .collect();
    let mut best: Option<usize> = None;
    for (i, v) in finals.iter().enumerate() {
        if v.sentinel || !v.value.is_finite() {
            continue;
        }
        if best.is_none_or(|b| v.value > finals[b].value) {
            best = Some(i);
        }
    }
    Ok(match best {
        Some(i) => AcquisitionResult {
            rule,
            theta: restarts[i].end.clone(),
            objective: Some(finals[i].value),
            restarts,
            fallback: false,
        },
        None => {
            log::warn!("all {} restarts ended on the sentinel; drawing from the prior", config.restarts);
            AcquisitionResult {
                rule,
                theta: prior.sample(rng),
                objective: None,
                restarts,
                fallback: true,
            }
        }
    })
}

/// Proposes the next simulation parameter under `config.rule`.
pub fn propose<R: Rng + ?Sized>(
    ensemble: &Ensemble,
    observed: Option<&[f64]>,
    prior: &BoxPrior,
    config: &AcquisitionConfig,
    rng: &mut R,
) -> Result<AcquisitionResult> {
    match config.rule {
        Rule::Uniform => Ok(AcquisitionResult {
            rule: Rule::Uniform,
            theta: prior.sample(rng),
            objective: None,
            restarts: Vec::new(),
            fallback: false,
        }),
        Rule::MaxVar => {
            let observed = observed.ok_or_else(|| Error::Config("maxvar requires observed data".into()))?;
            let obj = MaxVar {
                ensemble,
                observed,
                prior,
            };
            maximize(&obj, prior, config, Rule::MaxVar, rng)
        }
        Rule::MaxInf => {
            let obj = MaxInf {
                ensemble,
                binomial_entropy: config.binomial_entropy,
            };
            maximize(&obj, prior, config, Rule::MaxInf, rng)
        }
    }
}
