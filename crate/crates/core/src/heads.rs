//! Distribution heads that turn raw network outputs into conditional
//! densities `q(x | θ)`.
//!
//! Every head exposes the exact log-density together with its gradient
//! with respect to the raw outputs, the exact entropy (and its gradient),
//! first and second moments, and sampling.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{log_sigmoid, log_sum_exp, sigmoid, softmax, softplus};

/// Lower bound added to softplus-transformed scale outputs.
pub const MIN_SCALE: f64 = 1e-6;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Output family of an emulator network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase", deny_unknown_fields)]
pub enum HeadKind {
    /// Multivariate normal with mean and Cholesky factor of the covariance.
    Gaussian { dim: usize },
    /// Independent binomial per dimension with a fixed number of trials.
    Binomial { dim: usize, trials: u32 },
    /// Single categorical variable; data is the class index.
    Categorical { classes: usize },
}

/// Mean and covariance of a head.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub mean: Vec<f64>,
    pub covariance: Covariance,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Covariance {
    Full(Array2<f64>),
    Diagonal(Vec<f64>),
}

impl Covariance {
    pub fn to_dense(&self) -> Array2<f64> {
        match self {
            Covariance::Full(m) => m.clone(),
            Covariance::Diagonal(d) => Array2::from_diag(&ndarray::Array1::from(d.clone())),
        }
    }
}

impl HeadKind {
    /// Number of raw network outputs consumed by the head.
    pub fn param_count(&self) -> usize {
        match *self {
            HeadKind::Gaussian { dim } => dim + dim * (dim + 1) / 2,
            HeadKind::Binomial { dim, .. } => dim,
            HeadKind::Categorical { classes } => classes,
        }
    }

    /// Length of a data vector `x`.
    pub fn data_dim(&self) -> usize {
        match *self {
            HeadKind::Gaussian { dim } | HeadKind::Binomial { dim, .. } => dim,
            HeadKind::Categorical { .. } => 1,
        }
    }

    /// Moment vectors are indicator vectors for a categorical head.
    pub fn moment_dim(&self) -> usize {
        match *self {
            HeadKind::Gaussian { dim } | HeadKind::Binomial { dim, .. } => dim,
            HeadKind::Categorical { classes } => classes,
        }
    }

    pub fn check_support(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.data_dim() {
            return Err(Error::dim("data vector", self.data_dim(), x.len()));
        }
        match *self {
            HeadKind::Gaussian { .. } => {
                if let Some(v) = x.iter().find(|v| !v.is_finite()) {
                    return Err(Error::Domain(format!("gaussian observation {v} is not finite")));
                }
            }
            HeadKind::Binomial { trials, .. } => {
                if let Some(v) = x
                    .iter()
                    .find(|&&v| !(v.fract() == 0.0 && v >= 0.0 && v <= trials as f64))
                {
                    return Err(Error::Domain(format!("binomial count {v} outside 0..={trials}")));
                }
            }
            HeadKind::Categorical { classes } => {
                let v = x[0];
                if !(v.fract() == 0.0 && v >= 0.0 && v < classes as f64) {
                    return Err(Error::Domain(format!("class {v} outside 0..{classes}")));
                }
            }
        }
        Ok(())
    }

    fn check_raw(&self, raw: &[f64]) -> Result<()> {
        if raw.len() != self.param_count() {
            return Err(Error::dim("head parameters", self.param_count(), raw.len()));
        }
        Ok(())
    }

    pub fn log_prob(&self, raw: &[f64], x: &[f64]) -> Result<f64> {
        Ok(self.log_prob_grad(raw, x)?.0)
    }

    /// Log-density and its gradient with respect to the raw outputs.
    pub fn log_prob_grad(&self, raw: &[f64], x: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.check_raw(raw)?;
        self.check_support(x)?;
        Ok(match *self {
            HeadKind::Gaussian { dim } => GaussianHead::from_raw(dim, raw).log_prob_grad(raw, x),
            HeadKind::Binomial { trials, .. } => binomial_log_prob_grad(trials, raw, x),
            HeadKind::Categorical { .. } => {
                let class = x[0] as usize;
                let lse = log_sum_exp(raw);
                let mut grad: Vec<f64> = raw.iter().map(|z| -(z - lse).exp()).collect();
                grad[class] += 1.0;
                (raw[class] - lse, grad)
            }
        })
    }

    pub fn entropy(&self, raw: &[f64]) -> Result<f64> {
        Ok(self.entropy_grad(raw)?.0)
    }

    /// Exact entropy and its gradient with respect to the raw outputs.
    pub fn entropy_grad(&self, raw: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.check_raw(raw)?;
        Ok(match *self {
            HeadKind::Gaussian { dim } => {
                let head = GaussianHead::from_raw(dim, raw);
                let mut grad = vec![0.0; raw.len()];
                let mut h = 0.5 * dim as f64 * (1.0 + LN_2PI);
                for i in 0..dim {
                    let l = head.chol[[i, i]];
                    h += l.ln();
                    grad[dim + i] = sigmoid(raw[dim + i]) / l;
                }
                (h, grad)
            }
            HeadKind::Binomial { trials, .. } => {
                let table = LnChoose::new(trials);
                let mut pmf = vec![0.0; trials as usize + 1];
                let mut total = 0.0;
                let mut grad = Vec::with_capacity(raw.len());
                for &a in raw {
                    let (h, g) = table.entropy_grad(a, &mut pmf);
                    total += h;
                    grad.push(g);
                }
                (total, grad)
            }
            HeadKind::Categorical { .. } => {
                let p = softmax(raw);
                let logp: Vec<f64> = raw
                    .iter()
                    .map({
                        let lse = log_sum_exp(raw);
                        move |z| z - lse
                    })
                    .collect();
                let h: f64 = -p.iter().zip(&logp).map(|(p, l)| p * l).sum::<f64>();
                let grad = p.iter().zip(&logp).map(|(p, l)| -p * (l + h)).collect();
                (h, grad)
            }
        })
    }

    pub fn moments(&self, raw: &[f64]) -> Result<Moments> {
        self.check_raw(raw)?;
        Ok(match *self {
            HeadKind::Gaussian { dim } => {
                let head = GaussianHead::from_raw(dim, raw);
                Moments {
                    covariance: Covariance::Full(head.covariance()),
                    mean: head.mean,
                }
            }
            HeadKind::Binomial { trials, .. } => {
                let n = trials as f64;
                let p: Vec<f64> = raw.iter().map(|&a| sigmoid(a)).collect();
                Moments {
                    mean: p.iter().map(|p| n * p).collect(),
                    covariance: Covariance::Diagonal(p.iter().map(|p| n * p * (1.0 - p)).collect()),
                }
            }
            HeadKind::Categorical { classes } => {
                let p = softmax(raw);
                let cov = Array2::from_shape_fn((classes, classes), |(i, j)| {
                    if i == j {
                        p[i] * (1.0 - p[i])
                    } else {
                        -p[i] * p[j]
                    }
                });
                Moments {
                    mean: p,
                    covariance: Covariance::Full(cov),
                }
            }
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, raw: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        self.check_raw(raw)?;
        Ok(match *self {
            HeadKind::Gaussian { dim } => {
                let head = GaussianHead::from_raw(dim, raw);
                let eps: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                (0..dim)
                    .map(|i| head.mean[i] + (0..=i).map(|j| head.chol[[i, j]] * eps[j]).sum::<f64>())
                    .collect()
            }
            HeadKind::Binomial { trials, .. } => raw
                .iter()
                .map(|&a| {
                    let dist = Binomial::new(trials as u64, sigmoid(a)).expect("probability in (0, 1)");
                    dist.sample(rng) as f64
                })
                .collect(),
            HeadKind::Categorical { .. } => vec![sample_categorical(&softmax(raw), rng) as f64],
        })
    }
}

pub(crate) fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    probs.len() - 1
}

/// Mean and lower-triangular Cholesky factor decoded from raw outputs.
///
/// Layout: `dim` means, `dim` diagonal entries (softplus + [`MIN_SCALE`]),
/// then strictly-lower entries row by row.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianHead {
    pub mean: Vec<f64>,
    pub chol: Array2<f64>,
}

impl GaussianHead {
    pub fn from_raw(dim: usize, raw: &[f64]) -> Self {
        let mean = raw[..dim].to_vec();
        let mut chol = Array2::zeros((dim, dim));
        for i in 0..dim {
            chol[[i, i]] = softplus(raw[dim + i]) + MIN_SCALE;
        }
        let mut idx = 2 * dim;
        for i in 1..dim {
            for j in 0..i {
                chol[[i, j]] = raw[idx];
                idx += 1;
            }
        }
        Self { mean, chol }
    }

    /// Raw outputs that decode to the given mean and Cholesky factor.
    pub fn to_raw(&self) -> Vec<f64> {
        let dim = self.mean.len();
        let mut raw = self.mean.clone();
        for i in 0..dim {
            let s = self.chol[[i, i]] - MIN_SCALE;
            // inverse softplus
            raw.push(if s > 30.0 { s } else { s.exp_m1().ln() });
        }
        for i in 1..dim {
            for j in 0..i {
                raw.push(self.chol[[i, j]]);
            }
        }
        raw
    }

    pub fn covariance(&self) -> Array2<f64> {
        self.chol.dot(&self.chol.t())
    }

    fn log_prob_grad(&self, raw: &[f64], x: &[f64]) -> (f64, Vec<f64>) {
        let dim = self.mean.len();
        let r: Vec<f64> = x.iter().zip(&self.mean).map(|(x, m)| x - m).collect();
        let z = forward_substitute(&self.chol, &r);
        let w = backward_substitute_transposed(&self.chol, &z);
        let mut logp = -0.5 * dim as f64 * LN_2PI - 0.5 * z.iter().map(|v| v * v).sum::<f64>();
        let mut grad = vec![0.0; raw.len()];
        grad[..dim].copy_from_slice(&w);
        for i in 0..dim {
            let l = self.chol[[i, i]];
            logp -= l.ln();
            grad[dim + i] = (w[i] * z[i] - 1.0 / l) * sigmoid(raw[dim + i]);
        }
        let mut idx = 2 * dim;
        for i in 1..dim {
            for j in 0..i {
                grad[idx] = w[i] * z[j];
                idx += 1;
            }
        }
        (logp, grad)
    }
}

/// Solves `L z = r` for lower-triangular `L`.
pub(crate) fn forward_substitute(l: &Array2<f64>, r: &[f64]) -> Vec<f64> {
    let n = r.len();
    let mut z = vec![0.0; n];
    for i in 0..n {
        let s: f64 = (0..i).map(|j| l[[i, j]] * z[j]).sum();
        z[i] = (r[i] - s) / l[[i, i]];
    }
    z
}

/// Solves `Lᵀ w = z` for lower-triangular `L`.
pub(crate) fn backward_substitute_transposed(l: &Array2<f64>, z: &[f64]) -> Vec<f64> {
    let n = z.len();
    let mut w = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|j| l[[j, i]] * w[j]).sum();
        w[i] = (z[i] - s) / l[[i, i]];
    }
    w
}

/// Cholesky factorization of a symmetric matrix; `None` if not positive definite.
pub fn cholesky(a: &Array2<f64>) -> Option<Array2<f64>> {
    let n = a.nrows();
    let mut l = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[[i, k]] * l[[j, k]]).sum();
            if i == j {
                let d = a[[i, i]] - s;
                if !(d > 0.0) || !d.is_finite() {
                    return None;
                }
                l[[i, i]] = d.sqrt();
            } else {
                l[[i, j]] = (a[[i, j]] - s) / l[[j, j]];
            }
        }
    }
    Some(l)
}

/// Inverse of a symmetric positive-definite matrix from its Cholesky factor.
pub(crate) fn cholesky_inverse(l: &Array2<f64>) -> Array2<f64> {
    let n = l.nrows();
    let mut inv = Array2::zeros((n, n));
    for c in 0..n {
        let mut e = vec![0.0; n];
        e[c] = 1.0;
        let z = forward_substitute(l, &e);
        let col = backward_substitute_transposed(l, &z);
        for r in 0..n {
            inv[[r, c]] = col[r];
        }
    }
    inv
}

fn binomial_log_prob_grad(trials: u32, raw: &[f64], x: &[f64]) -> (f64, Vec<f64>) {
    let table = LnChoose::new(trials);
    let n = trials as f64;
    let mut logp = 0.0;
    let mut grad = Vec::with_capacity(raw.len());
    for (&a, &k) in raw.iter().zip(x) {
        logp += table.get(k as usize) + k * log_sigmoid(a) + (n - k) * log_sigmoid(-a);
        grad.push(k - n * sigmoid(a));
    }
    (logp, grad)
}

/// Table of `ln C(n, k)` for `k = 0..=n`.
#[derive(Debug, Clone)]
pub struct LnChoose {
    values: Vec<f64>,
}

impl LnChoose {
    pub fn new(n: u32) -> Self {
        let n = n as usize;
        let mut ln_fact = vec![0.0; n + 1];
        for k in 1..=n {
            ln_fact[k] = ln_fact[k - 1] + (k as f64).ln();
        }
        let values = (0..=n).map(|k| ln_fact[n] - ln_fact[k] - ln_fact[n - k]).collect();
        Self { values }
    }

    pub fn trials(&self) -> usize {
        self.values.len() - 1
    }

    pub fn get(&self, k: usize) -> f64 {
        self.values[k]
    }

    /// Fills `out` with the pmf for logit `a`.
    pub fn pmf_into(&self, a: f64, out: &mut [f64]) {
        let n = self.trials() as f64;
        let (lp, lq) = (log_sigmoid(a), log_sigmoid(-a));
        for (k, slot) in out.iter_mut().enumerate() {
            let k_f = k as f64;
            *slot = (self.values[k] + k_f * lp + (n - k_f) * lq).exp();
        }
    }

    /// Exact entropy of `Bin(n, sigmoid(a))` and its derivative in `a`.
    /// `scratch` must hold `n + 1` values and receives the pmf.
    pub fn entropy_grad(&self, a: f64, scratch: &mut [f64]) -> (f64, f64) {
        self.pmf_into(a, scratch);
        let n = self.trials() as f64;
        let p = sigmoid(a);
        let (lp, lq) = (log_sigmoid(a), log_sigmoid(-a));
        let mut mean_lnc = 0.0;
        let mut cov_lnc = 0.0;
        for (k, &pk) in scratch.iter().enumerate() {
            mean_lnc += pk * self.values[k];
            cov_lnc += pk * self.values[k] * (k as f64 - n * p);
        }
        let h = -mean_lnc - n * p * lp - n * (1.0 - p) * lq;
        let dh = -cov_lnc - a * n * p * (1.0 - p);
        (h, dh)
    }
}
