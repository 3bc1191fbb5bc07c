//! Benchmark forward models: a Gaussian model with a cubic mean, a blob
//! image renderer with binomial pixel noise, and a single-compartment
//! Hodgkin-Huxley neuron summarized by its spike count.

use std::path::Path;

use rand::Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::heads::HeadKind;
use crate::tensor::{logit, sigmoid};

/// Uniform prior over an axis-aligned box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxPrior {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl BoxPrior {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        let prior = Self { lower, upper };
        prior.validate()?;
        Ok(prior)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lower.len() != self.upper.len() || self.lower.is_empty() {
            return Err(Error::Config(format!(
                "prior bounds have lengths {} and {}",
                self.lower.len(),
                self.upper.len()
            )));
        }
        if self.lower.iter().zip(&self.upper).any(|(l, u)| !(l < u) || !l.is_finite() || !u.is_finite()) {
            return Err(Error::Config("prior requires finite lower < upper in every dimension".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn widths(&self) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(l, u)| u - l).collect()
    }

    pub fn contains(&self, theta: &[f64]) -> bool {
        theta.len() == self.dim()
            && theta
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(t, (l, u))| t >= l && t <= u)
    }

    /// Log density: constant inside the box, `-inf` outside.
    pub fn log_density(&self, theta: &[f64]) -> f64 {
        if self.contains(theta) {
            -self.widths().iter().map(|w| w.ln()).sum::<f64>()
        } else {
            f64::NEG_INFINITY
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(&l, &u)| l + (u - l) * rng.random::<f64>())
            .collect()
    }

    /// Maps unconstrained coordinates onto the box through a sigmoid.
    pub fn from_unconstrained(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(&u, (&l, &h))| l + (h - l) * sigmoid(u))
            .collect()
    }

    /// `dθ_i/du_i` of [`BoxPrior::from_unconstrained`].
    pub fn unconstrained_jacobian(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .zip(self.widths())
            .map(|(&u, w)| {
                let s = sigmoid(u);
                w * s * (1.0 - s)
            })
            .collect()
    }

    pub fn to_unconstrained(&self, theta: &[f64]) -> Vec<f64> {
        theta
            .iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(&t, (&l, &h))| {
                let frac = ((t - l) / (h - l)).clamp(1e-12, 1.0 - 1e-12);
                logit(frac)
            })
            .collect()
    }

    /// Affine map of the box onto `[-1, 1]^p`.
    pub fn to_standard(&self, theta: &[f64]) -> Vec<f64> {
        theta
            .iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(&t, (&l, &h))| 2.0 * (t - l) / (h - l) - 1.0)
            .collect()
    }
}

/// Gaussian observations with a pointwise cubic mean
/// `f(θ) = (1.5 θ + 0.5)³ / 200`; the simulator returns the mean of
/// `repeats` i.i.d. draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GaussianSim {
    pub dim: usize,
    pub repeats: usize,
    pub noise_var: f64,
}

impl Default for GaussianSim {
    fn default() -> Self {
        Self {
            dim: 1,
            repeats: 10,
            noise_var: 0.1,
        }
    }
}

impl GaussianSim {
    pub fn mean_fn(theta: f64) -> f64 {
        (1.5 * theta + 0.5).powi(3) / 200.0
    }

    /// Variance of the sample mean in each dimension.
    pub fn mean_variance(&self) -> f64 {
        self.noise_var / self.repeats as f64
    }

    pub fn simulate<R: Rng + ?Sized>(&self, theta: &[f64], rng: &mut R) -> Vec<f64> {
        let sd = self.noise_var.sqrt();
        theta
            .iter()
            .map(|&t| {
                let f = Self::mean_fn(t);
                let sum: f64 = (0..self.repeats)
                    .map(|_| f + sd * rng.sample::<f64, _>(StandardNormal))
                    .sum();
                sum / self.repeats as f64
            })
            .collect()
    }

    /// Exact log-likelihood of an observed sample mean.
    pub fn log_likelihood(&self, theta: &[f64], x_bar: &[f64]) -> f64 {
        let var = self.mean_variance();
        theta
            .iter()
            .zip(x_bar)
            .map(|(&t, &x)| {
                let r = x - Self::mean_fn(t);
                -0.5 * (2.0 * std::f64::consts::PI * var).ln() - 0.5 * r * r / var
            })
            .sum()
    }

    /// Ground-truth posterior under the uniform prior, normalized on `grid`.
    pub fn true_posterior(&self, grid: &Grid, x_bar: &[f64]) -> Result<Vec<f64>> {
        if x_bar.len() != grid.dim() || grid.dim() != self.dim {
            return Err(Error::dim("observed mean", grid.dim(), x_bar.len()));
        }
        let logs: Vec<f64> = grid
            .points()
            .iter()
            .map(|p| self.log_likelihood(p, x_bar))
            .collect();
        grid.normalize_log_density(&logs)
    }
}

/// A Gaussian blob rendered on a square image with binomial pixel noise.
/// Pixel centers sit at `-size/2 + 0.5, ..., size/2 - 0.5` on both axes;
/// pixels are stored row-major (row = y, column = x).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlobSim {
    pub size: usize,
    pub sigma: f64,
    pub trials: u32,
}

impl Default for BlobSim {
    fn default() -> Self {
        Self {
            size: 32,
            sigma: 2.0,
            trials: 255,
        }
    }
}

impl BlobSim {
    pub fn pixels(&self) -> usize {
        self.size * self.size
    }

    pub fn coordinate(&self, index: usize) -> f64 {
        index as f64 - self.size as f64 / 2.0 + 0.5
    }

    /// Per-pixel success probabilities for `θ = (x_off, y_off, γ)`.
    pub fn probabilities(&self, theta: &[f64]) -> Vec<f64> {
        let (x_off, y_off, gamma) = (theta[0], theta[1], theta[2]);
        let s2 = self.sigma * self.sigma;
        let mut p = Vec::with_capacity(self.pixels());
        for row in 0..self.size {
            let y = self.coordinate(row);
            for col in 0..self.size {
                let x = self.coordinate(col);
                let r = (x - x_off).powi(2) + (y - y_off).powi(2);
                p.push(0.9 - 0.8 * (-0.5 * (r / s2).powf(gamma)).exp());
            }
        }
        p
    }

    pub fn simulate<R: Rng + ?Sized>(&self, theta: &[f64], rng: &mut R) -> Vec<f64> {
        self.probabilities(theta)
            .into_iter()
            .map(|p| {
                Binomial::new(self.trials as u64, p)
                    .expect("blob probability lies in [0.1, 0.9]")
                    .sample(rng) as f64
            })
            .collect()
    }

    /// Exact log-likelihood of an image.
    pub fn log_likelihood(&self, theta: &[f64], image: &[f64]) -> f64 {
        let table = crate::heads::LnChoose::new(self.trials);
        let n = self.trials as f64;
        self.probabilities(theta)
            .iter()
            .zip(image)
            .map(|(&p, &k)| table.get(k as usize) + k * p.ln() + (n - k) * (1.0 - p).ln())
            .sum()
    }
}

/// Fixed biophysical constants of the single-compartment neuron.
/// Units: mV, ms, mS/cm², µF/cm².
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HhConstants {
    pub version: u32,
    pub source: String,
    pub c_m: f64,
    pub e_na: f64,
    pub e_k: f64,
    pub e_leak: f64,
    pub g_leak: f64,
    pub g_m: f64,
    pub tau_max: f64,
    pub v_t: f64,
    pub v_init: f64,
}

/// The constants file shipped with the repository.
pub const HH_CONSTANTS_TOML: &str = include_str!("../../../configs/hh_constants.toml");

impl HhConstants {
    pub fn bundled() -> Self {
        Self::parse(HH_CONSTANTS_TOML).expect("bundled constants parse")
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("hh constants: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

impl Default for HhConstants {
    fn default() -> Self {
        Self::bundled()
    }
}

/// Step-current protocol and integrator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HhProtocol {
    /// Step current density in µA/cm².
    pub amplitude: f64,
    pub onset: f64,
    pub duration: f64,
    pub t_total: f64,
    pub dt: f64,
    pub spike_threshold: f64,
    pub refractory: f64,
    /// Standard deviation of the zero-mean current noise (0 disables it).
    pub noise_std: f64,
    pub integrator: Integrator,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Integrator {
    /// Exponential Euler for the gates, forward Euler for the voltage.
    ExponentialEuler,
    /// Classical fourth-order Runge-Kutta on the full state.
    Rk4,
}

impl Default for HhProtocol {
    fn default() -> Self {
        Self {
            amplitude: 2.5,
            onset: 10.0,
            duration: 100.0,
            t_total: 120.0,
            dt: 0.025,
            spike_threshold: -20.0,
            refractory: 1.0,
            noise_std: 0.0,
            integrator: Integrator::Rk4,
        }
    }
}

/// Spike counts at or above this value share the last class.
pub const HH_CLASSES: usize = 6;

#[derive(Debug, Clone, PartialEq)]
pub struct HhSim {
    pub constants: HhConstants,
    pub protocol: HhProtocol,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Gates {
    m: f64,
    h: f64,
    n: f64,
    p: f64,
}

/// `z / (exp(z) - 1)` with the removable singularity at 0 filled in.
fn efun(z: f64) -> f64 {
    if z.abs() < 1e-4 {
        1.0 - z / 2.0
    } else {
        z / z.exp_m1()
    }
}

/// Steady state and time constant of one gating variable.
#[derive(Debug, Clone, Copy)]
struct Kinetics {
    inf: f64,
    tau: f64,
}

impl Kinetics {
    fn from_rates(alpha: f64, beta: f64) -> Self {
        Self {
            inf: alpha / (alpha + beta),
            tau: 1.0 / (alpha + beta),
        }
    }

    fn step(self, x: f64, dt: f64) -> f64 {
        (self.inf + (x - self.inf) * (-dt / self.tau).exp()).clamp(0.0, 1.0)
    }
}

/// Voltage trace and detected spike times.
#[derive(Debug, Clone, PartialEq)]
pub struct HhTrace {
    pub time: Vec<f64>,
    pub voltage: Vec<f64>,
    pub spikes: Vec<f64>,
}

impl HhSim {
    pub fn new(constants: HhConstants, protocol: HhProtocol) -> Self {
        Self { constants, protocol }
    }

    fn kinetics(&self, v: f64) -> [Kinetics; 4] {
        let u = v - self.constants.v_t;
        let alpha_m = 1.28 * efun(-(u - 13.0) / 4.0);
        let beta_m = 1.4 * efun((u - 40.0) / 5.0);
        let alpha_h = 0.128 * (-(u - 17.0) / 18.0).exp();
        let beta_h = 4.0 / (1.0 + (-(u - 40.0) / 5.0).exp());
        let alpha_n = 0.16 * efun(-(u - 15.0) / 5.0);
        let beta_n = 0.5 * (-(u - 10.0) / 40.0).exp();
        let p = Kinetics {
            inf: 1.0 / (1.0 + (-(v + 35.0) / 10.0).exp()),
            tau: self.constants.tau_max / (3.3 * ((v + 35.0) / 20.0).exp() + (-(v + 35.0) / 20.0).exp()),
        };
        [
            Kinetics::from_rates(alpha_m, beta_m),
            Kinetics::from_rates(alpha_h, beta_h),
            Kinetics::from_rates(alpha_n, beta_n),
            p,
        ]
    }

    fn dv_dt(&self, v: f64, g: Gates, g_na: f64, g_k: f64, i_in: f64) -> f64 {
        let c = &self.constants;
        let current = c.g_leak * (c.e_leak - v)
            + g_na * g.m.powi(3) * g.h * (c.e_na - v)
            + (g_k * g.n.powi(4) + c.g_m * g.p) * (c.e_k - v)
            + i_in;
        current / c.c_m
    }

    fn derivative(&self, v: f64, g: Gates, g_na: f64, g_k: f64, i_in: f64) -> (f64, Gates) {
        let [km, kh, kn, kp] = self.kinetics(v);
        let rate = |k: Kinetics, x: f64| (k.inf - x) / k.tau;
        (
            self.dv_dt(v, g, g_na, g_k, i_in),
            Gates {
                m: rate(km, g.m),
                h: rate(kh, g.h),
                n: rate(kn, g.n),
                p: rate(kp, g.p),
            },
        )
    }

    fn rk4_step(&self, v: f64, g: Gates, g_na: f64, g_k: f64, i_in: f64, dt: f64) -> (f64, Gates) {
        let shift = |g: Gates, d: Gates, h: f64| Gates {
            m: g.m + h * d.m,
            h: g.h + h * d.h,
            n: g.n + h * d.n,
            p: g.p + h * d.p,
        };
        let (v1, g1) = self.derivative(v, g, g_na, g_k, i_in);
        let (v2, g2) = self.derivative(v + 0.5 * dt * v1, shift(g, g1, 0.5 * dt), g_na, g_k, i_in);
        let (v3, g3) = self.derivative(v + 0.5 * dt * v2, shift(g, g2, 0.5 * dt), g_na, g_k, i_in);
        let (v4, g4) = self.derivative(v + dt * v3, shift(g, g3, dt), g_na, g_k, i_in);
        let w = dt / 6.0;
        let combine = |x: f64, a: f64, b: f64, c: f64, d: f64| (x + w * (a + 2.0 * b + 2.0 * c + d)).clamp(0.0, 1.0);
        (
            v + w * (v1 + 2.0 * v2 + 2.0 * v3 + v4),
            Gates {
                m: combine(g.m, g1.m, g2.m, g3.m, g4.m),
                h: combine(g.h, g1.h, g2.h, g3.h, g4.h),
                n: combine(g.n, g1.n, g2.n, g3.n, g4.n),
                p: combine(g.p, g1.p, g2.p, g3.p, g4.p),
            },
        )
    }

    fn input_current(&self, t: f64) -> f64 {
        let pr = &self.protocol;
        if t >= pr.onset && t < pr.onset + pr.duration {
            pr.amplitude
        } else {
            0.0
        }
    }

    /// Integrates the membrane equation for conductances `θ = (ḡ_Na, ḡ_K)`.
    pub fn trace<R: Rng + ?Sized>(&self, theta: &[f64], rng: &mut R) -> Result<HhTrace> {
        if theta.len() != 2 {
            return Err(Error::dim("hodgkin-huxley parameters", 2, theta.len()));
        }
        let (g_na, g_k) = (theta[0], theta[1]);
        let c = &self.constants;
        let pr = &self.protocol;
        let dt = pr.dt;
        let steps = (pr.t_total / dt).round() as usize;
        let noise_scale = pr.noise_std / dt.sqrt();

        let mut v = c.v_init;
        let [km, kh, kn, kp] = self.kinetics(v);
        let mut g = Gates {
            m: km.inf,
            h: kh.inf,
            n: kn.inf,
            p: kp.inf,
        };
        let mut time = Vec::with_capacity(steps + 1);
        let mut voltage = Vec::with_capacity(steps + 1);
        let mut spikes = Vec::new();
        time.push(0.0);
        voltage.push(v);
        for i in 0..steps {
            let t = i as f64 * dt;
            let mut i_in = self.input_current(t);
            if pr.noise_std > 0.0 {
                i_in += noise_scale * rng.sample::<f64, _>(StandardNormal);
            }
            let (v_next, g_next) = match pr.integrator {
                Integrator::ExponentialEuler => {
                    let [km, kh, kn, kp] = self.kinetics(v);
                    let v_next = v + dt * self.dv_dt(v, g, g_na, g_k, i_in);
                    let g_next = Gates {
                        m: km.step(g.m, dt),
                        h: kh.step(g.h, dt),
                        n: kn.step(g.n, dt),
                        p: kp.step(g.p, dt),
                    };
                    (v_next, g_next)
                }
                Integrator::Rk4 => self.rk4_step(v, g, g_na, g_k, i_in, dt),
            };
            g = g_next;
            debug_assert!([g.m, g.h, g.n, g.p].iter().all(|x| (0.0..=1.0).contains(x)));
            if !v_next.is_finite() || v_next.abs() > 200.0 {
                return Err(Error::Simulator {
                    theta: theta.to_vec(),
                    reason: format!("membrane potential diverged at t = {:.3} ms", t + dt),
                });
            }
            let t_next = t + dt;
            if v < pr.spike_threshold
                && v_next >= pr.spike_threshold
                && spikes.last().is_none_or(|&last| t_next - last >= pr.refractory)
            {
                spikes.push(t_next);
            }
            v = v_next;
            time.push(t_next);
            voltage.push(v);
        }
        Ok(HhTrace { time, voltage, spikes })
    }

    pub fn spike_count<R: Rng + ?Sized>(&self, theta: &[f64], rng: &mut R) -> Result<usize> {
        Ok(self.trace(theta, rng)?.spikes.len())
    }

    /// Spike-count class: exact counts 0..=4, with 5 or more merged.
    pub fn simulate<R: Rng + ?Sized>(&self, theta: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        let count = self.spike_count(theta, rng)?;
        Ok(vec![count.min(HH_CLASSES - 1) as f64])
    }
}

/// Simulator selection as it appears in a run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SimulatorSpec {
    Gaussian(GaussianSim),
    Blob(BlobSim),
    Hh(HhSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct HhSpec {
    /// Inline constants; take precedence over `constants_file`.
    pub constants: Option<HhConstants>,
    /// Constants file; the bundled file is used when neither is given.
    pub constants_file: Option<String>,
    pub protocol: HhProtocol,
}

impl HhSpec {
    pub fn resolve_constants(&self, base_dir: Option<&Path>) -> Result<HhConstants> {
        if let Some(c) = &self.constants {
            return Ok(c.clone());
        }
        match &self.constants_file {
            None => Ok(HhConstants::bundled()),
            Some(file) => {
                let path = Path::new(file);
                let path = match base_dir {
                    Some(base) if path.is_relative() => base.join(path),
                    _ => path.to_path_buf(),
                };
                HhConstants::load(&path)
            }
        }
    }
}

/// A ready-to-run forward model.
#[derive(Debug, Clone, PartialEq)]
pub enum Simulator {
    Gaussian(GaussianSim),
    Blob(BlobSim),
    Hh(HhSim),
}

impl Simulator {
    /// Resolves a spec, reading the constants file relative to `base_dir`.
    pub fn from_spec(spec: &SimulatorSpec, base_dir: Option<&Path>) -> Result<Self> {
        Ok(match spec {
            SimulatorSpec::Gaussian(g) => {
                if g.dim == 0 || g.repeats == 0 || !(g.noise_var > 0.0) {
                    return Err(Error::Config("gaussian simulator needs dim, repeats, noise_var > 0".into()));
                }
                Simulator::Gaussian(g.clone())
            }
            SimulatorSpec::Blob(b) => {
                if b.size == 0 || !(b.sigma > 0.0) || b.trials == 0 {
                    return Err(Error::Config("blob simulator needs size, sigma, trials > 0".into()));
                }
                Simulator::Blob(b.clone())
            }
            SimulatorSpec::Hh(h) => {
                let constants = h.resolve_constants(base_dir)?;
                let pr = &h.protocol;
                if !(pr.dt > 0.0) || !(pr.t_total > 0.0) {
                    return Err(Error::Config("hh protocol needs dt and t_total > 0".into()));
                }
                Simulator::Hh(HhSim::new(constants, h.protocol.clone()))
            }
        })
    }

    pub fn default_prior(&self) -> BoxPrior {
        match self {
            Simulator::Gaussian(g) => BoxPrior::new(vec![-8.0; g.dim], vec![8.0; g.dim]),
            Simulator::Blob(_) => BoxPrior::new(vec![-16.0, -16.0, 0.25], vec![16.0, 16.0, 5.0]),
            Simulator::Hh(_) => BoxPrior::new(vec![0.5, 0.5], vec![60.0, 10.0]),
        }
        .expect("default priors are valid")
    }

    /// Head family matching the simulator's noise model.
    pub fn head(&self) -> HeadKind {
        match self {
            Simulator::Gaussian(g) => HeadKind::Gaussian { dim: g.dim },
            Simulator::Blob(b) => HeadKind::Binomial {
                dim: b.pixels(),
                trials: b.trials,
            },
            Simulator::Hh(_) => HeadKind::Categorical { classes: HH_CLASSES },
        }
    }

    pub fn theta_dim(&self) -> usize {
        match self {
            Simulator::Gaussian(g) => g.dim,
            Simulator::Blob(_) => 3,
            Simulator::Hh(_) => 2,
        }
    }

    pub fn data_dim(&self) -> usize {
        self.head().data_dim()
    }

    pub fn simulate<R: Rng + ?Sized>(&self, theta: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        if theta.len() != self.theta_dim() {
            return Err(Error::dim("simulator parameters", self.theta_dim(), theta.len()));
        }
        match self {
            Simulator::Gaussian(g) => Ok(g.simulate(theta, rng)),
            Simulator::Blob(b) => Ok(b.simulate(theta, rng)),
            Simulator::Hh(h) => h.simulate(theta, rng),
        }
    }
}

/// Spike class at every point of a regular grid, for posterior-predictive
/// overlays. Each cell uses its own RNG stream derived from `seed`.
pub fn hh_grid_reference(sim: &HhSim, grid: &Grid, seed: u64) -> Result<Vec<usize>> {
    grid.points()
        .iter()
        .enumerate()
        .map(|(i, theta)| {
            let mut rng = crate::rng::stream(seed, crate::rng::Stream::GridReference, i as u64);
            Ok(sim.simulate(theta, &mut rng)?[0] as usize)
        })
        .collect()
}
