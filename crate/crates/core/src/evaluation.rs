//! Scores for emulators and posteriors: total variation against a grid
//! ground truth, held-out log-likelihood, posterior-predictive checks, and
//! the tidy metrics table they are recorded in.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::ensemble::Ensemble;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::rng::{self, Stream};
use crate::simulators::{BoxPrior, Simulator};
use crate::tensor::log_sum_exp;

/// Largest tolerated deviation of a density's integral from one.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-3;

/// `½ Σ |p − q| · w` over a shared grid. Both densities must integrate to
/// one under the cell volumes `w`.
pub fn total_variation(p: &[f64], q: &[f64], volumes: &[f64]) -> Result<f64> {
    if p.len() != volumes.len() {
        return Err(Error::dim("density on grid", volumes.len(), p.len()));
    }
    if q.len() != volumes.len() {
        return Err(Error::dim("density on grid", volumes.len(), q.len()));
    }
    for density in [p, q] {
        if density.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Domain("densities must be finite and non-negative".into()));
        }
        let mass: f64 = density.iter().zip(volumes).map(|(d, w)| d * w).sum();
        if (mass - 1.0).abs() > NORMALIZATION_TOLERANCE {
            return Err(Error::Unnormalized(mass));
        }
    }
    let tv = 0.5
        * p.iter()
            .zip(q)
            .zip(volumes)
            .map(|((a, b), w)| (a - b).abs() * w)
            .sum::<f64>();
    Ok(tv.min(1.0))
}

/// Grid-normalized approximate posterior `E_m[q(x_o | θ; φ_m)] p(θ)`.
pub fn predicted_posterior(ensemble: &Ensemble, grid: &Grid, x_o: &[f64], prior: &BoxPrior) -> Result<Vec<f64>> {
    let points = grid.points();
    // chunks bound the size of the batched forward passes
    let mut logs = Vec::with_capacity(points.len());
    for chunk in points.chunks(4096) {
        let lp = ensemble.predictive_logprob_batch(chunk, &[x_o.to_vec()])?;
        logs.extend(chunk.iter().zip(lp).map(|(theta, l)| l + prior.log_density(theta)));
    }
    grid.normalize_log_density(&logs)
}

/// Fixed `(θ, x)` pairs drawn from prior and simulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeldOutSet {
    pub thetas: Vec<Vec<f64>>,
    pub xs: Vec<Vec<f64>>,
}

impl HeldOutSet {
    /// `n` pairs; pair `i` uses its own held-out stream, independent of
    /// every training draw.
    pub fn draw(sim: &Simulator, prior: &BoxPrior, n: usize, seed: u64) -> Result<Self> {
        let mut thetas = Vec::with_capacity(n);
        let mut xs = Vec::with_capacity(n);
        for i in 0..n {
            let mut r = rng::stream(seed, Stream::HeldOut, i as u64);
            let theta = prior.sample(&mut r);
            xs.push(sim.simulate(&theta, &mut r)?);
            thetas.push(theta);
        }
        Ok(Self { thetas, xs })
    }

    pub fn len(&self) -> usize {
        self.thetas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.thetas.is_empty()
    }
}

/// Sum over held-out pairs of the ensemble's predictive log-probability.
pub fn heldout_loglik(ensemble: &Ensemble, held_out: &HeldOutSet) -> Result<f64> {
    Ok(ensemble
        .predictive_logprob_batch(&held_out.thetas, &held_out.xs)?
        .iter()
        .sum())
}

/// Same sum under the true simulator, where its likelihood is tractable.
pub fn true_heldout_loglik(sim: &Simulator, held_out: &HeldOutSet) -> Option<f64> {
    let pairs = held_out.thetas.iter().zip(&held_out.xs);
    match sim {
        Simulator::Gaussian(g) => Some(pairs.map(|(t, x)| g.log_likelihood(t, x)).sum()),
        Simulator::Blob(b) => Some(pairs.map(|(t, x)| b.log_likelihood(t, x)).sum()),
        Simulator::Hh(_) => None,
    }
}

/// Posterior-predictive check on a categorical summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassCheck {
    pub simulated: usize,
    pub failures: usize,
    pub observed_class: usize,
    /// Fraction of successful simulations that hit the observed class.
    pub exact: f64,
    /// Fraction within one class of the observation.
    pub within_one: f64,
    pub class_counts: Vec<usize>,
}

/// Posterior-predictive check in pixel space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageCheck {
    pub simulated: usize,
    pub failures: usize,
    pub mean_image: Vec<f64>,
    /// Pearson correlation of the mean predictive image with the observation.
    pub correlation: f64,
    pub mean_abs_residual: f64,
    pub rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PpcReport {
    Class(ClassCheck),
    Image(ImageCheck),
}

/// Simulates at up to `max_draws` posterior samples (evenly thinned) and
/// compares with `x_o`. Simulator failures are counted, not fatal.
pub fn ppc(samples: &[Vec<f64>], sim: &Simulator, x_o: &[f64], max_draws: usize, seed: u64) -> Result<PpcReport> {
    if samples.is_empty() {
        return Err(Error::Config("posterior predictive check needs samples".into()));
    }
    let stride = samples.len().div_ceil(max_draws.max(1));
    let mut outputs = Vec::new();
    let mut failures = 0;
    for (i, theta) in samples.iter().step_by(stride).enumerate() {
        let mut r = rng::stream(seed, Stream::Ppc, i as u64);
        match sim.simulate(theta, &mut r) {
            Ok(x) => outputs.push(x),
            Err(Error::Simulator { .. }) => failures += 1,
            Err(e) => return Err(e),
        }
    }
    if outputs.is_empty() {
        return Err(Error::Simulator {
            theta: samples[0].clone(),
            reason: "every posterior-predictive simulation failed".into(),
        });
    }
    let n = outputs.len() as f64;
    Ok(match sim {
        Simulator::Hh(_) => {
            let observed = x_o[0] as usize;
            let mut class_counts = vec![0; crate::simulators::HH_CLASSES];
            for x in &outputs {
                class_counts[x[0] as usize] += 1;
            }
            let exact = class_counts[observed] as f64 / n;
            let within_one = class_counts
                .iter()
                .enumerate()
                .filter(|(c, _)| c.abs_diff(observed) <= 1)
                .map(|(_, &k)| k)
                .sum::<usize>() as f64
                / n;
            PpcReport::Class(ClassCheck {
                simulated: outputs.len(),
                failures,
                observed_class: observed,
                exact,
                within_one,
                class_counts,
            })
        }
        _ => {
            let d = x_o.len();
            let mut mean_image = vec![0.0; d];
            for x in &outputs {
                for (m, v) in mean_image.iter_mut().zip(x) {
                    *m += v / n;
                }
            }
            let residuals: Vec<f64> = mean_image.iter().zip(x_o).map(|(m, o)| m - o).collect();
            PpcReport::Image(ImageCheck {
                simulated: outputs.len(),
                failures,
                correlation: pearson(&mean_image, x_o),
                mean_abs_residual: residuals.iter().map(|r| r.abs()).sum::<f64>() / d as f64,
                rmse: (residuals.iter().map(|r| r * r).sum::<f64>() / d as f64).sqrt(),
                mean_image,
            })
        }
    })
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

/// Empirical quantile with linear interpolation between order statistics.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

/// Central interval holding `mass` of the sample.
pub fn central_interval(values: &[f64], mass: f64) -> (f64, f64) {
    let tail = 0.5 * (1.0 - mass);
    (quantile(values, tail), quantile(values, 1.0 - tail))
}

/// Normalized histogram density of `values` on `bins` equal cells of
/// `[lo, hi]`; values outside are ignored.
pub fn histogram_density(values: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<f64> {
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0.0; bins];
    for &v in values {
        if v >= lo && v <= hi {
            let k = (((v - lo) / width) as usize).min(bins - 1);
            counts[k] += 1.0;
        }
    }
    let total: f64 = counts.iter().sum::<f64>() * width;
    if total > 0.0 {
        counts.iter_mut().for_each(|c| *c /= total);
    }
    counts
}

/// Asymptotic Kolmogorov survival function `P(K > λ)`.
fn kolmogorov_survival(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let k = k as f64;
        let term = 2.0 * (-1f64).powf(k - 1.0) * (-2.0 * k * k * lambda * lambda).exp();
        sum += term;
        if term.abs() < 1e-16 {
            break;
        }
    }
    sum.clamp(0.0, 1.0)
}

fn ks_p_value(d: f64, n_eff: f64) -> f64 {
    let s = n_eff.sqrt();
    kolmogorov_survival((s + 0.12 + 0.11 / s) * d)
}

/// One-sample Kolmogorov–Smirnov test: statistic and p-value against `cdf`.
pub fn ks_one_sample(values: &[f64], cdf: impl Fn(f64) -> f64) -> (f64, f64) {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in v.iter().enumerate() {
        let f = cdf(x);
        d = d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    (d, ks_p_value(d, n))
}

/// Two-sample Kolmogorov–Smirnov test.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> (f64, f64) {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    (d, ks_p_value(d, na * nb / (na + nb)))
}

pub fn mean_sem(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Effective sample size of one chain from Geyer's initial monotone
/// sequence of paired autocorrelations.
pub fn effective_sample_size(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 4 {
        return n as f64;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let centered: Vec<f64> = values.iter().map(|v| v - mean).collect();
    let c0 = centered.iter().map(|v| v * v).sum::<f64>() / n as f64;
    if c0 <= 0.0 {
        return n as f64;
    }
    let rho = |lag: usize| centered[..n - lag].iter().zip(&centered[lag..]).map(|(a, b)| a * b).sum::<f64>() / (n as f64 * c0);
    let mut tau = -1.0;
    let mut previous = f64::INFINITY;
    let mut k = 0;
    while 2 * k + 1 < n {
        let pair = rho(2 * k) + rho(2 * k + 1);
        if pair <= 0.0 {
            break;
        }
        let pair = pair.min(previous);
        tau += 2.0 * pair;
        previous = pair;
        k += 1;
    }
    n as f64 / tau.max(1.0 / n as f64)
}

/// Every `⌈n / ESS⌉`-th draw, so that the result is close to independent.
pub fn thin_to_effective(values: &[f64]) -> Vec<f64> {
    let step = (values.len() as f64 / effective_sample_size(values)).ceil().max(1.0) as usize;
    values.iter().step_by(step).copied().collect()
}

pub fn median(values: &[f64]) -> f64 {
    quantile(values, 0.5)
}

/// Log of the mean of `exp(values)`.
pub fn log_mean_exp(values: &[f64]) -> f64 {
    log_sum_exp(values) - (values.len() as f64).ln()
}

/// One row of the tidy metrics table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub run_id: String,
    pub rule: String,
    pub round: usize,
    pub metric: String,
    pub value: f64,
}

pub const METRICS_HEADER: [&str; 5] = ["run_id", "rule", "round", "metric", "value"];

/// Writes the metrics table; an empty table still gets its header.
pub fn write_metrics_csv<W: Write>(rows: &[MetricRow], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(METRICS_HEADER)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv<R: Read>(input: R) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_reader(input);
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Mean and standard error over runs for each `(rule, metric, round)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub rule: String,
    pub metric: String,
    pub round: usize,
    pub runs: usize,
    pub mean: f64,
    pub sem: f64,
    pub median: f64,
}

pub fn aggregate(rows: &[MetricRow]) -> Vec<AggregateRow> {
    let mut groups: BTreeMap<(String, String, usize), Vec<f64>> = BTreeMap::new();
    for row in rows {
        groups
            .entry((row.rule.clone(), row.metric.clone(), row.round))
            .or_default()
            .push(row.value);
    }
    groups
        .into_iter()
        .map(|((rule, metric, round), values)| {
            let (mean, sem) = mean_sem(&values);
            AggregateRow {
                rule,
                metric,
                round,
                runs: values.len(),
                mean,
                sem,
                median: median(&values),
            }
        })
        .collect()
}

pub fn write_aggregate_csv<W: Write>(rows: &[AggregateRow], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(["rule", "metric", "round", "runs", "mean", "sem", "median"])?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(n: usize) -> (Grid, Vec<f64>) {
        let prior = BoxPrior::new(vec![0.0], vec![1.0]).unwrap();
        let grid = Grid::over_box(&prior, n).unwrap();
        let v = grid.cell_volumes();
        (grid, v)
    }

    #[test]
    fn identical_densities_have_zero_distance() {
        let (_, w) = line(101);
        let p = vec![1.0; 101];
        assert_eq!(total_variation(&p, &p, &w).unwrap(), 0.0);
    }

    #[test]
    fn disjoint_densities_have_unit_distance() {
        let w = vec![0.25; 4];
        let p = vec![2.0, 2.0, 0.0, 0.0];
        let q = vec![0.0, 0.0, 2.0, 2.0];
        assert!((total_variation(&p, &q, &w).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn unnormalized_input_is_rejected() {
        let (_, w) = line(11);
        let p = vec![1.0; 11];
        let q = vec![1.1; 11];
        assert!(matches!(total_variation(&p, &q, &w), Err(Error::Unnormalized(_))));
    }

    #[test]
    fn empty_metrics_table_is_header_only() {
        let mut buf = Vec::new();
        write_metrics_csv(&[], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "run_id,rule,round,metric,value\n");
    }

    #[test]
    fn metrics_round_trip_and_aggregate() {
        let rows: Vec<MetricRow> = (0..3)
            .map(|i| MetricRow {
                run_id: format!("r{i}"),
                rule: "maxvar".into(),
                round: 5,
                metric: "tv".into(),
                value: i as f64,
            })
            .collect();
        let mut buf = Vec::new();
        write_metrics_csv(&rows, &mut buf).unwrap();
        assert_eq!(read_metrics_csv(buf.as_slice()).unwrap(), rows);
        let agg = aggregate(&rows);
        assert_eq!(agg.len(), 1);
        assert_eq!(agg[0].mean, 1.0);
        assert!((agg[0].sem - (1.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn quantiles_interpolate() {
        let v: Vec<f64> = (0..=10).map(f64::from).collect();
        assert_eq!(quantile(&v, 0.25), 2.5);
        let (lo, hi) = central_interval(&v, 0.8);
        assert!((lo - 1.0).abs() < 1e-12 && (hi - 9.0).abs() < 1e-12);
    }

    #[test]
    fn ks_accepts_uniform_grid_and_rejects_shift() {
        let v: Vec<f64> = (0..1000).map(|i| (i as f64 + 0.5) / 1000.0).collect();
        let (_, p) = ks_one_sample(&v, |x| x.clamp(0.0, 1.0));
        assert!(p > 0.99);
        let shifted: Vec<f64> = v.iter().map(|x| x * 0.8).collect();
        let (_, p) = ks_two_sample(&v, &shifted);
        assert!(p < 1e-6);
    }

    #[test]
    fn effective_size_of_independent_and_sticky_chains() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let iid: Vec<f64> = (0..4000).map(|_| rng.random::<f64>()).collect();
        let ess = effective_sample_size(&iid);
        assert!(ess > 3000.0 && ess < 5000.0, "{ess}");
        // each value repeated four times: ESS about n/4
        let sticky: Vec<f64> = iid[..1000].iter().flat_map(|v| [*v; 4]).collect();
        let ess = effective_sample_size(&sticky);
        assert!(ess > 700.0 && ess < 1300.0, "{ess}");
        let thinned = thin_to_effective(&sticky).len();
        assert!((700..=1400).contains(&thinned), "{thinned}");
    }
}
