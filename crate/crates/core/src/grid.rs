//! Regular tensor-product grids over a parameter box with trapezoid cell
//! volumes, used for ground-truth posteriors and total-variation scores.

use crate::error::{Error, Result};
use crate::simulators::BoxPrior;

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    axes: Vec<Vec<f64>>,
    axis_weights: Vec<Vec<f64>>,
}

impl Grid {
    /// `points` nodes per dimension spanning `[lower, upper]` inclusive.
    pub fn over_box(prior: &BoxPrior, points: usize) -> Result<Self> {
        if points < 2 {
            return Err(Error::Config("grid needs at least two points per axis".into()));
        }
        let mut axes = Vec::new();
        let mut axis_weights = Vec::new();
        for (&lo, &hi) in prior.lower().iter().zip(prior.upper()) {
            let h = (hi - lo) / (points - 1) as f64;
            axes.push((0..points).map(|i| lo + h * i as f64).collect());
            let mut w = vec![h; points];
            w[0] = 0.5 * h;
            w[points - 1] = 0.5 * h;
            axis_weights.push(w);
        }
        Ok(Self { axes, axis_weights })
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn axis(&self, d: usize) -> &[f64] {
        &self.axes[d]
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(Vec::len).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn unravel(&self, mut flat: usize) -> Vec<usize> {
        let mut idx = vec![0; self.dim()];
        for d in (0..self.dim()).rev() {
            let n = self.axes[d].len();
            idx[d] = flat % n;
            flat /= n;
        }
        idx
    }

    /// Grid point with flat index `i` (last axis varies fastest).
    pub fn point(&self, i: usize) -> Vec<f64> {
        self.unravel(i)
            .iter()
            .enumerate()
            .map(|(d, &k)| self.axes[d][k])
            .collect()
    }

    pub fn points(&self) -> Vec<Vec<f64>> {
        (0..self.len()).map(|i| self.point(i)).collect()
    }

    /// Trapezoid quadrature weight per grid point.
    pub fn cell_volumes(&self) -> Vec<f64> {
        (0..self.len())
            .map(|i| {
                self.unravel(i)
                    .iter()
                    .enumerate()
                    .map(|(d, &k)| self.axis_weights[d][k])
                    .product()
            })
            .collect()
    }

    /// Turns log-density values on the grid into a density integrating to 1.
    pub fn normalize_log_density(&self, log_values: &[f64]) -> Result<Vec<f64>> {
        if log_values.len() != self.len() {
            return Err(Error::dim("grid density", self.len(), log_values.len()));
        }
        let max = log_values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::Numerical("log density is -inf everywhere on the grid".into()));
        }
        let unnorm: Vec<f64> = log_values.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = unnorm.iter().zip(self.cell_volumes()).map(|(p, w)| p * w).sum();
        Ok(unnorm.into_iter().map(|p| p / z).collect())
    }

    pub fn integrate(&self, values: &[f64]) -> f64 {
        values.iter().zip(self.cell_volumes()).map(|(v, w)| v * w).sum()
    }

    /// Marginal density along axis `d` (other axes integrated out).
    pub fn marginal(&self, density: &[f64], d: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.axes[d].len()];
        for (i, &p) in density.iter().enumerate() {
            let idx = self.unravel(i);
            let w: f64 = idx
                .iter()
                .enumerate()
                .filter(|&(e, _)| e != d)
                .map(|(e, &k)| self.axis_weights[e][k])
                .product();
            out[idx[d]] += p * w;
        }
        out
    }
}
