//! Per-user categorical beliefs over the real constellation.

use crate::error::{Error, Result};
use crate::model::Constellation;

/// Row-major `K x M` probabilities plus the logits they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct CavityDistribution {
    pub k: usize,
    pub m: usize,
    pub q: Vec<f64>,
    pub logits: Vec<f64>,
}

impl CavityDistribution {
    /// Row-wise softmax with max subtraction.
    pub fn from_logits(k: usize, m: usize, logits: Vec<f64>) -> Self {
        assert_eq!(logits.len(), k * m);
        let mut q = vec![0.0; k * m];
        for (row, out) in logits.chunks_exact(m).zip(q.chunks_exact_mut(m)) {
            softmax_into(row, out);
        }
        Self { k, m, q, logits }
    }

    /// Gaussian `N(mean_k, var_k)` evaluated on the constellation and renormalized.
    pub fn discretized_gaussian(means: &[f64], vars: &[f64], c: &Constellation) -> Self {
        let m = c.m();
        let k = means.len();
        let mut logits = Vec::with_capacity(k * m);
        for (&mu, &v) in means.iter().zip(vars) {
            for &a in &c.real_points {
                logits.push(-(a - mu) * (a - mu) / (2.0 * v));
            }
        }
        Self::from_logits(k, m, logits)
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.q[k * self.m..(k + 1) * self.m]
    }

    /// Hard decision by maximum probability.
    pub fn argmax(&self, k: usize) -> usize {
        let row = self.row(k);
        let mut best = 0;
        for (i, &p) in row.iter().enumerate() {
            if p > row[best] {
                best = i;
            }
        }
        best
    }
}

pub(crate) fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &d) in out.iter_mut().zip(row) {
        *o = (d - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Mean and variance of each row of `cavity` over the constellation.
pub fn discrete_moments(cavity: &CavityDistribution, c: &Constellation) -> (Vec<f64>, Vec<f64>) {
    let mut mean = Vec::with_capacity(cavity.k);
    let mut var = Vec::with_capacity(cavity.k);
    for k in 0..cavity.k {
        let row = cavity.row(k);
        let mu: f64 = row.iter().zip(&c.real_points).map(|(p, a)| p * a).sum();
        let v: f64 = row
            .iter()
            .zip(&c.real_points)
            .map(|(p, a)| p * (a - mu) * (a - mu))
            .sum();
        mean.push(mu);
        var.push(v);
    }
    (mean, var)
}

/// Product of two univariate Gaussian densities, renormalized.
/// `var_b = inf` is the uninformative factor.
pub fn gaussian_product(mean_a: f64, var_a: f64, mean_b: f64, var_b: f64) -> Result<(f64, f64)> {
    if !(var_a > 0.0 && var_b > 0.0) {
        return Err(Error::NonPositiveVariance(var_a, var_b));
    }
    let prec = 1.0 / var_a + 1.0 / var_b;
    let var = 1.0 / prec;
    let lin_b = if var_b.is_infinite() { 0.0 } else { mean_b / var_b };
    Ok((var * (mean_a / var_a + lin_b), var))
}
