//! Posterior-approximation diagnostics: exact posterior enumeration, moment
//! gaps, probability ratio, residual-noise correlation and QQ data, and SER
//! binned by channel condition number.

use std::io::Write;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::detect::{for_each_candidate, hard_decision, ml_objective, Detector, IterationTrace};
use crate::error::{Error, Result};
use crate::model::{snr_to_noise_var, Constellation, SystemInstance};
use crate::rng::RngStream;
use crate::sweep::{SerEstimate, Z95};

/// Largest support enumerated by default.
pub const DEFAULT_POSTERIOR_BUDGET: u128 = 1 << 20;

const ANALYSIS_STREAM: u64 = 0x616e_616c;

/// The exact posterior over `Omega^K`. Candidate `n` has user `k`'s
/// constellation index at base-`M` digit `K-1-k` of `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct TruePosterior {
    pub k: usize,
    pub m: usize,
    pub probs: Vec<f64>,
    pub mu: Vec<f64>,
    pub sigma_diag: Vec<f64>,
    /// Index of the most probable candidate.
    pub ml_index: usize,
    pub ml_x: Vec<f64>,
    pub ml_objective: f64,
}

impl TruePosterior {
    pub fn point(&self, n: usize, c: &Constellation) -> Vec<f64> {
        let mut x = vec![0.0; self.k];
        let mut r = n;
        for slot in x.iter_mut().rev() {
            *slot = c.real_points[r % self.m];
            r /= self.m;
        }
        x
    }

    pub fn index_of(&self, x: &[f64], c: &Constellation) -> Option<usize> {
        x.iter().try_fold(0usize, |n, &a| c.index_of(a).map(|i| n * self.m + i))
    }
}

/// `p(x|y) ∝ exp(-||y - Hx||^2 / (2 sigma^2))` over the whole alphabet,
/// normalized with log-sum-exp, with exact per-user means and variances.
pub fn enumerate_posterior(inst: &SystemInstance, budget: u128) -> Result<TruePosterior> {
    let c = &inst.constellation;
    let (k, m) = (inst.k(), c.m());
    let mut objs = Vec::new();
    for_each_candidate(inst, budget, |_, obj| objs.push(obj))?;
    let scale = 1.0 / (2.0 * inst.noise_var);
    let (ml_index, &ml_obj) = objs
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("non-empty alphabet");
    let mut probs: Vec<f64> = objs.iter().map(|&o| (-(o - ml_obj) * scale).exp()).collect();
    let z: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= z);

    let mut mu = vec![0.0; k];
    let mut second = vec![0.0; k];
    for (n, &p) in probs.iter().enumerate() {
        let mut r = n;
        for kk in (0..k).rev() {
            let a = c.real_points[r % m];
            r /= m;
            mu[kk] += p * a;
            second[kk] += p * a * a;
        }
    }
    let sigma_diag = mu.iter().zip(&second).map(|(m1, m2)| (m2 - m1 * m1).max(0.0)).collect();
    let mut post = TruePosterior {
        k,
        m,
        probs,
        mu,
        sigma_diag,
        ml_index,
        ml_x: Vec::new(),
        ml_objective: 0.0,
    };
    post.ml_x = post.point(ml_index, c);
    post.ml_objective = ml_objective(inst, &post.ml_x);
    Ok(post)
}

/// `(||mu_true - mean||, ||diag Sigma_true - var||)` for one instance.
pub fn moment_gaps(mean: &[f64], var: &[f64], post: &TruePosterior) -> (f64, f64) {
    let dm = mean.iter().zip(&post.mu).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let dv = var.iter().zip(&post.sigma_diag).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    (dm, dv)
}

/// `p(x_est|y) / p(x_ML|y)` per iteration after hard decisions, computed from
/// the objective difference so that the normalization never appears.
pub fn probability_ratio(inst: &SystemInstance, x_est_per_iter: &[Vec<f64>], x_ml: &[f64]) -> Vec<f64> {
    let ml = ml_objective(inst, x_ml);
    x_est_per_iter
        .iter()
        .map(|x| {
            let xh = hard_decision(x, &inst.constellation);
            (-(ml_objective(inst, &xh) - ml) / (2.0 * inst.noise_var)).exp()
        })
        .collect()
}

/// The same ratio read off the normalized enumerated posterior.
pub fn probability_ratio_normalized(post: &TruePosterior, x_est: &[f64], c: &Constellation) -> f64 {
    let xh = hard_decision(x_est, c);
    let n = post.index_of(&xh, c).expect("hard decisions lie on the constellation");
    post.probs[n] / post.probs[post.ml_index]
}

/// Pearson correlation of the normalized residual noise per iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualStats {
    pub realizations: usize,
    pub pearson: Vec<DMatrix<f64>>,
    /// `||C - I||` (Frobenius) per iteration.
    pub c_per_iter: Vec<f64>,
    /// `(gaussian_quantile, empirical_quantile)` of the standardized residual at
    /// the last iteration, pooled over users.
    pub qq: Vec<(f64, f64)>,
}

/// Streaming accumulator for the residual `(x_obs - x_ML) / sqrt(v_obs)`.
#[derive(Debug, Clone)]
pub struct ResidualAccumulator {
    k: usize,
    n: usize,
    sum: Vec<DVector<f64>>,
    cross: Vec<DMatrix<f64>>,
    last: Vec<f64>,
}

impl ResidualAccumulator {
    pub fn new(k: usize, iterations: usize) -> Self {
        Self {
            k,
            n: 0,
            sum: vec![DVector::zeros(k); iterations],
            cross: vec![DMatrix::zeros(k, k); iterations],
            last: Vec::new(),
        }
    }

    /// Residuals of one realization, one row per iteration.
    pub fn residuals(trace: &[IterationTrace], x_ml: &[f64]) -> Vec<Vec<f64>> {
        trace
            .iter()
            .map(|it| {
                it.cavity_mean
                    .iter()
                    .zip(&it.cavity_var)
                    .zip(x_ml)
                    .map(|((m, v), x)| (m - x) / v.sqrt())
                    .collect()
            })
            .collect()
    }

    pub fn push(&mut self, eps: &[Vec<f64>]) -> Result<()> {
        if eps.len() != self.sum.len() {
            return Err(Error::DimensionMismatch {
                what: "traced iterations".into(),
                found: eps.len(),
                expected: self.sum.len(),
            });
        }
        for (t, e) in eps.iter().enumerate() {
            if e.len() != self.k {
                return Err(Error::DimensionMismatch {
                    what: "residual length".into(),
                    found: e.len(),
                    expected: self.k,
                });
            }
            let v = DVector::from_column_slice(e);
            self.sum[t] += &v;
            self.cross[t].ger(1.0, &v, &v, 1.0);
        }
        if let Some(e) = eps.last() {
            self.last.extend_from_slice(e);
        }
        self.n += 1;
        Ok(())
    }

    pub fn finish(&self, qq_points: usize) -> Result<ResidualStats> {
        if self.n < 2 {
            return Err(Error::TooFewRealizations(self.n));
        }
        let n = self.n as f64;
        let mut pearson = Vec::with_capacity(self.sum.len());
        let mut c_per_iter = Vec::with_capacity(self.sum.len());
        for (s, xx) in self.sum.iter().zip(&self.cross) {
            let mean = s / n;
            let cov = xx / n - &mean * mean.transpose();
            let sd: Vec<f64> = (0..self.k).map(|i| cov[(i, i)].max(0.0).sqrt()).collect();
            let mut p = DMatrix::from_fn(self.k, self.k, |i, j| {
                if i == j {
                    1.0
                } else {
                    cov[(i, j)] / (sd[i] * sd[j])
                }
            });
            // Symmetric by construction; enforce bitwise.
            for i in 0..self.k {
                for j in 0..i {
                    p[(i, j)] = p[(j, i)];
                }
            }
            c_per_iter.push((&p - DMatrix::identity(self.k, self.k)).norm());
            pearson.push(p);
        }
        Ok(ResidualStats {
            realizations: self.n,
            pearson,
            c_per_iter,
            qq: qq_pairs(&self.last, qq_points),
        })
    }
}

/// Residual statistics for a batch of traced runs against their ML solutions.
pub fn residual_noise_stats(traces: &[Vec<IterationTrace>], x_ml: &[Vec<f64>], qq_points: usize) -> Result<ResidualStats> {
    if traces.len() != x_ml.len() {
        return Err(Error::DimensionMismatch {
            what: "ML solutions".into(),
            found: x_ml.len(),
            expected: traces.len(),
        });
    }
    let first = traces.first().ok_or_else(|| Error::Config("no realizations".into()))?;
    let k = x_ml[0].len();
    let mut acc = ResidualAccumulator::new(k, first.len());
    for (t, x) in traces.iter().zip(x_ml) {
        acc.push(&ResidualAccumulator::residuals(t, x))?;
    }
    acc.finish(qq_points)
}

/// Standardized sample quantiles against standard-Gaussian quantiles at
/// `(j + 0.5) / points`.
pub fn qq_pairs(samples: &[f64], points: usize) -> Vec<(f64, f64)> {
    let finite: Vec<f64> = samples.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.len() < 2 || points == 0 {
        return Vec::new();
    }
    let n = finite.len() as f64;
    let mean = finite.iter().sum::<f64>() / n;
    let sd = (finite.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let mut z: Vec<f64> = finite.iter().map(|v| (v - mean) / sd).collect();
    z.sort_by(f64::total_cmp);
    let normal = Normal::standard();
    let points = points.min(z.len());
    (0..points)
        .map(|j| {
            let p = (j as f64 + 0.5) / points as f64;
            let idx = ((p * z.len() as f64) as usize).min(z.len() - 1);
            (normal.inverse_cdf(p), z[idx])
        })
        .collect()
}

/// Table-style diagnostics of one detector at one operating point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub detector: String,
    pub n_tx: usize,
    pub n_rx: usize,
    pub qam_order: usize,
    pub snr_db: f64,
    pub instances: usize,
    pub ser: f64,
    pub ser_ci95: f64,
    pub delta_mu: f64,
    pub delta_sigma: f64,
    pub r_per_iter: Vec<f64>,
    pub c_per_iter: Vec<f64>,
    /// Instances where the hard output beat the exhaustive ML objective.
    pub ml_violations: usize,
    #[serde(skip)]
    pub residuals: Option<ResidualStats>,
}

/// What [`analyze_detector`] computes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnalysisOptions {
    pub n_tx: usize,
    pub n_rx: usize,
    pub qam_order: usize,
    pub snr_db: f64,
    pub instances: usize,
    pub seed: u64,
    pub budget: u128,
    pub qq_points: usize,
    /// Skip the moment gaps (they need the full posterior, not just the ML point).
    pub moments: bool,
}

struct InstanceRecord {
    dmu: f64,
    dsigma: f64,
    r: Vec<f64>,
    eps: Vec<Vec<f64>>,
    errors: usize,
    violation: bool,
}

/// Runs a tracing detector on fresh instances and gathers every diagnostic.
/// The detector must record its per-iteration trace; `mu^(T)` and
/// `diag Sigma^(T)` are read from the last trace entry's posterior moments.
pub fn analyze_detector(det: &dyn Detector, opts: &AnalysisOptions) -> Result<MetricsReport> {
    if opts.instances < 2 {
        return Err(Error::Config("analysis needs at least 2 instances".into()));
    }
    let c = Arc::new(Constellation::new(opts.qam_order)?);
    let base = RngStream::new(opts.seed, ANALYSIS_STREAM);
    let record = |i: usize| -> Result<InstanceRecord> {
        let inst = crate::model::sample_instance(opts.n_tx, opts.n_rx, &c, opts.snr_db, base.fork(i as u64));
        let res = det.detect(&inst)?;
        let last = res
            .cavity_trace
            .last()
            .ok_or_else(|| Error::Config(format!("{} produced no trace", det.name())))?;
        let (x_ml, ml_obj, dmu, dsigma) = if opts.moments {
            let post = enumerate_posterior(&inst, opts.budget)?;
            let (a, b) = moment_gaps(&last.post_mean, &last.post_var, &post);
            (post.ml_x, post.ml_objective, a, b)
        } else {
            let (x, o) = crate::detect::ml_oracle(&inst, opts.budget)?;
            (x, o, 0.0, 0.0)
        };
        let tol = 1e-9 * ml_obj.abs().max(1.0);
        Ok(InstanceRecord {
            dmu,
            dsigma,
            r: probability_ratio(&inst, &res.x_soft_trace, &x_ml),
            eps: ResidualAccumulator::residuals(&res.cavity_trace, &x_ml),
            errors: inst.symbol_errors(&res.x_hard),
            violation: ml_objective(&inst, &res.x_hard) < ml_obj - tol,
        })
    };

    let mut acc: Option<ResidualAccumulator> = None;
    let mut r_sum: Vec<f64> = Vec::new();
    let (mut dmu, mut dsig) = (0.0, 0.0);
    let mut errors = 0u64;
    let mut violations = 0;
    let mut symbols = 0u64;
    let spi = opts.n_tx as u64;
    const CHUNK: usize = 2048;
    for start in (0..opts.instances).step_by(CHUNK) {
        let end = (start + CHUNK).min(opts.instances);
        let recs: Vec<Result<InstanceRecord>> = (start..end).into_par_iter().map(record).collect();
        for r in recs {
            let r = r?;
            let a = acc.get_or_insert_with(|| ResidualAccumulator::new(2 * opts.n_tx, r.eps.len()));
            a.push(&r.eps)?;
            if r_sum.is_empty() {
                r_sum = vec![0.0; r.r.len()];
            }
            r_sum.iter_mut().zip(&r.r).for_each(|(s, v)| *s += v);
            dmu += r.dmu;
            dsig += r.dsigma;
            errors += r.errors as u64;
            symbols += spi;
            violations += r.violation as usize;
        }
    }
    let n = opts.instances as f64;
    let residuals = acc.expect("at least two instances").finish(opts.qq_points)?;
    let ser = SerEstimate::from_counts(errors, symbols);
    Ok(MetricsReport {
        detector: det.name().to_string(),
        n_tx: opts.n_tx,
        n_rx: opts.n_rx,
        qam_order: opts.qam_order,
        snr_db: opts.snr_db,
        instances: opts.instances,
        ser: ser.ser,
        ser_ci95: ser.ci95,
        delta_mu: if opts.moments { dmu / n } else { f64::NAN },
        delta_sigma: if opts.moments { dsig / n } else { f64::NAN },
        r_per_iter: r_sum.iter().map(|s| s / n).collect(),
        c_per_iter: residuals.c_per_iter.clone(),
        ml_violations: violations,
        residuals: Some(residuals),
    })
}

/// `sigma_max / sigma_min`; infinite when `H` is rank deficient.
pub fn condition_number(h: &DMatrix<f64>) -> f64 {
    let s = h.clone().svd(false, false).singular_values;
    let max = s.max();
    let min = s.min();
    if min <= max * 1e-14 {
        f64::INFINITY
    } else {
        max / min
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionBin {
    pub cond_lo: f64,
    pub cond_hi: f64,
    pub channels: usize,
    pub ser: f64,
    pub ci95: f64,
}

/// Per-channel SER over `draws_per_channel` symbol and noise draws, bucketed
/// into `bins` equally populated condition-number bins. Rank-deficient
/// channels go into a final bin with `cond_lo = inf`.
#[allow(clippy::too_many_arguments)]
pub fn condition_binned_ser(
    det: &dyn Detector,
    n_tx: usize,
    n_rx: usize,
    qam_order: usize,
    snr_db: f64,
    channels: usize,
    draws_per_channel: usize,
    bins: usize,
    seed: u64,
) -> Result<Vec<ConditionBin>> {
    if bins == 0 || channels < bins || draws_per_channel == 0 {
        return Err(Error::Config("need bins >= 1, channels >= bins and draws >= 1".into()));
    }
    let c = Arc::new(Constellation::new(qam_order)?);
    let noise_std = (0.5 * snr_to_noise_var(snr_db, n_tx, n_rx)).sqrt();
    let h_std = (0.5 / n_rx as f64).sqrt();
    let base = RngStream::new(seed, ANALYSIS_STREAM ^ 0xc0);
    let per_channel: Vec<Result<(f64, u64, u64)>> = (0..channels)
        .into_par_iter()
        .map(|ch| {
            let mut rng = base.fork(ch as u64).rng();
            let mut g = || -> f64 { StandardNormal.sample(&mut rng) };
            let hc = DMatrix::from_fn(n_rx, n_tx, |_, _| nalgebra::Complex::new(g() * h_std, g() * h_std));
            let h = crate::model::lift_complex_to_real(&hc);
            let cond = condition_number(&h);
            let (mut e, mut s) = (0u64, 0u64);
            let mut rng = base.fork(ch as u64).fork(1).rng();
            for _ in 0..draws_per_channel {
                let x = DVector::from_fn(2 * n_tx, |_, _| {
                    c.real_points[rand::Rng::random_range(&mut rng, 0..c.m())]
                });
                let noise = DVector::from_fn(2 * n_rx, |_, _| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z * noise_std
                });
                let inst = SystemInstance::from_parts(h.clone(), x, noise, noise_std * noise_std, c.clone())?;
                let r = det.detect(&inst)?;
                e += inst.symbol_errors(&r.x_hard) as u64;
                s += inst.symbols() as u64;
            }
            Ok((cond, e, s))
        })
        .collect();
    let mut rows = per_channel.into_iter().collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| a.0.total_cmp(&b.0));
    let finite = rows.iter().take_while(|r| r.0.is_finite()).count();
    let mut out = Vec::new();
    let mut emit = |chunk: &[(f64, u64, u64)]| {
        if chunk.is_empty() {
            return;
        }
        let e: u64 = chunk.iter().map(|r| r.1).sum();
        let s: u64 = chunk.iter().map(|r| r.2).sum();
        let est = SerEstimate::from_counts(e, s);
        out.push(ConditionBin {
            cond_lo: chunk[0].0,
            cond_hi: chunk[chunk.len() - 1].0,
            channels: chunk.len(),
            ser: est.ser,
            ci95: est.ci95,
        });
    };
    for b in 0..bins {
        emit(&rows[b * finite / bins..(b + 1) * finite / bins]);
    }
    emit(&rows[finite..]);
    Ok(out)
}

/// Fraction of adjacent bin pairs whose SER does not decrease beyond the
/// combined 95% interval.
pub fn monotone_increasing_fraction(bins: &[ConditionBin]) -> f64 {
    let finite: Vec<&ConditionBin> = bins.iter().filter(|b| b.cond_lo.is_finite()).collect();
    if finite.len() < 2 {
        return 1.0;
    }
    let ok = finite
        .windows(2)
        .filter(|w| w[1].ser + (w[0].ci95.powi(2) + w[1].ci95.powi(2)).sqrt() >= w[0].ser)
        .count();
    ok as f64 / (finite.len() - 1) as f64
}

pub fn write_metrics_csv<W: Write>(w: W, reports: &[MetricsReport]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "detector", "n_tx", "n_rx", "qam_order", "snr_db", "instances", "ser", "ser_ci95", "delta_mu", "delta_sigma", "r_final",
        "c_final", "ml_violations",
    ])?;
    for r in reports {
        out.write_record([
            r.detector.clone(),
            r.n_tx.to_string(),
            r.n_rx.to_string(),
            r.qam_order.to_string(),
            r.snr_db.to_string(),
            r.instances.to_string(),
            r.ser.to_string(),
            r.ser_ci95.to_string(),
            r.delta_mu.to_string(),
            r.delta_sigma.to_string(),
            r.r_per_iter.last().copied().unwrap_or(f64::NAN).to_string(),
            r.c_per_iter.last().copied().unwrap_or(f64::NAN).to_string(),
            r.ml_violations.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_qq_csv<W: Write>(w: W, qq: &[(f64, f64)]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["gaussian_quantile", "residual_quantile"])?;
    for (a, b) in qq {
        out.write_record([a.to_string(), b.to_string()])?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_condition_csv<W: Write>(w: W, bins: &[ConditionBin]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for b in bins {
        out.serialize(b)?;
    }
    out.flush()?;
    Ok(())
}

/// Half-width of a 95% interval for a mean of `values`.
pub fn mean_ci95(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, Z95 * (var / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detect::{ml_oracle, EpConfig, EpDetector};
    use crate::model::sample_instance;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn qam(m: usize) -> Arc<Constellation> {
        Arc::new(Constellation::new(m).unwrap())
    }

    #[test]
    fn posterior_normalized_and_peaks_at_ml() {
        let c = qam(16);
        for seed in 0..5 {
            let inst = sample_instance(2, 3, &c, 8.0, RngStream::new(seed, 1));
            let post = enumerate_posterior(&inst, DEFAULT_POSTERIOR_BUDGET).unwrap();
            assert_abs_diff_eq!(post.probs.iter().sum::<f64>(), 1.0, epsilon = 1e-9);
            let (x_ml, _) = ml_oracle(&inst, DEFAULT_POSTERIOR_BUDGET).unwrap();
            assert_eq!(post.ml_x, x_ml);
            for (m, v) in post.mu.iter().zip(&post.sigma_diag) {
                assert!(m.abs() <= c.max() + 1e-12 && *v >= 0.0);
            }
        }
    }

    #[test]
    fn single_user_two_points_closed_form() {
        let c = qam(4);
        let a = c.real_points[1];
        let h = DMatrix::from_column_slice(2, 1, &[0.8, -0.3]);
        let noise = DVector::from_column_slice(&[0.1, 0.2]);
        let sigma2 = 0.3;
        let inst = SystemInstance::from_parts(h.clone(), DVector::from_element(1, a), noise, sigma2, c.clone()).unwrap();
        let post = enumerate_posterior(&inst, 16).unwrap();
        // p(+a)/p(-a) = exp(2 a h'y / sigma^2)
        let hty = (h.transpose() * &inst.y)[0];
        let p_plus = 1.0 / (1.0 + (-2.0 * a * hty / sigma2).exp());
        assert_abs_diff_eq!(post.probs[1], p_plus, epsilon = 1e-12);
        assert_abs_diff_eq!(post.mu[0], a * (2.0 * p_plus - 1.0), epsilon = 1e-12);
        assert_abs_diff_eq!(post.sigma_diag[0], a * a - post.mu[0].powi(2), epsilon = 1e-12);
    }

    #[test]
    fn huge_noise_gives_uniform_posterior() {
        let c = qam(16);
        let mut inst = sample_instance(1, 2, &c, 0.0, RngStream::new(3, 3));
        inst.noise_var = 1e12;
        let post = enumerate_posterior(&inst, 1 << 10).unwrap();
        for p in &post.probs {
            assert_abs_diff_eq!(*p, 1.0 / 16.0, epsilon = 1e-9);
        }
        for m in &post.mu {
            assert_abs_diff_eq!(*m, 0.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn budget_is_enforced() {
        let c = qam(16);
        let inst = sample_instance(4, 4, &c, 10.0, RngStream::new(1, 1));
        assert!(matches!(enumerate_posterior(&inst, 1 << 15), Err(Error::BudgetExceeded { .. })));
    }

    #[test]
    fn exact_moments_give_zero_gaps() {
        let c = qam(4);
        let inst = sample_instance(2, 4, &c, 5.0, RngStream::new(2, 2));
        let post = enumerate_posterior(&inst, 1 << 10).unwrap();
        assert_eq!(moment_gaps(&post.mu, &post.sigma_diag, &post), (0.0, 0.0));
    }

    #[test]
    fn probability_ratio_two_ways_agree() {
        let c = qam(4);
        let mut rng = RngStream::new(5, 5).rng();
        for seed in 0..20 {
            let inst = sample_instance(3, 4, &c, 2.0, RngStream::new(seed, 9));
            let post = enumerate_posterior(&inst, 1 << 12).unwrap();
            let x: Vec<f64> = (0..6).map(|_| c.real_points[rng.random_range(0..2)]).collect();
            let a = probability_ratio(&inst, &[x.clone()], &post.ml_x)[0];
            let b = probability_ratio_normalized(&post, &x, &c);
            assert!(a <= 1.0 + 1e-12 && a > 0.0);
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn ml_estimate_has_unit_ratio() {
        let c = qam(4);
        let inst = sample_instance(2, 4, &c, 5.0, RngStream::new(2, 2));
        let (x, _) = ml_oracle(&inst, 1 << 10).unwrap();
        assert_eq!(probability_ratio(&inst, &[x.clone(), x.clone()], &x), vec![1.0, 1.0]);
    }

    fn synthetic_trace(eps: &[f64]) -> Vec<IterationTrace> {
        vec![IterationTrace {
            cavity_mean: eps.to_vec(),
            cavity_var: vec![1.0; eps.len()],
            ..Default::default()
        }]
    }

    #[test]
    fn independent_residuals_have_vanishing_c() {
        let k = 6;
        let n = 100_000;
        let mut rng = RngStream::new(11, 0).rng();
        let mut acc = ResidualAccumulator::new(k, 1);
        for _ in 0..n {
            let e: Vec<f64> = (0..k).map(|_| StandardNormal.sample(&mut rng)).collect();
            acc.push(&ResidualAccumulator::residuals(&synthetic_trace(&e), &vec![0.0; k])).unwrap();
        }
        let s = acc.finish(50).unwrap();
        assert!(s.c_per_iter[0] < 0.05 * k as f64, "c = {}", s.c_per_iter[0]);
        // Null spread is about sqrt(K(K-1)/n).
        assert!(s.c_per_iter[0] < 4.0 * ((k * (k - 1)) as f64 / n as f64).sqrt());
        let p = &s.pearson[0];
        for i in 0..k {
            assert_eq!(p[(i, i)], 1.0);
            for j in 0..k {
                assert_abs_diff_eq!(p[(i, j)], p[(j, i)], epsilon = 1e-12);
            }
        }
        // Gaussian residuals sit on the QQ diagonal.
        for (g, e) in &s.qq {
            assert_abs_diff_eq!(g, e, epsilon = 0.05);
        }
    }

    #[test]
    fn duplicated_users_are_fully_correlated() {
        let mut rng = RngStream::new(12, 0).rng();
        let traces: Vec<Vec<IterationTrace>> = (0..500)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                let w: f64 = StandardNormal.sample(&mut rng);
                synthetic_trace(&[z, z, w])
            })
            .collect();
        let s = residual_noise_stats(&traces, &vec![vec![0.0; 3]; 500], 10).unwrap();
        assert_abs_diff_eq!(s.pearson[0][(0, 1)], 1.0, epsilon = 1e-9);
        assert!(s.c_per_iter[0] >= 2f64.sqrt() - 1e-9);
    }

    #[test]
    fn one_realization_rejected() {
        let traces = vec![synthetic_trace(&[0.1, 0.2])];
        assert!(residual_noise_stats(&traces, &[vec![0.0, 0.0]], 10).is_err());
    }

    #[test]
    fn condition_numbers() {
        let q = DMatrix::from_fn(6, 3, |i, j| if i == j { 2.5 } else { 0.0 });
        assert_abs_diff_eq!(condition_number(&q), 1.0, epsilon = 1e-12);
        let mut r = DMatrix::from_fn(4, 2, |i, j| (i + 2 * j) as f64);
        r.set_column(1, &(r.column(0) * 2.0));
        assert!(condition_number(&r).is_infinite());
    }

    #[test]
    fn analysis_reports_are_consistent() {
        let det = EpDetector {
            config: EpConfig {
                trace: true,
                ..Default::default()
            },
        };
        let opts = AnalysisOptions {
            n_tx: 2,
            n_rx: 4,
            qam_order: 4,
            snr_db: 6.0,
            instances: 300,
            seed: 1,
            budget: 1 << 16,
            qq_points: 20,
            moments: true,
        };
        let rep = analyze_detector(&det, &opts).unwrap();
        assert_eq!(rep.r_per_iter.len(), 10);
        assert!(rep.r_per_iter.iter().all(|&r| r > 0.0 && r <= 1.0));
        assert!(rep.delta_mu >= 0.0 && rep.delta_sigma >= 0.0);
        assert_eq!(rep.ml_violations, 0);
        // Without tracing there is nothing to analyze.
        assert!(analyze_detector(&EpDetector::default(), &opts).is_err());
    }

    #[test]
    fn ep_ser_rises_with_condition_number() {
        let det = EpDetector::default();
        let bins = condition_binned_ser(&det, 4, 4, 4, 14.0, 2000, 10, 4, 3).unwrap();
        assert_eq!(bins.len(), 4);
        assert!(bins.windows(2).all(|w| w[0].cond_hi <= w[1].cond_lo));
        assert!(bins[3].ser > bins[0].ser);
        assert_eq!(bins.iter().map(|b| b.channels).sum::<usize>(), 2000);
    }
}
