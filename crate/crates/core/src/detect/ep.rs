use nalgebra::{DMatrix, DVector};

use super::{DetectionResult, Detector, IterationTrace, VARIANCE_FLOOR};
use crate::cavity::{discrete_moments, CavityDistribution};
use crate::error::{Error, Result};
use crate::linalg::SpdFactor;
use crate::model::SystemInstance;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpConfig {
    pub iterations: usize,
    pub damping: f64,
    pub trace: bool,
}

impl Default for EpConfig {
    fn default() -> Self {
        Self {
            iterations: 10,
            damping: 0.9,
            trace: false,
        }
    }
}

/// Tunable prior parameters and the quantities derived from them in one iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct EpState {
    pub gamma: Vec<f64>,
    pub lambda: Vec<f64>,
    pub sigma_post: Vec<f64>,
    pub mu_post: Vec<f64>,
    pub x_obs: Vec<f64>,
    pub v_obs: Vec<f64>,
    pub x_hat: Vec<f64>,
    pub v_hat: Vec<f64>,
    pub iteration: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpObservation {
    pub sigma_post: Vec<f64>,
    pub mu_post: Vec<f64>,
    pub x_obs: Vec<f64>,
    pub v_obs: Vec<f64>,
}

/// `sigma^-2 H^T H` and `sigma^-2 H^T y`, fixed over the iterations.
pub struct EpSystem {
    gram_scaled: DMatrix<f64>,
    hty_scaled: DVector<f64>,
}

impl EpSystem {
    pub fn new(inst: &SystemInstance) -> Self {
        let inv = 1.0 / inst.noise_var;
        Self {
            gram_scaled: inst.h.tr_mul(&inst.h) * inv,
            hty_scaled: inst.h.tr_mul(&inst.y) * inv,
        }
    }

    pub fn observe(&self, gamma: &[f64], lambda: &[f64]) -> Result<EpObservation> {
        let k = gamma.len();
        let mut a = self.gram_scaled.clone();
        for i in 0..k {
            if !(lambda[i] > 0.0) {
                return Err(Error::NonPositiveVariance(lambda[i], 1.0));
            }
            a[(i, i)] += lambda[i];
        }
        let factor = SpdFactor::new(a)?;
        let rhs = DVector::from_fn(k, |i, _| self.hty_scaled[i] + gamma[i]);
        let mu = factor.solve(&rhs);
        let sigma = factor.inverse_diagonal();

        let mut x_obs = Vec::with_capacity(k);
        let mut v_obs = Vec::with_capacity(k);
        for i in 0..k {
            let denom = (1.0 - sigma[i] * lambda[i]).max(VARIANCE_FLOOR);
            let v = (sigma[i] / denom).max(VARIANCE_FLOOR);
            v_obs.push(v);
            x_obs.push(v * (mu[i] / sigma[i] - gamma[i]));
        }
        Ok(EpObservation {
            sigma_post: sigma.iter().copied().collect(),
            mu_post: mu.iter().copied().collect(),
            x_obs,
            v_obs,
        })
    }
}

/// Posterior moments and cavity for the current `(gamma, lambda)`.
pub fn ep_observe(inst: &SystemInstance, gamma: &[f64], lambda: &[f64]) -> Result<EpObservation> {
    EpSystem::new(inst).observe(gamma, lambda)
}

/// Moment-matched update of `(gamma, lambda)` with the positivity guard and damping.
pub fn ep_estimate(
    x_hat: &[f64],
    v_hat: &[f64],
    x_obs: &[f64],
    v_obs: &[f64],
    prev_gamma: &[f64],
    prev_lambda: &[f64],
    eta: f64,
) -> (Vec<f64>, Vec<f64>) {
    let k = x_hat.len();
    let mut gamma = Vec::with_capacity(k);
    let mut lambda = Vec::with_capacity(k);
    for i in 0..k {
        let v = v_hat[i].max(VARIANCE_FLOOR);
        let vo = v_obs[i].max(VARIANCE_FLOOR);
        let mut l = 1.0 / v - 1.0 / vo;
        let mut g = x_hat[i] / v - x_obs[i] / vo;
        // lambda is an inverse variance; zero is as invalid as negative.
        if !(l > 0.0) {
            l = prev_lambda[i];
            g = prev_gamma[i];
        }
        lambda.push((1.0 - eta) * l + eta * prev_lambda[i]);
        gamma.push((1.0 - eta) * g + eta * prev_gamma[i]);
    }
    (gamma, lambda)
}

pub fn ep_detect(inst: &SystemInstance, cfg: &EpConfig) -> Result<(DetectionResult, Vec<EpState>)> {
    if cfg.iterations == 0 {
        return Err(Error::Config("EP needs at least one iteration".into()));
    }
    let c = &*inst.constellation;
    let k = inst.k();
    let sys = EpSystem::new(inst);
    let mut gamma = vec![0.0; k];
    let mut lambda = vec![1.0 / c.es_real; k];
    let mut soft = Vec::with_capacity(cfg.iterations);
    let mut trace = Vec::new();
    let mut states = Vec::new();

    for t in 1..=cfg.iterations {
        let obs = sys.observe(&gamma, &lambda)?;
        let q = CavityDistribution::discretized_gaussian(&obs.x_obs, &obs.v_obs, c);
        let (x_hat, v_hat) = discrete_moments(&q, c);
        let (g, l) = ep_estimate(&x_hat, &v_hat, &obs.x_obs, &obs.v_obs, &gamma, &lambda, cfg.damping);
        if cfg.trace {
            trace.push(IterationTrace {
                cavity_mean: obs.x_obs.clone(),
                cavity_var: obs.v_obs.clone(),
                post_mean: obs.mu_post.clone(),
                post_var: obs.sigma_post.clone(),
                x_hat: x_hat.clone(),
                v_hat: v_hat.clone(),
            });
            states.push(EpState {
                gamma: g.clone(),
                lambda: l.clone(),
                sigma_post: obs.sigma_post,
                mu_post: obs.mu_post,
                x_obs: obs.x_obs,
                v_obs: obs.v_obs,
                x_hat: x_hat.clone(),
                v_hat,
                iteration: t,
            });
        }
        gamma = g;
        lambda = l;
        soft.push(x_hat);
    }
    Ok((DetectionResult::from_soft(soft, trace, c), states))
}

#[derive(Debug, Clone, Default)]
pub struct EpDetector {
    pub config: EpConfig,
}

impl Detector for EpDetector {
    fn name(&self) -> &str {
        "ep"
    }

    fn detect(&self, inst: &SystemInstance) -> Result<DetectionResult> {
        ep_detect(inst, &self.config).map(|(r, _)| r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cavity::gaussian_product;
    use crate::model::{sample_instance, Constellation};
    use crate::rng::RngStream;
    use approx::assert_abs_diff_eq;
    use std::sync::Arc;

    fn qam4() -> Arc<Constellation> {
        Arc::new(Constellation::new(4).unwrap())
    }

    fn identity_instance(k: usize, noise_var: f64) -> SystemInstance {
        let c = qam4();
        let x = DVector::from_fn(k, |i, _| c.real_points[i % 2]);
        let noise = DVector::from_fn(k, |i, _| 0.1 * (i as f64 - 1.5));
        SystemInstance::from_parts(DMatrix::identity(k, k), x, noise, noise_var, c).unwrap()
    }

    #[test]
    fn observe_closed_form_identity_channel() {
        let inst = identity_instance(4, 1.0);
        let es = inst.constellation.es_real;
        let obs = ep_observe(&inst, &[0.0; 4], &[1.0 / es; 4]).unwrap();
        let s = 1.0 / (1.0 + 1.0 / es);
        for i in 0..4 {
            assert_abs_diff_eq!(obs.sigma_post[i], s, epsilon = 1e-14);
            assert_abs_diff_eq!(obs.mu_post[i], s * inst.y[i], epsilon = 1e-14);
        }
    }

    #[test]
    fn uninformative_prior_cavity_equals_posterior() {
        let c = qam4();
        let inst = sample_instance(2, 4, &c, 10.0, RngStream::new(5, 0));
        let obs = ep_observe(&inst, &[0.0; 4], &[1e-12; 4]).unwrap();
        for i in 0..4 {
            assert_abs_diff_eq!(obs.x_obs[i], obs.mu_post[i], epsilon = 1e-9);
            assert!((obs.v_obs[i] / obs.sigma_post[i] - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn cavity_inverts_prior_factor() {
        let c = qam4();
        let inst = sample_instance(4, 8, &c, 8.0, RngStream::new(6, 1));
        let gamma = [0.3, -0.2, 0.1, 0.0, 0.5, -0.4, 0.2, 0.05];
        let lambda = [2.0, 1.5, 3.0, 0.7, 2.2, 1.1, 4.0, 2.5];
        let obs = ep_observe(&inst, &gamma, &lambda).unwrap();
        for i in 0..8 {
            let (m, v) =
                gaussian_product(obs.x_obs[i], obs.v_obs[i], gamma[i] / lambda[i], 1.0 / lambda[i]).unwrap();
            assert_abs_diff_eq!(m, obs.mu_post[i], epsilon = 1e-9);
            assert_abs_diff_eq!(v, obs.sigma_post[i], epsilon = 1e-9);
        }
    }

    #[test]
    fn system_matrix_is_spd_above_min_lambda() {
        let c = qam4();
        let inst = sample_instance(4, 4, &c, 5.0, RngStream::new(2, 2));
        let lambda = [0.5, 1.0, 2.0, 0.25, 1.0, 3.0, 0.75, 0.3];
        let mut a = inst.h.tr_mul(&inst.h) / inst.noise_var;
        for i in 0..8 {
            a[(i, i)] += lambda[i];
        }
        let eig = a.clone().symmetric_eigen().eigenvalues;
        assert!(eig.min() >= 0.25 - 1e-9);
        let f = SpdFactor::new(a.clone()).unwrap();
        let b = DVector::from_fn(8, |i, _| (i as f64).sin());
        assert!((&a * f.solve(&b) - &b).norm() / b.norm() < 1e-10);
    }

    #[test]
    fn estimate_no_information_reverts_then_damps() {
        let prev_g = [0.1, -0.2];
        let prev_l = [2.0, 3.0];
        let (g, l) = ep_estimate(&[0.3, 0.1], &[0.4, 0.2], &[0.3, 0.1], &[0.4, 0.2], &prev_g, &prev_l, 0.5);
        assert_eq!(g, prev_g.to_vec());
        assert_eq!(l, prev_l.to_vec());
    }

    #[test]
    fn estimate_damping_extremes() {
        let prev_g = [0.1];
        let prev_l = [2.0];
        let (g, l) = ep_estimate(&[0.5], &[0.1], &[0.2], &[0.5], &prev_g, &prev_l, 1.0);
        assert_eq!((g[0], l[0]), (0.1, 2.0));
        let (g, l) = ep_estimate(&[0.5], &[0.1], &[0.2], &[0.5], &prev_g, &prev_l, 0.0);
        assert_abs_diff_eq!(l[0], 1.0 / 0.1 - 1.0 / 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(g[0], 0.5 / 0.1 - 0.2 / 0.5, epsilon = 1e-12);
    }

    #[test]
    fn negative_lambda_reverts() {
        // v_hat > v_obs gives a negative precision.
        let (g, l) = ep_estimate(&[0.0], &[1.0], &[0.3], &[0.5], &[0.7], &[1.3], 0.0);
        assert_eq!((g[0], l[0]), (0.7, 1.3));
    }

    #[test]
    fn noiseless_recovery() {
        let c = qam4();
        for seed in 0..20 {
            let mut inst = sample_instance(4, 8, &c, 30.0, RngStream::new(seed, 0));
            inst.noise.fill(0.0);
            inst.y = &inst.h * &inst.x_true;
            inst.noise_var = 1e-4;
            let (r, _) = ep_detect(&inst, &EpConfig::default()).unwrap();
            assert_eq!(r.x_hard, inst.x_true.iter().copied().collect::<Vec<_>>());
        }
    }

    #[test]
    fn lambda_stays_positive() {
        let c = Arc::new(Constellation::new(16).unwrap());
        for seed in 0..10 {
            let inst = sample_instance(8, 8, &c, 15.0, RngStream::new(seed, 4));
            let cfg = EpConfig { trace: true, ..Default::default() };
            let (_, states) = ep_detect(&inst, &cfg).unwrap();
            for s in &states {
                assert!(s.lambda.iter().all(|&l| l > 0.0));
                assert!(s.v_obs.iter().all(|&v| v > 0.0));
            }
        }
    }

    #[test]
    fn zero_iterations_rejected() {
        let inst = identity_instance(2, 0.1);
        let cfg = EpConfig { iterations: 0, ..Default::default() };
        assert!(ep_detect(&inst, &cfg).is_err());
    }
}
