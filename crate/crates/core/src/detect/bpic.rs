use nalgebra::{DMatrix, DVector};

use super::{DetectionResult, Detector, IterationTrace};
use crate::cavity::{discrete_moments, CavityDistribution};
use crate::error::{Error, Result};
use crate::model::SystemInstance;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BpicConfig {
    pub iterations: usize,
    /// Variance attached to the all-zero starting estimate.
    pub initial_variance: f64,
    pub trace: bool,
}

impl Default for BpicConfig {
    fn default() -> Self {
        Self {
            iterations: 10,
            initial_variance: 0.0,
            trace: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BpicState {
    pub x_hat: Vec<f64>,
    pub v_hat: Vec<f64>,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub dsc_error_prev: Vec<f64>,
    pub dsc_error_cur: Vec<f64>,
    pub rho: Vec<f64>,
    /// Number of completed iterations.
    pub iteration: usize,
}

impl BpicState {
    /// `x_hat = 0` (interference cancellation inactive) with variance `v0`.
    pub fn initial(k: usize, v0: f64) -> Self {
        Self {
            x_hat: vec![0.0; k],
            v_hat: vec![v0; k],
            mu: vec![0.0; k],
            sigma: vec![0.0; k],
            dsc_error_prev: vec![0.0; k],
            dsc_error_cur: vec![0.0; k],
            rho: vec![1.0; k],
            iteration: 0,
        }
    }
}

/// Gram matrix and matched-filter outputs shared by every iteration.
pub struct BpicSystem {
    gram: DMatrix<f64>,
    hty: DVector<f64>,
    noise_var: f64,
}

impl BpicSystem {
    pub fn new(inst: &SystemInstance) -> Result<Self> {
        let gram = inst.h.tr_mul(&inst.h);
        for k in 0..gram.nrows() {
            if !(gram[(k, k)] > 0.0) {
                return Err(Error::ZeroColumn(k));
            }
        }
        Ok(Self {
            hty: inst.h.tr_mul(&inst.y),
            gram,
            noise_var: inst.noise_var,
        })
    }

    /// Interference-cancelled matched filter mean and its variance.
    pub fn observe(&self, x_prev: &[f64], v_prev: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let k = x_prev.len();
        let mut mu = Vec::with_capacity(k);
        let mut sigma = Vec::with_capacity(k);
        for i in 0..k {
            let gii = self.gram[(i, i)];
            let mut interference = 0.0;
            let mut var = gii * self.noise_var;
            for j in 0..k {
                if j != i {
                    let s = self.gram[(i, j)];
                    interference += s * x_prev[j];
                    var += s * s * v_prev[j];
                }
            }
            mu.push((self.hty[i] - interference) / gii);
            sigma.push(var / (gii * gii));
        }
        (mu, sigma)
    }

    /// Squared matched-filter residual per user for the estimate `x`.
    pub fn dsc_errors(&self, x: &[f64]) -> Vec<f64> {
        let k = x.len();
        (0..k)
            .map(|i| {
                let gx: f64 = (0..k).map(|j| self.gram[(i, j)] * x[j]).sum();
                let r = (self.hty[i] - gx) / self.gram[(i, i)];
                r * r
            })
            .collect()
    }
}

pub fn bpic_observe(inst: &SystemInstance, x_hat_prev: &[f64], v_hat_prev: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    Ok(BpicSystem::new(inst)?.observe(x_hat_prev, v_hat_prev))
}

/// Weight for the new estimate; both errors zero splits evenly.
fn dsc_weight(e_prev: f64, e_cur: f64) -> f64 {
    let s = e_prev + e_cur;
    if s > 0.0 {
        e_prev / s
    } else {
        0.5
    }
}

/// Decision statistics combining of the new estimates with the previous ones.
/// On the first iteration the new estimates are taken as they are.
pub(crate) fn dsc_update(sys: &BpicSystem, x_new: Vec<f64>, v_new: Vec<f64>, state: &mut BpicState) {
    let e_cur = sys.dsc_errors(&x_new);
    state.iteration += 1;
    if state.iteration >= 2 {
        for i in 0..x_new.len() {
            let rho = dsc_weight(state.dsc_error_cur[i], e_cur[i]);
            state.rho[i] = rho;
            state.x_hat[i] = (1.0 - rho) * state.x_hat[i] + rho * x_new[i];
            state.v_hat[i] = (1.0 - rho) * state.v_hat[i] + rho * v_new[i];
        }
    } else {
        state.x_hat = x_new;
        state.v_hat = v_new;
    }
    state.dsc_error_prev = std::mem::replace(&mut state.dsc_error_cur, e_cur);
}

/// Apply one DSC step to `state` given this iteration's estimates.
pub fn bpic_dsc(x_hat_new: &[f64], v_hat_new: &[f64], state: &BpicState, inst: &SystemInstance) -> Result<BpicState> {
    let sys = BpicSystem::new(inst)?;
    let mut next = state.clone();
    dsc_update(&sys, x_hat_new.to_vec(), v_hat_new.to_vec(), &mut next);
    Ok(next)
}

pub fn bpic_detect(inst: &SystemInstance, cfg: &BpicConfig) -> Result<(DetectionResult, Vec<BpicState>)> {
    if cfg.iterations == 0 {
        return Err(Error::Config("BPIC needs at least one iteration".into()));
    }
    if !(cfg.initial_variance >= 0.0) {
        return Err(Error::Config("BPIC initial variance must be non-negative".into()));
    }
    let c = &*inst.constellation;
    let sys = BpicSystem::new(inst)?;
    let mut state = BpicState::initial(inst.k(), cfg.initial_variance);
    let mut soft = Vec::with_capacity(cfg.iterations);
    let mut trace = Vec::new();
    let mut states = Vec::new();

    for _ in 0..cfg.iterations {
        let (mu, sigma) = sys.observe(&state.x_hat, &state.v_hat);
        let q = CavityDistribution::discretized_gaussian(&mu, &sigma, c);
        let (x_new, v_new) = discrete_moments(&q, c);
        dsc_update(&sys, x_new, v_new, &mut state);
        if cfg.trace {
            trace.push(IterationTrace {
                cavity_mean: mu.clone(),
                cavity_var: sigma.clone(),
                post_mean: mu.clone(),
                post_var: sigma.clone(),
                x_hat: state.x_hat.clone(),
                v_hat: state.v_hat.clone(),
            });
        }
        state.mu = mu;
        state.sigma = sigma;
        if cfg.trace {
            states.push(state.clone());
        }
        soft.push(state.x_hat.clone());
    }
    Ok((DetectionResult::from_soft(soft, trace, c), states))
}

#[derive(Debug, Clone, Default)]
pub struct BpicDetector {
    pub config: BpicConfig,
}

impl Detector for BpicDetector {
    fn name(&self) -> &str {
        "bpic"
    }

    fn detect(&self, inst: &SystemInstance) -> Result<DetectionResult> {
        bpic_detect(inst, &self.config).map(|(r, _)| r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detect::hard_decision;
    use crate::model::{sample_instance, Constellation};
    use crate::rng::RngStream;
    use approx::assert_abs_diff_eq;
    use std::sync::Arc;

    fn qam4() -> Arc<Constellation> {
        Arc::new(Constellation::new(4).unwrap())
    }

    fn orthogonal_instance(noiseless: bool) -> SystemInstance {
        let c = qam4();
        // Scaled orthogonal columns: Q from a Householder reflection, times 2.
        let v = DVector::from_vec(vec![1.0, 2.0, -1.0, 0.5, 0.3, -0.7]);
        let q: DMatrix<f64> = DMatrix::identity(6, 6) - (&v * v.transpose()) * (2.0 / v.norm_squared());
        let h = q.columns(0, 4).into_owned() * 2.0;
        let x = DVector::from_vec(vec![c.real_points[0], c.real_points[1], c.real_points[1], c.real_points[0]]);
        let noise = if noiseless {
            DVector::zeros(6)
        } else {
            DVector::from_fn(6, |i, _| 0.05 * (i as f64 - 2.0))
        };
        SystemInstance::from_parts(h, x, noise, 0.01, c).unwrap()
    }

    #[test]
    fn first_iteration_is_matched_filter() {
        let inst = sample_instance(4, 8, &qam4(), 7.0, RngStream::new(1, 1));
        let (mu, _) = bpic_observe(&inst, &[0.0; 8], &[0.5; 8]).unwrap();
        for k in 0..8 {
            let hk = inst.h.column(k);
            assert_abs_diff_eq!(mu[k], hk.dot(&inst.y) / hk.dot(&hk), epsilon = 1e-12);
        }
    }

    #[test]
    fn orthogonal_columns_have_no_interference_variance() {
        let inst = orthogonal_instance(false);
        let (_, sigma) = bpic_observe(&inst, &[0.3; 4], &[0.0; 4]).unwrap();
        for k in 0..4 {
            let hk = inst.h.column(k);
            assert_abs_diff_eq!(sigma[k], inst.noise_var / hk.dot(&hk), epsilon = 1e-14);
        }
    }

    #[test]
    fn perfect_cancellation() {
        let mut inst = sample_instance(4, 8, &qam4(), 7.0, RngStream::new(2, 1));
        inst.y = &inst.h * &inst.x_true;
        let x: Vec<f64> = inst.x_true.iter().copied().collect();
        let (mu, _) = bpic_observe(&inst, &x, &[0.0; 8]).unwrap();
        for k in 0..8 {
            assert_abs_diff_eq!(mu[k], x[k], epsilon = 1e-12);
        }
    }

    #[test]
    fn dsc_weights() {
        assert_eq!(dsc_weight(0.3, 0.3), 0.5);
        assert_eq!(dsc_weight(0.0, 0.0), 0.5);
        assert!(dsc_weight(1.0, 1e-300) > 1.0 - 1e-12);
        let rho = dsc_weight(0.2, 0.7);
        assert!(rho > 0.0 && rho < 1.0);
    }

    #[test]
    fn dsc_fixed_point() {
        let inst = sample_instance(2, 4, &qam4(), 7.0, RngStream::new(3, 1));
        let mut s = BpicState::initial(4, 0.5);
        s.iteration = 1;
        s.x_hat = vec![0.2, -0.4, 0.6, 0.1];
        s.v_hat = vec![0.1, 0.2, 0.3, 0.4];
        s.dsc_error_cur = vec![0.5, 0.1, 2.0, 0.0];
        let next = bpic_dsc(&s.x_hat.clone(), &s.v_hat.clone(), &s, &inst).unwrap();
        for i in 0..4 {
            assert_abs_diff_eq!(next.x_hat[i], s.x_hat[i], epsilon = 1e-15);
            assert_abs_diff_eq!(next.v_hat[i], s.v_hat[i], epsilon = 1e-15);
            assert!(next.rho[i] >= 0.0 && next.rho[i] <= 1.0);
        }
        assert_eq!(next.iteration, 2);
    }

    #[test]
    fn single_iteration_equals_matched_filter_decisions() {
        let c = qam4();
        for seed in 0..50 {
            let inst = sample_instance(4, 8, &c, 6.0, RngStream::new(seed, 9));
            let cfg = BpicConfig { iterations: 1, ..Default::default() };
            let (r, _) = bpic_detect(&inst, &cfg).unwrap();
            let mf: Vec<f64> = (0..8)
                .map(|k| {
                    let hk = inst.h.column(k);
                    hk.dot(&inst.y) / hk.dot(&hk)
                })
                .collect();
            assert_eq!(r.x_hard, hard_decision(&mf, &c));
        }
    }

    #[test]
    fn noiseless_orthogonal_recovered_in_one_iteration() {
        let inst = orthogonal_instance(true);
        let cfg = BpicConfig { iterations: 1, ..Default::default() };
        let (r, _) = bpic_detect(&inst, &cfg).unwrap();
        assert_eq!(r.x_hard, inst.x_true.iter().copied().collect::<Vec<_>>());
    }

    #[test]
    fn zero_column_rejected() {
        let c = qam4();
        let mut h = DMatrix::identity(4, 2);
        h[(1, 1)] = 0.0;
        let inst = SystemInstance::from_parts(
            h,
            DVector::from_element(2, c.real_points[0]),
            DVector::zeros(4),
            0.1,
            c,
        )
        .unwrap();
        assert!(matches!(bpic_detect(&inst, &BpicConfig::default()), Err(Error::ZeroColumn(1))));
    }
}
