//! Classical detectors: EP, BPIC, linear MMSE and the exhaustive ML oracle.

mod bpic;
mod ep;
mod ml;
mod mmse;

pub use bpic::{bpic_detect, bpic_dsc, bpic_observe, BpicConfig, BpicDetector, BpicState, BpicSystem};
pub(crate) use bpic::dsc_update;
pub use ep::{ep_detect, ep_estimate, ep_observe, EpConfig, EpDetector, EpObservation, EpState, EpSystem};
pub use ml::{for_each_candidate, ml_objective, ml_oracle, MlDetector, DEFAULT_ML_BUDGET};
pub use mmse::{mmse_detect, MmseDetector};

use crate::error::Result;
use crate::model::{Constellation, SystemInstance};

/// Lower bound applied to cavity and estimate variances.
pub const VARIANCE_FLOOR: f64 = 1e-13;

/// Per-iteration internals exposed to the analysis suite.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IterationTrace {
    /// Gaussian (or refined) belief fed to the estimator: `(x_obs, v_obs)` or `(mu, Sigma)`.
    pub cavity_mean: Vec<f64>,
    pub cavity_var: Vec<f64>,
    /// Diagonal Gaussian approximation of the posterior.
    pub post_mean: Vec<f64>,
    pub post_var: Vec<f64>,
    pub x_hat: Vec<f64>,
    pub v_hat: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionResult {
    pub x_hard: Vec<f64>,
    /// `x_hat` after each iteration (always recorded).
    pub x_soft_trace: Vec<Vec<f64>>,
    /// Filled only when tracing is enabled.
    pub cavity_trace: Vec<IterationTrace>,
    pub iterations_run: usize,
}

impl DetectionResult {
    pub(crate) fn from_soft(
        soft: Vec<Vec<f64>>,
        cavity_trace: Vec<IterationTrace>,
        c: &Constellation,
    ) -> Self {
        let x_hard = hard_decision(soft.last().expect("at least one iteration"), c);
        let iterations_run = soft.len();
        Self {
            x_hard,
            x_soft_trace: soft,
            cavity_trace,
            iterations_run,
        }
    }
}

/// Common detector interface.
pub trait Detector: Send + Sync {
    fn name(&self) -> &str;
    fn detect(&self, inst: &SystemInstance) -> Result<DetectionResult>;
}

/// Nearest real constellation point per component.
pub fn hard_decision(x: &[f64], c: &Constellation) -> Vec<f64> {
    x.iter().map(|&v| c.nearest(v)).collect()
}
