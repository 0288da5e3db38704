use nalgebra::{DMatrix, DVector};

use super::{DetectionResult, Detector};
use crate::error::Result;
use crate::linalg::SpdFactor;
use crate::model::SystemInstance;

/// Linear MMSE estimate `(H^T H + sigma^2/Es I)^{-1} H^T y`, soft output.
pub fn mmse_estimate(inst: &SystemInstance) -> Result<DVector<f64>> {
    let k = inst.k();
    let ridge = inst.noise_var / inst.constellation.es_real;
    let a = inst.h.tr_mul(&inst.h) + DMatrix::identity(k, k) * ridge;
    Ok(SpdFactor::new(a)?.solve(&inst.h.tr_mul(&inst.y)))
}

pub fn mmse_detect(inst: &SystemInstance) -> Result<DetectionResult> {
    let x = mmse_estimate(inst)?;
    Ok(DetectionResult::from_soft(
        vec![x.iter().copied().collect()],
        Vec::new(),
        &inst.constellation,
    ))
}

#[derive(Debug, Clone, Copy, Default)]
pub struct MmseDetector;

impl Detector for MmseDetector {
    fn name(&self) -> &str {
        "mmse"
    }

    fn detect(&self, inst: &SystemInstance) -> Result<DetectionResult> {
        mmse_detect(inst)
    }
}
