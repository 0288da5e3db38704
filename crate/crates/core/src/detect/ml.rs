use nalgebra::DVector;

use super::{DetectionResult, Detector};
use crate::error::{Error, Result};
use crate::model::SystemInstance;

pub const DEFAULT_ML_BUDGET: u128 = 1 << 24;

/// `||y - H x||^2`.
pub fn ml_objective(inst: &SystemInstance, x: &[f64]) -> f64 {
    let xv = DVector::from_column_slice(x);
    (&inst.y - &inst.h * xv).norm_squared()
}

fn check_budget(m: usize, k: usize, budget: u128) -> Result<u128> {
    let mut required: u128 = 1;
    for _ in 0..k {
        required = required.saturating_mul(m as u128);
    }
    if required > budget {
        return Err(Error::BudgetExceeded { required, budget });
    }
    Ok(required)
}

/// Visit every `x in Omega^K` in lexicographic order of constellation indices
/// (first user most significant), passing the index vector and `||y - Hx||^2`.
///
/// The objective is updated incrementally through the quadratic form
/// `y'y - 2 x'H'y + x'Gx` and refreshed exactly whenever a high-order digit changes.
pub fn for_each_candidate<F>(inst: &SystemInstance, budget: u128, mut visit: F) -> Result<()>
where
    F: FnMut(&[usize], f64),
{
    let c = &inst.constellation;
    let m = c.m();
    let k = inst.k();
    check_budget(m, k, budget)?;
    let g = inst.h.tr_mul(&inst.h);
    let hty = inst.h.tr_mul(&inst.y);
    let yy = inst.y.norm_squared();
    let pts = &c.real_points;

    let mut idx = vec![0usize; k];
    let mut x: Vec<f64> = vec![pts[0]; k];
    let mut gx = vec![0.0; k];
    let refresh = |x: &[f64], gx: &mut [f64]| -> f64 {
        let mut obj = yy;
        for i in 0..k {
            gx[i] = (0..k).map(|j| g[(i, j)] * x[j]).sum();
        }
        for i in 0..k {
            obj += x[i] * (gx[i] - 2.0 * hty[i]);
        }
        obj
    };
    let mut obj = refresh(&x, &mut gx);
    // Digits at or above this position trigger an exact recomputation.
    let refresh_level = k.saturating_sub(10);

    loop {
        visit(&idx, obj);
        // Odometer increment from the last position.
        let mut pos = k;
        loop {
            if pos == 0 {
                return Ok(());
            }
            pos -= 1;
            if idx[pos] + 1 < m {
                break;
            }
        }
        let exact = pos < refresh_level;
        for p in pos..k {
            let new_i = if p == pos { idx[p] + 1 } else { 0 };
            if new_i == idx[p] {
                continue;
            }
            let delta = pts[new_i] - x[p];
            idx[p] = new_i;
            x[p] = pts[new_i];
            if exact {
                continue;
            }
            obj += delta * (2.0 * gx[p] - 2.0 * hty[p] + delta * g[(p, p)]);
            for i in 0..k {
                gx[i] += delta * g[(i, p)];
            }
        }
        if exact {
            obj = refresh(&x, &mut gx);
        }
    }
}

/// Exhaustive maximum-likelihood solution and its objective. Ties go to the
/// lexicographically first candidate.
pub fn ml_oracle(inst: &SystemInstance, budget: u128) -> Result<(Vec<f64>, f64)> {
    let mut best = f64::INFINITY;
    let mut best_idx = vec![0usize; inst.k()];
    for_each_candidate(inst, budget, |idx, obj| {
        if best.is_infinite() || obj < best - 1e-12 * best.abs().max(1.0) {
            best = obj;
            best_idx.copy_from_slice(idx);
        }
    })?;
    let pts = &inst.constellation.real_points;
    let x: Vec<f64> = best_idx.iter().map(|&i| pts[i]).collect();
    let obj = ml_objective(inst, &x);
    Ok((x, obj))
}

#[derive(Debug, Clone, Copy)]
pub struct MlDetector {
    pub budget: u128,
}

impl Default for MlDetector {
    fn default() -> Self {
        Self {
            budget: DEFAULT_ML_BUDGET,
        }
    }
}

impl Detector for MlDetector {
    fn name(&self) -> &str {
        "ml"
    }

    fn detect(&self, inst: &SystemInstance) -> Result<DetectionResult> {
        let (x, _) = ml_oracle(inst, self.budget)?;
        Ok(DetectionResult::from_soft(vec![x], Vec::new(), &inst.constellation))
    }
}
