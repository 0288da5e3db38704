use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Cholesky factorization of a symmetric positive definite matrix.
pub struct SpdFactor {
    chol: Cholesky<f64, Dyn>,
}

impl SpdFactor {
    pub fn new(a: DMatrix<f64>) -> Result<Self> {
        Cholesky::new(a)
            .map(|chol| Self { chol })
            .ok_or(Error::NotPositiveDefinite)
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    /// Diagonal of `A^{-1}` from `L^{-1}`: `(A^{-1})_kk = sum_i (L^{-1})_ik^2`.
    pub fn inverse_diagonal(&self) -> DVector<f64> {
        let l = self.chol.l_dirty();
        let n = l.nrows();
        let mut out = DVector::zeros(n);
        let mut z = vec![0.0; n];
        for col in 0..n {
            // Forward substitution of L z = e_col; z is zero above `col`.
            let mut acc = 0.0;
            for i in col..n {
                let mut s = if i == col { 1.0 } else { 0.0 };
                for j in col..i {
                    s -= l[(i, j)] * z[j];
                }
                z[i] = s / l[(i, i)];
                acc += z[i] * z[i];
            }
            out[col] = acc;
        }
        out
    }
}

pub fn gram(h: &DMatrix<f64>) -> DMatrix<f64> {
    h.tr_mul(h)
}

/// Ratio of extreme singular values; `inf` for a rank-deficient matrix.
pub fn condition_number(h: &DMatrix<f64>) -> f64 {
    let sv = h.singular_values();
    let max = sv.max();
    let min = sv.min();
    if min <= max * 1e-15 || min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}
