//! Closed-form multiplication counts per detected vector.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Detectors with a complexity expression, in table order.
pub const COMPLEXITY_DETECTORS: [&str; 9] = [
    "amp", "gnn", "mmse", "remimo", "oampnet", "ep", "bpic", "gpicnet", "gepnet",
];

/// Sizes entering the expressions. `n` and `k` are real dimensions and `m`
/// is the number of real constellation points per dimension.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComplexityParams {
    pub n: f64,
    pub k: f64,
    pub m: f64,
    /// Detector iterations.
    pub t: f64,
    /// GNN message passing rounds.
    pub l: f64,
    pub su: f64,
    pub nh1: f64,
    pub nh2: f64,
    /// RE-MIMO hidden size.
    pub ds: f64,
    /// RE-MIMO attention heads.
    pub heads: f64,
}

impl ComplexityParams {
    /// Default GNN sizes with `T = 10` and `L = 2`.
    pub fn new(n: usize, k: usize, m: usize) -> Self {
        Self {
            n: n as f64,
            k: k as f64,
            m: m as f64,
            t: 10.0,
            l: 2.0,
            su: 8.0,
            nh1: 64.0,
            nh2: 32.0,
            ds: 512.0,
            heads: 8.0,
        }
    }
}

/// Multiplications per detected vector for the named detector.
pub fn complexity_estimate(detector: &str, p: &ComplexityParams) -> Result<f64> {
    let ComplexityParams {
        n,
        k,
        m,
        t,
        l,
        su,
        nh1,
        nh2,
        ds,
        heads,
    } = *p;
    let gnn_init = su * (nh1 + nh2 + 3.0) + nh1 * nh2 + m;
    let gnn_round = nh1 * (4.0 * su + 5.0 + 3.0 * nh1) + nh2 * (nh1 + su + 2.0);
    let v = match detector.to_ascii_lowercase().as_str() {
        "amp" => (4.0 * n * k + 8.0 * n + 6.0 * k + 4.0 * m * k) * t,
        "gnn" => {
            (1.5 * n + 0.5 * n * k + k + gnn_init) * k
                + (4.0 * nh1 * su + 5.0 * nh1 + nh2 * (nh1 + su + 2.0) + 3.0 * nh1 * nh1) * k * t
        }
        "mmse" => k.powi(3) + k * k * (n + 1.0) + n * k,
        "remimo" => {
            let d_psi = ds + m + n;
            let d_phi = d_psi + 1.0;
            let d_v = d_phi / heads;
            let d_k = d_v;
            2.0 * (n + 1.0)
                + (5.0 * ds * (2.0 * n + 1.0) + 4.0 * ds * ds + 2.0) * k
                + (0.5 * n * (k + 1.0)
                    + m
                    + 2.0 * d_phi * d_k
                    + d_phi * d_v
                    + 2.0 * d_phi * ds
                    + 0.625 * d_psi * d_psi
                    + 1.0)
                    * k
                    * t
        }
        "oampnet" => {
            n * k * (k - 1.0)
                + (k.powi(3) + n * n * k + n * k * k + 2.0 * n * k + 12.0 * k + 4.0 * m * k + 2.0 * k + 8.0) * t
        }
        "ep" => n * k * k + n * k + (k.powi(3) + k * k + 13.0 * k + 2.0 * m * k) * t,
        "bpic" => n * k * k - 6.0 * k + (17.0 + 2.0 * m + n) * k * t,
        "gpicnet" => {
            (1.5 * n + 1.5 * n * k - 5.0 + gnn_init) * k
                + (3.0 * n * k + 2.0 * m + 10.0 + gnn_round * l) * k * t
        }
        "gepnet" => {
            (2.5 * n + 1.5 * n * k + k + gnn_init) * k
                + (k.powi(3) + k * k + 13.0 * k + 2.0 * k * m + gnn_round * k * l) * t
        }
        other => return Err(Error::UnknownDetector(other.to_string())),
    };
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sig4(x: f64) -> f64 {
        let e = x.abs().log10().floor() - 3.0;
        (x / 10f64.powf(e)).round() * 10f64.powf(e)
    }

    #[test]
    fn ep_row_matches_hand_count() {
        // N K^2 + N K + (K^3 + K^2 + 13 K + 2 M K) T at N = 256, K = 256, M = 4.
        let p = ComplexityParams::new(256, 256, 4);
        let hand = 16_777_216.0 + 65_536.0 + (16_777_216.0 + 65_536.0 + 3_328.0 + 2_048.0) * 10.0;
        assert_eq!(complexity_estimate("ep", &p).unwrap(), hand);
        assert_eq!(sig4(hand / 1e7), 18.53);
    }

    #[test]
    fn mmse_row_matches_hand_count() {
        let p = ComplexityParams::new(4, 2, 2);
        assert_eq!(complexity_estimate("mmse", &p).unwrap(), 8.0 + 4.0 * 5.0 + 8.0);
    }

    #[test]
    fn bpic_row_at_small_size() {
        // 4*4 - 12 + (17 + 4 + 4) * 2 * 10
        let p = ComplexityParams::new(4, 2, 2);
        assert_eq!(complexity_estimate("bpic", &p).unwrap(), 504.0);
    }

    #[test]
    fn every_listed_detector_evaluates_and_grows_with_k() {
        for d in COMPLEXITY_DETECTORS {
            let a = complexity_estimate(d, &ComplexityParams::new(256, 128, 4)).unwrap();
            let b = complexity_estimate(d, &ComplexityParams::new(256, 256, 4)).unwrap();
            assert!(a > 0.0 && b > a, "{d}");
        }
    }

    #[test]
    fn unknown_detector_is_an_error() {
        assert!(matches!(
            complexity_estimate("sphere", &ComplexityParams::new(8, 4, 2)),
            Err(Error::UnknownDetector(_))
        ));
    }

    #[test]
    fn names_are_case_insensitive() {
        let p = ComplexityParams::new(16, 8, 2);
        assert_eq!(complexity_estimate("GEPNet", &p).unwrap(), complexity_estimate("gepnet", &p).unwrap());
    }
}
