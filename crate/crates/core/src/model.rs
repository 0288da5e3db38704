//! System model: QAM constellations, Rayleigh channel draws, and the
//! complex-to-real lifting `y = H x + n`.

use std::io::{BufRead, Write};
use std::sync::Arc;

use nalgebra::{Complex, DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Gray-labelled square QAM with unit average complex symbol energy.
#[derive(Debug, Clone, PartialEq)]
pub struct Constellation {
    pub qam_order: usize,
    /// Real constellation, ascending.
    pub real_points: Vec<f64>,
    /// Complex points indexed by their Gray label.
    pub complex_points: Vec<Complex<f64>>,
    /// Energy per real dimension (half the complex symbol energy).
    pub es_real: f64,
}

impl Constellation {
    pub fn new(qam_order: usize) -> Result<Self> {
        let m = match qam_order {
            4 => 2usize,
            16 => 4,
            64 => 8,
            other => return Err(Error::UnsupportedQamOrder(other)),
        };
        let scale = (3.0 / (2.0 * (qam_order as f64 - 1.0))).sqrt();
        let real_points: Vec<f64> = (0..m)
            .map(|i| (2.0 * i as f64 - (m as f64 - 1.0)) * scale)
            .collect();
        let bits = m.trailing_zeros();
        let complex_points = (0..qam_order)
            .map(|label| {
                let i_bits = label >> bits;
                let q_bits = label & (m - 1);
                Complex::new(
                    real_points[gray_decode(i_bits)],
                    real_points[gray_decode(q_bits)],
                )
            })
            .collect();
        Ok(Self {
            qam_order,
            real_points,
            complex_points,
            es_real: 0.5,
        })
    }

    /// Number of real points `M`.
    pub fn m(&self) -> usize {
        self.real_points.len()
    }

    pub fn nearest_index(&self, x: f64) -> usize {
        // Points are equally spaced, so round onto the grid.
        let m = self.m();
        let step = self.real_points[1] - self.real_points[0];
        let pos = ((x - self.real_points[0]) / step).round();
        if pos.is_nan() {
            return 0;
        }
        pos.clamp(0.0, (m - 1) as f64) as usize
    }

    pub fn nearest(&self, x: f64) -> f64 {
        self.real_points[self.nearest_index(x)]
    }

    /// Index of an exact constellation value.
    pub fn index_of(&self, a: f64) -> Option<usize> {
        let i = self.nearest_index(a);
        ((self.real_points[i] - a).abs() < 1e-9).then_some(i)
    }

    pub fn min(&self) -> f64 {
        self.real_points[0]
    }

    pub fn max(&self) -> f64 {
        *self.real_points.last().unwrap()
    }
}

fn gray_decode(mut g: usize) -> usize {
    let mut b = 0;
    while g != 0 {
        b ^= g;
        g >>= 1;
    }
    b
}

/// `[[Re, -Im], [Im, Re]]`, shape `2Nr x 2Nt`.
pub fn lift_complex_to_real(h: &DMatrix<Complex<f64>>) -> DMatrix<f64> {
    let (nr, nt) = h.shape();
    DMatrix::from_fn(2 * nr, 2 * nt, |i, j| {
        let z = h[(i % nr, j % nt)];
        match (i < nr, j < nt) {
            (true, true) | (false, false) => z.re,
            (true, false) => -z.im,
            (false, true) => z.im,
        }
    })
}

/// `[Re; Im]`.
pub fn lift_vector(v: &DVector<Complex<f64>>) -> DVector<f64> {
    let n = v.len();
    DVector::from_fn(2 * n, |i, _| if i < n { v[i].re } else { v[i - n].im })
}

/// Complex noise variance for a given SNR in dB, assuming unit-energy symbols
/// and channel entries of variance `1/Nr` (so `E||H x||^2 = Nt`).
pub fn snr_to_noise_var(snr_db: f64, n_tx: usize, n_rx: usize) -> f64 {
    n_tx as f64 / (n_rx as f64 * 10f64.powf(snr_db / 10.0))
}

/// One channel use in the real-valued model.
#[derive(Debug, Clone)]
pub struct SystemInstance {
    pub h: DMatrix<f64>,
    pub x_true: DVector<f64>,
    /// Indices of `x_true` into `constellation.real_points`.
    pub x_index: Vec<usize>,
    pub y: DVector<f64>,
    pub noise: DVector<f64>,
    /// Per-real-dimension noise variance.
    pub noise_var: f64,
    pub n_tx: usize,
    pub n_rx: usize,
    pub constellation: Arc<Constellation>,
}

impl SystemInstance {
    /// Build an instance from real-valued parts; `y` is computed as `h x + noise`.
    pub fn from_parts(
        h: DMatrix<f64>,
        x_true: DVector<f64>,
        noise: DVector<f64>,
        noise_var: f64,
        constellation: Arc<Constellation>,
    ) -> Result<Self> {
        let (n, k) = h.shape();
        if x_true.len() != k || noise.len() != n {
            return Err(Error::Dimension(format!(
                "h is {n}x{k}, x has {}, noise has {}",
                x_true.len(),
                noise.len()
            )));
        }
        if n < k {
            return Err(Error::Dimension(format!("need N >= K, got N={n}, K={k}")));
        }
        let x_index = x_true
            .iter()
            .map(|&a| constellation.index_of(a).ok_or(Error::LabelNotInConstellation(a)))
            .collect::<Result<Vec<_>>>()?;
        let y = &h * &x_true + &noise;
        Ok(Self {
            h,
            x_true,
            x_index,
            y,
            noise,
            noise_var,
            n_tx: k / 2,
            n_rx: n / 2,
            constellation,
        })
    }

    pub fn k(&self) -> usize {
        self.h.ncols()
    }

    pub fn n(&self) -> usize {
        self.h.nrows()
    }

    /// Same realization with the channel columns (users) permuted:
    /// column `i` of the result is column `perm[i]` of `self.h`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let k = self.k();
        assert_eq!(perm.len(), k);
        let h = DMatrix::from_fn(self.n(), k, |r, c| self.h[(r, perm[c])]);
        let x_true = DVector::from_fn(k, |i, _| self.x_true[perm[i]]);
        let x_index = perm.iter().map(|&p| self.x_index[p]).collect();
        Self {
            h,
            x_true,
            x_index,
            y: self.y.clone(),
            noise: self.noise.clone(),
            noise_var: self.noise_var,
            n_tx: self.n_tx,
            n_rx: self.n_rx,
            constellation: self.constellation.clone(),
        }
    }

    /// Number of complex symbols whose real or imaginary decision is wrong.
    /// For odd `K` every real entry counts as one symbol.
    pub fn symbol_errors(&self, x_hard: &[f64]) -> usize {
        let k = self.k();
        let wrong: Vec<bool> = (0..k)
            .map(|i| (x_hard[i] - self.x_true[i]).abs() > 1e-9)
            .collect();
        if k % 2 == 1 {
            return wrong.iter().filter(|&&w| w).count();
        }
        let half = k / 2;
        (0..half).filter(|&i| wrong[i] || wrong[i + half]).count()
    }

    /// Complex symbols carried by this instance.
    pub fn symbols(&self) -> usize {
        let k = self.k();
        if k % 2 == 1 {
            k
        } else {
            k / 2
        }
    }
}

/// Draw an i.i.d. Rayleigh instance: channel entries of variance `1/Nr`,
/// uniform symbols, and complex AWGN at the requested SNR.
pub fn sample_instance(
    n_tx: usize,
    n_rx: usize,
    constellation: &Arc<Constellation>,
    snr_db: f64,
    stream: RngStream,
) -> SystemInstance {
    let mut rng = stream.rng();
    let noise_var_c = snr_to_noise_var(snr_db, n_tx, n_rx);
    let h_std = (0.5 / n_rx as f64).sqrt();
    let n_std = (0.5 * noise_var_c).sqrt();
    let m = constellation.m();

    let mut normal = |std: f64| -> f64 {
        let z: f64 = StandardNormal.sample(&mut rng);
        z * std
    };
    let hc = DMatrix::from_fn(n_rx, n_tx, |_, _| Complex::new(normal(h_std), normal(h_std)));
    let nc = DVector::from_fn(n_rx, |_, _| Complex::new(normal(n_std), normal(n_std)));
    let idx: Vec<usize> = (0..2 * n_tx).map(|_| rng.random_range(0..m)).collect();

    let h = lift_complex_to_real(&hc);
    let noise = lift_vector(&nc);
    let x_true = DVector::from_fn(2 * n_tx, |i, _| constellation.real_points[idx[i]]);
    let y = &h * &x_true + &noise;
    SystemInstance {
        h,
        x_true,
        x_index: idx,
        y,
        noise,
        noise_var: 0.5 * noise_var_c,
        n_tx,
        n_rx,
        constellation: constellation.clone(),
    }
}

/// Seed record from which an instance can be regenerated bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub seed: u64,
    pub stream_id: u64,
    pub n_tx: usize,
    pub n_rx: usize,
    pub qam_order: usize,
    pub snr_db: f64,
}

impl DatasetRecord {
    pub fn regenerate(&self) -> Result<SystemInstance> {
        let c = Arc::new(Constellation::new(self.qam_order)?);
        Ok(sample_instance(
            self.n_tx,
            self.n_rx,
            &c,
            self.snr_db,
            RngStream::new(self.seed, self.stream_id),
        ))
    }
}

pub fn write_dataset<W: Write>(mut w: W, records: &[DatasetRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_dataset<R: BufRead>(r: R) -> Result<Vec<DatasetRecord>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn qam4_points() {
        let c = Constellation::new(4).unwrap();
        let s = 1.0 / 2f64.sqrt();
        assert_eq!(c.real_points.len(), 2);
        assert_abs_diff_eq!(c.real_points[0], -s, epsilon = 1e-15);
        assert_abs_diff_eq!(c.real_points[1], s, epsilon = 1e-15);
        for p in &c.complex_points {
            assert_abs_diff_eq!(p.re.abs(), s, epsilon = 1e-15);
            assert_abs_diff_eq!(p.im.abs(), s, epsilon = 1e-15);
        }
    }

    #[test]
    fn qam16_levels_by_direct_summation() {
        // Unnormalized levels {±1, ±3}: mean |s|^2 over the 16 points.
        let lv = [-3.0f64, -1.0, 1.0, 3.0];
        let mut e = 0.0;
        for a in lv {
            for b in lv {
                e += a * a + b * b;
            }
        }
        e /= 16.0;
        assert_abs_diff_eq!(e, 10.0, epsilon = 1e-12);
        let c = Constellation::new(16).unwrap();
        for (p, l) in c.real_points.iter().zip(lv) {
            assert_abs_diff_eq!(*p, l / e.sqrt(), epsilon = 1e-15);
        }
    }

    #[test]
    fn constellation_invariants() {
        for order in [4, 16, 64] {
            let c = Constellation::new(order).unwrap();
            let m = (order as f64).sqrt() as usize;
            assert_eq!(c.m(), m);
            let e: f64 = c.complex_points.iter().map(|p| p.norm_sqr()).sum::<f64>() / order as f64;
            assert_abs_diff_eq!(e, 1.0, epsilon = 1e-12);
            for w in c.real_points.windows(2) {
                assert!(w[0] < w[1]);
            }
            for i in 0..m {
                assert_abs_diff_eq!(c.real_points[i], -c.real_points[m - 1 - i], epsilon = 1e-15);
            }
            let mut re: Vec<f64> = c.complex_points.iter().map(|p| p.re).collect();
            re.sort_by(f64::total_cmp);
            re.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
            assert_eq!(re, c.real_points);
        }
    }

    #[test]
    fn gray_neighbours_differ_in_one_bit() {
        let c = Constellation::new(16).unwrap();
        let step = c.real_points[1] - c.real_points[0];
        for (a, pa) in c.complex_points.iter().enumerate() {
            for (b, pb) in c.complex_points.iter().enumerate() {
                if ((pa - pb).norm() - step).abs() < 1e-9 {
                    assert_eq!((a ^ b).count_ones(), 1);
                }
            }
        }
    }

    #[test]
    fn unsupported_order() {
        let err = Constellation::new(8).unwrap_err();
        assert!(err.to_string().contains("unsupported QAM order 8"));
    }

    #[test]
    fn lift_small_cases() {
        let one = DMatrix::from_element(1, 1, Complex::new(1.0, 0.0));
        assert_eq!(lift_complex_to_real(&one), DMatrix::identity(2, 2));
        let i = DMatrix::from_element(1, 1, Complex::new(0.0, 1.0));
        assert_eq!(
            lift_complex_to_real(&i),
            DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0])
        );
        let big = DMatrix::from_element(16, 8, Complex::new(0.3, -0.2));
        assert_eq!(lift_complex_to_real(&big).shape(), (32, 16));
    }

    #[test]
    fn lifting_is_a_homomorphism() {
        let mut rng = RngStream::new(1, 0).rng();
        for _ in 0..20 {
            let mut g = || -> f64 { StandardNormal.sample(&mut rng) };
            let h = DMatrix::from_fn(5, 3, |_, _| Complex::new(g(), g()));
            let x = DVector::from_fn(3, |_, _| Complex::new(g(), g()));
            let lhs = lift_complex_to_real(&h) * lift_vector(&x);
            let rhs = lift_vector(&(&h * &x));
            assert!((lhs - rhs).amax() < 1e-12);
        }
    }

    #[test]
    fn snr_mapping() {
        assert_abs_diff_eq!(snr_to_noise_var(0.0, 8, 8), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(snr_to_noise_var(10.0, 4, 4), 0.1, epsilon = 1e-15);
        assert!(snr_to_noise_var(-300.0, 4, 4) > 1e29);
        assert!(snr_to_noise_var(-10.0, 4, 8) > snr_to_noise_var(-5.0, 4, 8));
    }

    #[test]
    fn sampling_is_deterministic_and_consistent() {
        let c = Arc::new(Constellation::new(16).unwrap());
        let a = sample_instance(4, 8, &c, 12.0, RngStream::new(9, 2));
        let b = sample_instance(4, 8, &c, 12.0, RngStream::new(9, 2));
        assert_eq!(a.h, b.h);
        assert_eq!(a.y, b.y);
        assert_eq!(a.x_index, b.x_index);
        assert_abs_diff_eq!(a.noise_var, snr_to_noise_var(12.0, 4, 8) / 2.0, epsilon = 0.0);
        assert!((&a.h * &a.x_true + &a.noise - &a.y).amax() == 0.0);
        // Block structure.
        let (nr, nt) = (a.n_rx, a.n_tx);
        for i in 0..nr {
            for j in 0..nt {
                assert_eq!(a.h[(i, j)], a.h[(i + nr, j + nt)]);
                assert_eq!(a.h[(i, j + nt)], -a.h[(i + nr, j)]);
            }
        }
    }

    #[test]
    fn symbol_error_counting_pairs_components() {
        let c = Arc::new(Constellation::new(4).unwrap());
        let inst = sample_instance(2, 2, &c, 10.0, RngStream::new(1, 1));
        let mut x: Vec<f64> = inst.x_true.iter().copied().collect();
        assert_eq!(inst.symbol_errors(&x), 0);
        x[0] = -x[0];
        assert_eq!(inst.symbol_errors(&x), 1);
        x[2] = -x[2]; // imaginary part of the same user
        assert_eq!(inst.symbol_errors(&x), 1);
        x[1] = -x[1];
        assert_eq!(inst.symbol_errors(&x), 2);
    }

    #[test]
    fn dataset_roundtrip_regenerates() {
        let rec = DatasetRecord {
            seed: 3,
            stream_id: 11,
            n_tx: 2,
            n_rx: 4,
            qam_order: 4,
            snr_db: 7.5,
        };
        let mut buf = Vec::new();
        write_dataset(&mut buf, &[rec.clone(), rec.clone()]).unwrap();
        let back = read_dataset(&buf[..]).unwrap();
        assert_eq!(back, vec![rec.clone(), rec.clone()]);
        assert_eq!(back[0].regenerate().unwrap().y, rec.regenerate().unwrap().y);
    }
}
