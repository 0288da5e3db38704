//! Monte-Carlo SER estimation, detector registry and result tables.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detect::{BpicConfig, BpicDetector, Detector, EpConfig, EpDetector, MlDetector, MmseDetector};
use crate::error::{Error, Result};
use crate::gnn::{load_checkpoint, GnnDims, GnnParams};
use crate::model::{sample_instance, Constellation, SystemInstance};
use crate::neural::{GepnetConfig, GepnetDetector, GpicnetConfig, GpicnetDetector};
use crate::rng::RngStream;

const SWEEP_STREAM: u64 = 0x0073_7765_6570;

/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.959_963_984_540_054;

/// Names accepted by [`build_detector`].
pub const DETECTOR_NAMES: [&str; 6] = ["ep", "bpic", "mmse", "ml", "gepnet", "gpicnet"];

/// Symbol error rate with a normal-approximation 95% interval half-width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SerEstimate {
    pub errors: u64,
    pub symbols: u64,
    pub ser: f64,
    pub ci95: f64,
}

impl SerEstimate {
    pub fn from_counts(errors: u64, symbols: u64) -> Self {
        if symbols == 0 {
            return Self {
                errors,
                symbols,
                ser: 0.0,
                ci95: 0.0,
            };
        }
        let n = symbols as f64;
        let p = errors as f64 / n;
        Self {
            errors,
            symbols,
            ser: p,
            ci95: Z95 * (p * (1.0 - p) / n).sqrt(),
        }
    }

    pub fn lower(&self) -> f64 {
        (self.ser - self.ci95).max(0.0)
    }

    pub fn upper(&self) -> f64 {
        (self.ser + self.ci95).min(1.0)
    }
}

/// Per-instance symbol errors of one detector at one operating point.
#[derive(Debug, Clone, PartialEq)]
pub struct PointErrors {
    pub per_instance: Vec<u32>,
    pub symbols_per_instance: usize,
}

impl PointErrors {
    pub fn estimate(&self) -> SerEstimate {
        let e: u64 = self.per_instance.iter().map(|&e| e as u64).sum();
        SerEstimate::from_counts(e, (self.per_instance.len() * self.symbols_per_instance) as u64)
    }
}

/// One operating point: every detector sees the same instances for a given
/// `(seed, point)`, so results at a point are paired across detectors.
#[derive(Debug, Clone, Copy)]
pub struct OperatingPoint {
    pub n_tx: usize,
    pub n_rx: usize,
    pub snr_db: f64,
    pub samples: usize,
    pub seed: u64,
    /// Distinguishes operating points that share a seed.
    pub point: u64,
}

impl OperatingPoint {
    pub fn instance(&self, c: &Arc<Constellation>, i: usize) -> SystemInstance {
        let s = RngStream::new(self.seed, SWEEP_STREAM).fork(self.point).fork(i as u64);
        sample_instance(self.n_tx, self.n_rx, c, self.snr_db, s)
    }
}

/// Detects `op.samples` fresh instances in parallel; the per-instance results
/// are returned in instance order.
pub fn evaluate_point(det: &dyn Detector, c: &Arc<Constellation>, op: &OperatingPoint) -> Result<PointErrors> {
    if op.samples == 0 {
        return Err(Error::Config("samples must be at least 1".into()));
    }
    let per_instance = (0..op.samples)
        .into_par_iter()
        .map(|i| {
            let inst = op.instance(c, i);
            let r = det.detect(&inst)?;
            Ok(inst.symbol_errors(&r.x_hard) as u32)
        })
        .collect::<Result<Vec<u32>>>()?;
    let symbols_per_instance = op.instance(c, 0).symbols();
    Ok(PointErrors {
        per_instance,
        symbols_per_instance,
    })
}

/// SER of `det` over `samples` instances.
pub fn monte_carlo_ser(
    det: &dyn Detector,
    n_tx: usize,
    n_rx: usize,
    qam_order: usize,
    snr_db: f64,
    samples: usize,
    seed: u64,
) -> Result<SerEstimate> {
    let c = Arc::new(Constellation::new(qam_order)?);
    let op = OperatingPoint {
        n_tx,
        n_rx,
        snr_db,
        samples,
        seed,
        point: 0,
    };
    Ok(evaluate_point(det, &c, &op)?.estimate())
}

/// Paired comparison of two detectors on the same instances: the mean
/// per-symbol difference `SER(a) - SER(b)` with a 95% interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PairedComparison {
    pub mean_diff: f64,
    pub ci95: f64,
    pub instances: usize,
}

impl PairedComparison {
    /// `a` is better than `b` with 95% confidence.
    pub fn a_better(&self) -> bool {
        self.mean_diff + self.ci95 < 0.0
    }

    pub fn b_better(&self) -> bool {
        self.mean_diff - self.ci95 > 0.0
    }
}

pub fn paired_comparison(a: &PointErrors, b: &PointErrors) -> Result<PairedComparison> {
    let n = a.per_instance.len();
    if n != b.per_instance.len() || a.symbols_per_instance != b.symbols_per_instance {
        return Err(Error::DimensionMismatch {
            what: "paired instances".into(),
            found: b.per_instance.len(),
            expected: n,
        });
    }
    if n < 2 {
        return Err(Error::Config("paired comparison needs at least 2 instances".into()));
    }
    let s = a.symbols_per_instance as f64;
    let d: Vec<f64> = a
        .per_instance
        .iter()
        .zip(&b.per_instance)
        .map(|(&x, &y)| (x as f64 - y as f64) / s)
        .collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Ok(PairedComparison {
        mean_diff: mean,
        ci95: Z95 * (var / n as f64).sqrt(),
        instances: n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SnrGrid {
    pub min_db: f64,
    pub max_db: f64,
    pub step_db: f64,
}

impl SnrGrid {
    pub fn points(&self) -> Result<Vec<f64>> {
        if !(self.min_db <= self.max_db) || (self.max_db > self.min_db && !(self.step_db > 0.0)) {
            return Err(Error::Config(format!("empty SNR grid {self:?}")));
        }
        let mut out = vec![self.min_db];
        if self.max_db > self.min_db {
            let n = ((self.max_db - self.min_db) / self.step_db + 1e-9).floor() as usize;
            out = (0..=n).map(|i| self.min_db + i as f64 * self.step_db).collect();
        }
        Ok(out)
    }
}

/// Analyses requested alongside a sweep.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisToggles {
    pub posterior_metrics: bool,
    pub residual_noise: bool,
    pub condition_bins: Option<usize>,
}

/// A sweep: detectors, system size, SNR grid and per-point sample count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub detectors: Vec<String>,
    pub n_tx: usize,
    pub n_rx: usize,
    pub qam_order: usize,
    pub snr: SnrGrid,
    /// Instances per SNR point.
    pub samples: usize,
    pub seed: u64,
    /// Checkpoint per learned detector name.
    pub models: BTreeMap<String, PathBuf>,
    pub iterations: Option<usize>,
    pub damping: Option<f64>,
    pub rounds: Option<usize>,
    pub analysis: AnalysisToggles,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            detectors: vec!["mmse".into(), "ep".into(), "bpic".into()],
            n_tx: 4,
            n_rx: 8,
            qam_order: 4,
            snr: SnrGrid {
                min_db: 0.0,
                max_db: 12.0,
                step_db: 2.0,
            },
            samples: 10_000,
            seed: 1,
            models: BTreeMap::new(),
            iterations: None,
            damping: None,
            rounds: None,
            analysis: AnalysisToggles::default(),
        }
    }
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::Config("samples must be at least 1".into()));
        }
        if self.n_tx == 0 || self.n_rx < self.n_tx {
            return Err(Error::Config(format!("need 1 <= n_tx <= n_rx, got {} and {}", self.n_tx, self.n_rx)));
        }
        self.snr.points()?;
        Constellation::new(self.qam_order)?;
        Ok(())
    }
}

/// Constructs a detector by name, loading a checkpoint for learned ones.
pub fn build_detector(name: &str, scenario: &Scenario) -> Result<Box<dyn Detector>> {
    build_detector_with(name, scenario, false)
}

/// [`build_detector`] with per-iteration tracing switched on or off.
pub fn build_detector_with(name: &str, scenario: &Scenario, trace: bool) -> Result<Box<dyn Detector>> {
    let c = Constellation::new(scenario.qam_order)?;
    match name {
        "ep" => {
            let mut config = EpConfig {
                trace,
                ..Default::default()
            };
            if let Some(t) = scenario.iterations {
                config.iterations = t;
            }
            if let Some(d) = scenario.damping {
                config.damping = d;
            }
            Ok(Box::new(EpDetector { config }))
        }
        "bpic" => {
            let mut config = BpicConfig {
                trace,
                ..Default::default()
            };
            if let Some(t) = scenario.iterations {
                config.iterations = t;
            }
            Ok(Box::new(BpicDetector { config }))
        }
        "mmse" => Ok(Box::new(MmseDetector)),
        "ml" => Ok(Box::new(MlDetector::default())),
        "gepnet" | "gpicnet" => {
            let path = scenario
                .models
                .get(name)
                .ok_or_else(|| Error::Config(format!("no model path configured for {name}")))?;
            let params = Arc::new(load_learned(path, &c, scenario.rounds)?);
            if name == "gepnet" {
                let mut config = GepnetConfig::new(params);
                config.trace = trace;
                if let Some(t) = scenario.iterations {
                    config.iterations = t;
                }
                if let Some(d) = scenario.damping {
                    config.damping = d;
                }
                Ok(Box::new(GepnetDetector { config }))
            } else {
                let mut config = GpicnetConfig::new(params);
                config.trace = trace;
                if let Some(t) = scenario.iterations {
                    config.iterations = t;
                }
                Ok(Box::new(GpicnetDetector { config }))
            }
        }
        other => Err(Error::UnknownDetector(other.to_string())),
    }
}

/// Loads a checkpoint and checks it against the constellation; `rounds`
/// overrides the stored number of message-passing rounds.
pub fn load_learned(path: &Path, c: &Constellation, rounds: Option<usize>) -> Result<GnnParams> {
    let (mut params, _) = load_checkpoint(path)?;
    let expected = GnnDims {
        rounds: params.dims.rounds,
        ..GnnDims::new(c.m())
    };
    crate::gnn::check_dims(&params.dims, &expected)?;
    if let Some(l) = rounds {
        params.dims.rounds = l;
    }
    Ok(params)
}

/// One line of a sweep result. Failure rows carry the error in `status`
/// and leave the numeric fields empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub detector: String,
    pub k_train: String,
    pub n_tx: usize,
    pub n_rx: usize,
    pub qam_order: usize,
    pub iterations: Option<usize>,
    pub snr_db: f64,
    pub ser: Option<f64>,
    pub ci95: Option<f64>,
    pub errors: Option<u64>,
    pub symbols: Option<u64>,
    pub samples: usize,
    pub wall_time: f64,
    pub status: String,
}

/// Column order of the CSV output.
pub const RESULT_COLUMNS: [&str; 14] = [
    "detector",
    "k_train",
    "n_tx",
    "n_rx",
    "qam_order",
    "iterations",
    "snr_db",
    "ser",
    "ci95",
    "errors",
    "symbols",
    "samples",
    "wall_time",
    "status",
];

/// How the sweep reports timing.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Report `wall_time = 0` so identical runs produce identical files.
    pub deterministic: bool,
}

fn row_for(
    scenario: &Scenario,
    detector: &str,
    k_train: &str,
    snr_db: f64,
    outcome: std::result::Result<(SerEstimate, f64), String>,
) -> ResultRow {
    let mut row = ResultRow {
        detector: detector.to_string(),
        k_train: k_train.to_string(),
        n_tx: scenario.n_tx,
        n_rx: scenario.n_rx,
        qam_order: scenario.qam_order,
        iterations: scenario.iterations,
        snr_db,
        ser: None,
        ci95: None,
        errors: None,
        symbols: None,
        samples: scenario.samples,
        wall_time: 0.0,
        status: String::new(),
    };
    match outcome {
        Ok((e, t)) => {
            row.ser = Some(e.ser);
            row.ci95 = Some(e.ci95);
            row.errors = Some(e.errors);
            row.symbols = Some(e.symbols);
            row.wall_time = t;
            row.status = "ok".into();
        }
        Err(msg) => row.status = format!("error: {msg}"),
    }
    row
}

fn sweep_detector(
    scenario: &Scenario,
    det: std::result::Result<&dyn Detector, &str>,
    name: &str,
    k_train: &str,
    point_base: u64,
    opts: RunOptions,
    rows: &mut Vec<ResultRow>,
) -> Result<()> {
    let c = Arc::new(Constellation::new(scenario.qam_order)?);
    for (j, snr) in scenario.snr.points()?.into_iter().enumerate() {
        let outcome = match det {
            Ok(d) => {
                let op = OperatingPoint {
                    n_tx: scenario.n_tx,
                    n_rx: scenario.n_rx,
                    snr_db: snr,
                    samples: scenario.samples,
                    seed: scenario.seed,
                    point: point_base + j as u64,
                };
                let start = Instant::now();
                evaluate_point(d, &c, &op)
                    .map(|p| {
                        let t = if opts.deterministic { 0.0 } else { start.elapsed().as_secs_f64() };
                        (p.estimate(), t)
                    })
                    .map_err(|e| e.to_string())
            }
            Err(msg) => Err(msg.to_string()),
        };
        if let Err(msg) = &outcome {
            log::warn!("{name} at {snr} dB failed: {msg}");
        }
        rows.push(row_for(scenario, name, k_train, snr, outcome));
    }
    Ok(())
}

/// SER of every detector at every SNR point. A detector that cannot be built
/// or fails during detection yields error rows; the others still run.
pub fn run_sweep(scenario: &Scenario, opts: RunOptions) -> Result<Vec<ResultRow>> {
    scenario.validate()?;
    let mut rows = Vec::new();
    for name in &scenario.detectors {
        let det = build_detector(name, scenario).map_err(|e| e.to_string());
        sweep_detector(scenario, det.as_deref().map_err(|s| s.as_str()), name, "", 0, opts, &mut rows)?;
    }
    Ok(rows)
}

/// A learned model trained on a particular set of user counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainedModel {
    pub detector: String,
    /// Label for the training user counts, e.g. `"4,8"`.
    pub k_train: String,
    pub path: PathBuf,
}

/// Evaluates every checkpoint at every test user count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RobustnessScenario {
    pub base: Scenario,
    /// Real user dimensions `K`; each must be even.
    pub k_test: Vec<usize>,
    pub models: Vec<TrainedModel>,
}

impl Default for RobustnessScenario {
    fn default() -> Self {
        Self {
            base: Scenario {
                detectors: Vec::new(),
                ..Default::default()
            },
            k_test: vec![4, 6, 8],
            models: Vec::new(),
        }
    }
}

/// Rows are tagged with the model's `k_train` label; `n_tx` gives the test size.
/// Instances depend on the test size and SNR index only, so every checkpoint
/// sees the same data.
pub fn run_robustness(rs: &RobustnessScenario, opts: RunOptions) -> Result<Vec<ResultRow>> {
    if rs.k_test.is_empty() {
        return Err(Error::Config("k_test is empty".into()));
    }
    let mut rows = Vec::new();
    for &k in &rs.k_test {
        if k == 0 || k % 2 != 0 {
            return Err(Error::Config(format!("test K {k} must be even and positive")));
        }
        let mut scenario = rs.base.clone();
        scenario.n_tx = k / 2;
        scenario.validate()?;
        for m in &rs.models {
            scenario.models = BTreeMap::from([(m.detector.clone(), m.path.clone())]);
            let det = build_detector(&m.detector, &scenario).map_err(|e| e.to_string());
            sweep_detector(&scenario, det.as_deref().map_err(|s| s.as_str()), &m.detector, &m.k_train, 1 << 32, opts, &mut rows)?;
        }
    }
    Ok(rows)
}

pub fn write_rows_csv<W: Write>(w: W, rows: &[ResultRow]) -> Result<()> {
    let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    out.write_record(RESULT_COLUMNS)?;
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_rows_json<W: Write>(w: W, rows: &[ResultRow]) -> Result<()> {
    serde_json::to_writer_pretty(w, rows)?;
    Ok(())
}

/// SNR at which a log-linear interpolation of the SER curve crosses `target`.
pub fn snr_at_ser(points: &[(f64, f64)], target: f64) -> Option<f64> {
    points.windows(2).find_map(|w| {
        let ((s0, p0), (s1, p1)) = (w[0], w[1]);
        if p0 >= target && p1 <= target && p0 > 0.0 && p1 > 0.0 {
            if p0 == p1 {
                return Some(s0);
            }
            let f = (p0.ln() - target.ln()) / (p0.ln() - p1.ln());
            Some(s0 + f * (s1 - s0))
        } else {
            None
        }
    })
}
