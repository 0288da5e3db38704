//! Supervised training of the GNN used by GEPNet and GPICNet.

use std::fs::File;
use std::path::PathBuf;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cavity::CavityDistribution;
use crate::error::{Error, Result};
use crate::gnn::{gnn_backward, save_checkpoint, GnnDims, GnnParams};
use crate::model::{sample_instance, Constellation, SystemInstance};
use crate::neural::{gepnet_run, gpicnet_run, GnnCavity};
use crate::rng::RngStream;

/// Probabilities below this are clamped inside the logarithm.
pub const LOG_FLOOR: f64 = 1e-30;

const TRAIN_STREAM: u64 = 0x7472_6169_6e00;
const VALIDATION_STREAM: u64 = 0x7661_6c00;
const INIT_STREAM: u64 = 0x696e_6974;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetectorKind {
    Gepnet,
    Gpicnet,
}

impl DetectorKind {
    pub fn name(self) -> &'static str {
        match self {
            DetectorKind::Gepnet => "gepnet",
            DetectorKind::Gpicnet => "gpicnet",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub detector_kind: DetectorKind,
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    /// Minimum relative improvement of the validation loss.
    pub plateau_threshold: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub snr_min_db: f64,
    pub snr_max_db: f64,
    /// Real-valued user dimensions `K`; every entry must be even.
    pub k_train_set: Vec<usize>,
    /// Complex receive antennas (`N = 2 n_rx`).
    pub n_rx: usize,
    pub qam_order: usize,
    pub val_samples: usize,
    pub seed: u64,
    /// Detector iterations unrolled during training.
    pub iterations: usize,
    /// GEPNet damping.
    pub damping: f64,
    /// GPICNet starting variance.
    pub initial_variance: f64,
    pub rounds: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            detector_kind: DetectorKind::Gepnet,
            epochs: 600,
            batches_per_epoch: 1563,
            batch_size: 64,
            lr: 1e-4,
            plateau_factor: 0.91,
            plateau_patience: 10,
            plateau_threshold: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            snr_min_db: 2.0,
            snr_max_db: 12.0,
            k_train_set: vec![4, 8],
            n_rx: 8,
            qam_order: 4,
            val_samples: 5000,
            seed: 1,
            iterations: 10,
            damping: 0.7,
            initial_variance: 0.0,
            rounds: 2,
        }
    }
}

impl TrainConfig {
    /// Full-length recipe: 600 epochs of 1563 batches of 64.
    pub fn paper(kind: DetectorKind) -> Self {
        Self {
            detector_kind: kind,
            ..Default::default()
        }
    }

    /// Reduced recipe for a single machine: 60 epochs of 10240 samples,
    /// starting at a larger step size and halving it on short plateaus.
    pub fn desk(kind: DetectorKind) -> Self {
        Self {
            detector_kind: kind,
            epochs: 60,
            batches_per_epoch: 160,
            lr: 1e-3,
            plateau_factor: 0.5,
            plateau_patience: 3,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.snr_min_db > self.snr_max_db {
            return bad(format!("snr_min_db {} exceeds snr_max_db {}", self.snr_min_db, self.snr_max_db));
        }
        if self.k_train_set.is_empty() {
            return bad("k_train_set is empty".into());
        }
        for &k in &self.k_train_set {
            if k == 0 || k % 2 != 0 || k > 2 * self.n_rx {
                return bad(format!("K_train {k} must be even, positive and at most {}", 2 * self.n_rx));
            }
        }
        if self.batch_size == 0 || self.iterations == 0 {
            return bad("batch_size and iterations must be positive".into());
        }
        if !(self.lr >= 0.0) || !(self.plateau_factor > 0.0 && self.plateau_factor <= 1.0) {
            return bad("lr must be >= 0 and plateau_factor in (0, 1]".into());
        }
        Constellation::new(self.qam_order)?;
        Ok(())
    }

    pub fn dims(&self) -> Result<GnnDims> {
        let c = Constellation::new(self.qam_order)?;
        let mut d = GnnDims::new(c.m());
        d.rounds = self.rounds;
        Ok(d)
    }
}

/// `-(1/W) sum_w sum_k log q_k(x_k)` with the logarithm floored at [`LOG_FLOOR`].
pub fn cross_entropy_loss(q: &[CavityDistribution], x_true: &[Vec<f64>], c: &Constellation) -> Result<f64> {
    if q.len() != x_true.len() {
        return Err(Error::DimensionMismatch {
            what: "batch size".into(),
            found: x_true.len(),
            expected: q.len(),
        });
    }
    if q.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (qw, xw) in q.iter().zip(x_true) {
        total += sample_loss_and_grad(qw, xw, c, None)?;
    }
    Ok(total / q.len() as f64)
}

/// Loss of one sample; optionally writes the gradient with respect to the logits.
fn sample_loss_and_grad(q: &CavityDistribution, x: &[f64], c: &Constellation, grad: Option<&mut Vec<f64>>) -> Result<f64> {
    if x.len() != q.k {
        return Err(Error::DimensionMismatch {
            what: "labels".into(),
            found: x.len(),
            expected: q.k,
        });
    }
    let mut loss = 0.0;
    let mut g = grad;
    if let Some(g) = g.as_deref_mut() {
        g.clear();
        g.extend_from_slice(&q.q);
    }
    for (k, &xk) in x.iter().enumerate() {
        let a = c.index_of(xk).ok_or(Error::LabelNotInConstellation(xk))?;
        let p = q.row(k)[a];
        if p > LOG_FLOOR {
            loss -= p.ln();
            if let Some(g) = g.as_deref_mut() {
                g[k * q.m + a] -= 1.0;
            }
        } else {
            loss -= LOG_FLOOR.ln();
            // The floor is flat, so this row contributes no gradient.
            if let Some(g) = g.as_deref_mut() {
                g[k * q.m..(k + 1) * q.m].iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
    Ok(loss)
}

fn labels(inst: &SystemInstance) -> Vec<f64> {
    inst.x_true.iter().copied().collect()
}

/// Runs the detector with the GNN in the loop; returns the cavity of the last iteration.
pub fn forward_final_cavity(params: &GnnParams, cfg: &TrainConfig, inst: &SystemInstance) -> Result<CavityDistribution> {
    let mut src = GnnCavity::new(inst, params)?;
    let run = match cfg.detector_kind {
        DetectorKind::Gepnet => gepnet_run(inst, cfg.iterations, cfg.damping, false, &mut src)?,
        DetectorKind::Gpicnet => gpicnet_run(inst, cfg.iterations, cfg.initial_variance, false, &mut src)?,
    };
    Ok(run.final_cavity)
}

/// Loss of one sample and its gradient with respect to every parameter.
///
/// The node attributes produced by the observation module are treated as
/// constants, so the gradient reaches earlier iterations only through the
/// carried GNN state.
pub fn sample_gradient(params: &GnnParams, cfg: &TrainConfig, inst: &SystemInstance) -> Result<(f64, GnnParams)> {
    let mut src = GnnCavity::recording(inst, params)?;
    let run = match cfg.detector_kind {
        DetectorKind::Gepnet => gepnet_run(inst, cfg.iterations, cfg.damping, false, &mut src)?,
        DetectorKind::Gpicnet => gpicnet_run(inst, cfg.iterations, cfg.initial_variance, false, &mut src)?,
    };
    let mut dlogits = Vec::new();
    let loss = sample_loss_and_grad(&run.final_cavity, &labels(inst), &inst.constellation, Some(&mut dlogits))?;
    let tape = src.into_tape().ok_or(Error::MissingTape)?;
    let mut upstream = vec![Vec::new(); tape.len()];
    *upstream.last_mut().expect("at least one iteration") = dlogits;
    let grads = gnn_backward(&tape, params, &upstream)?;
    Ok((loss, grads.params))
}

/// Mean loss and mean gradient over a batch. The reduction runs in sample
/// order, so the result does not depend on the number of worker threads.
pub fn batch_gradient(params: &GnnParams, cfg: &TrainConfig, batch: &[SystemInstance]) -> Result<(f64, GnnParams)> {
    let per_sample: Vec<Result<(f64, GnnParams)>> = batch.par_iter().map(|inst| sample_gradient(params, cfg, inst)).collect();
    let mut total = 0.0;
    let mut grads = params.zeros_like();
    for r in per_sample {
        let (l, g) = r?;
        total += l;
        grads.add_assign(&g);
    }
    let w = batch.len() as f64;
    grads.scale(1.0 / w);
    Ok((total / w, grads))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Adam {
    pub fn new(n: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    /// One bias-corrected update of `params` in place.
    pub fn update(&mut self, params: &mut [f64], grads: &[f64]) {
        self.step += 1;
        let b1t = 1.0 - self.beta1.powi(self.step as i32);
        let b2t = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / b1t;
            let v_hat = self.v[i] / b2t;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Multiplies the learning rate by `factor` once the monitored loss has failed
/// to improve by a relative `threshold` for more than `patience` epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauScheduler {
    pub factor: f64,
    pub patience: usize,
    pub threshold: f64,
    pub best: f64,
    pub bad_epochs: usize,
    pub reductions: usize,
}

impl PlateauScheduler {
    pub fn new(factor: f64, patience: usize, threshold: f64) -> Self {
        Self {
            factor,
            patience,
            threshold,
            best: f64::INFINITY,
            bad_epochs: 0,
            reductions: 0,
        }
    }

    /// Feeds one epoch's loss; returns the possibly reduced learning rate.
    pub fn step(&mut self, loss: f64, lr: f64) -> f64 {
        if loss < self.best * (1.0 - self.threshold) || self.best.is_infinite() {
            self.best = loss;
            self.bad_epochs = 0;
            return lr;
        }
        self.bad_epochs += 1;
        if self.bad_epochs > self.patience {
            self.bad_epochs = 0;
            self.reductions += 1;
            return lr * self.factor;
        }
        lr
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the lowest validation loss.
    pub best: GnnParams,
    pub last: GnnParams,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub log: Vec<EpochRecord>,
    /// Mean loss of every batch, in order.
    pub batch_losses: Vec<f64>,
}

/// Where to write the best checkpoint and the per-epoch CSV log.
#[derive(Debug, Clone, Default)]
pub struct TrainOutputs {
    pub checkpoint: Option<PathBuf>,
    pub log_csv: Option<PathBuf>,
}

fn draw_k(cfg: &TrainConfig, rng: &mut impl Rng) -> usize {
    cfg.k_train_set[rng.random_range(0..cfg.k_train_set.len())]
}

/// The training batch for `(epoch, batch)`; one `K_train` for the whole batch.
pub fn training_batch(cfg: &TrainConfig, c: &Arc<Constellation>, epoch: usize, batch: usize) -> Result<Vec<SystemInstance>> {
    let stream = RngStream::new(cfg.seed, TRAIN_STREAM).fork(epoch as u64).fork(batch as u64);
    let k = draw_k(cfg, &mut stream.rng());
    let batch = (0..cfg.batch_size)
        .map(|i| {
            let s = stream.fork(i as u64 + 1);
            let snr = s.fork(0).rng().random_range(cfg.snr_min_db..=cfg.snr_max_db);
            sample_instance(k / 2, cfg.n_rx, c, snr, s)
        })
        .collect();
    Ok(batch)
}

/// Fresh validation samples for `epoch`, each with its own `K_train`.
pub fn validation_set(cfg: &TrainConfig, c: &Arc<Constellation>, epoch: usize) -> Result<Vec<SystemInstance>> {
    let stream = RngStream::new(cfg.seed, VALIDATION_STREAM).fork(epoch as u64);
    let set = (0..cfg.val_samples)
        .map(|i| {
            let s = stream.fork(i as u64);
            let mut rng = s.fork(0).rng();
            let k = draw_k(cfg, &mut rng);
            let snr = rng.random_range(cfg.snr_min_db..=cfg.snr_max_db);
            sample_instance(k / 2, cfg.n_rx, c, snr, s)
        })
        .collect();
    Ok(set)
}

/// Mean per-sample loss without gradients.
pub fn evaluate_loss(params: &GnnParams, cfg: &TrainConfig, set: &[SystemInstance]) -> Result<f64> {
    if set.is_empty() {
        return Ok(f64::NAN);
    }
    let losses: Vec<Result<f64>> = set
        .par_iter()
        .map(|inst| {
            let q = forward_final_cavity(params, cfg, inst)?;
            sample_loss_and_grad(&q, &labels(inst), &inst.constellation, None)
        })
        .collect();
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / set.len() as f64)
}

pub fn initial_params(cfg: &TrainConfig) -> Result<GnnParams> {
    Ok(GnnParams::init(cfg.dims()?, &mut RngStream::new(cfg.seed, INIT_STREAM).rng()))
}

fn metadata(cfg: &TrainConfig, epochs_run: usize, best_epoch: usize, best_val: f64) -> serde_json::Value {
    serde_json::json!({
        "detector_kind": cfg.detector_kind,
        "epochs": epochs_run,
        "best_epoch": best_epoch,
        "best_val_loss": best_val,
        "snr_min_db": cfg.snr_min_db,
        "snr_max_db": cfg.snr_max_db,
        "k_train": cfg.k_train_set,
        "n_rx": cfg.n_rx,
        "qam_order": cfg.qam_order,
        "iterations": cfg.iterations,
        "seed": cfg.seed,
    })
}

/// Trains from a fresh initialization. See [`train_from`].
pub fn train(cfg: &TrainConfig, out: &TrainOutputs) -> Result<TrainOutcome> {
    train_from(cfg, initial_params(cfg)?, out)
}

/// Adam on the batch-mean cross-entropy of the last iteration's cavity, with
/// per-epoch validation and plateau-based learning-rate reduction. The best
/// validation parameters are checkpointed as soon as they appear, so a
/// divergence leaves the last good checkpoint on disk.
pub fn train_from(cfg: &TrainConfig, init: GnnParams, out: &TrainOutputs) -> Result<TrainOutcome> {
    cfg.validate()?;
    let c = Arc::new(Constellation::new(cfg.qam_order)?);
    if init.dims != cfg.dims()? {
        return Err(Error::Config("initial parameters do not match the configured sizes".into()));
    }
    let mut params = init;
    let mut adam = Adam::new(params.len(), cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    let mut sched = PlateauScheduler::new(cfg.plateau_factor, cfg.plateau_patience, cfg.plateau_threshold);
    let mut best = params.clone();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0;
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut batch_losses = Vec::with_capacity(cfg.epochs * cfg.batches_per_epoch);
    let mut csv = match &out.log_csv {
        Some(p) => Some(csv::Writer::from_writer(File::create(p)?)),
        None => None,
    };

    for epoch in 1..=cfg.epochs {
        let mut epoch_loss = 0.0;
        for b in 0..cfg.batches_per_epoch {
            let batch = training_batch(cfg, &c, epoch, b)?;
            let (loss, grads) = batch_gradient(&params, cfg, &batch)?;
            if !loss.is_finite() || !grads.is_finite() {
                log::error!("non-finite loss at epoch {epoch}, batch {b}");
                return Err(Error::Diverged { epoch, batch: b });
            }
            adam.update(&mut params.data, &grads.data);
            epoch_loss += loss;
            batch_losses.push(loss);
        }
        let train_loss = if cfg.batches_per_epoch > 0 {
            epoch_loss / cfg.batches_per_epoch as f64
        } else {
            f64::NAN
        };
        let val_loss = evaluate_loss(&params, cfg, &validation_set(cfg, &c, epoch)?)?;
        if val_loss.is_nan() && cfg.val_samples > 0 {
            return Err(Error::Diverged {
                epoch,
                batch: cfg.batches_per_epoch,
            });
        }
        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr: adam.lr,
        };
        log::info!(
            "epoch {epoch}: train {train_loss:.5} val {val_loss:.5} lr {:.3e}",
            adam.lr
        );
        if let Some(w) = csv.as_mut() {
            w.serialize(&record)?;
            w.flush()?;
        }
        log.push(record);

        if val_loss < best_val || cfg.val_samples == 0 {
            best_val = val_loss;
            best_epoch = epoch;
            best = params.clone();
            if let Some(path) = &out.checkpoint {
                save_checkpoint(path, &best, &metadata(cfg, epoch, best_epoch, best_val))?;
            }
        }
        if cfg.val_samples > 0 {
            adam.lr = sched.step(val_loss, adam.lr);
        }
    }
    if cfg.epochs == 0 {
        if let Some(path) = &out.checkpoint {
            save_checkpoint(path, &best, &metadata(cfg, 0, 0, best_val))?;
        }
    }
    Ok(TrainOutcome {
        best,
        last: params,
        best_epoch,
        best_val_loss: best_val,
        log,
        batch_losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand_chacha::ChaCha8Rng;
    use rand::SeedableRng;

    fn qam(m: usize) -> Arc<Constellation> {
        Arc::new(Constellation::new(m).unwrap())
    }

    #[test]
    fn one_hot_prediction_has_zero_loss() {
        let c = qam(4);
        let q = CavityDistribution {
            k: 2,
            m: 2,
            q: vec![1.0, 0.0, 0.0, 1.0],
            logits: vec![0.0; 4],
        };
        let x = vec![c.real_points[0], c.real_points[1]];
        assert_eq!(cross_entropy_loss(&[q], &[x], &c).unwrap(), 0.0);
    }

    #[test]
    fn uniform_prediction_costs_k_log_m() {
        let c = qam(16);
        let k = 6;
        let q = CavityDistribution::from_logits(k, 4, vec![0.3; k * 4]);
        let x = vec![c.real_points[2]; k];
        let loss = cross_entropy_loss(&[q.clone(), q], &[x.clone(), x], &c).unwrap();
        assert_abs_diff_eq!(loss, k as f64 * 4f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn loss_matches_double_loop() {
        let c = qam(16);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (w, k, m) = (5, 4, 4);
        let qs: Vec<CavityDistribution> = (0..w)
            .map(|_| CavityDistribution::from_logits(k, m, (0..k * m).map(|_| rng.random_range(-3.0..3.0)).collect()))
            .collect();
        let xs: Vec<Vec<f64>> = (0..w)
            .map(|_| (0..k).map(|_| c.real_points[rng.random_range(0..m)]).collect())
            .collect();
        let mut oracle = 0.0;
        for wi in 0..w {
            for ki in 0..k {
                for a in 0..m {
                    if xs[wi][ki] == c.real_points[a] {
                        oracle -= qs[wi].q[ki * m + a].max(LOG_FLOOR).ln();
                    }
                }
            }
        }
        oracle /= w as f64;
        assert_abs_diff_eq!(cross_entropy_loss(&qs, &xs, &c).unwrap(), oracle, epsilon = 1e-12);
    }

    #[test]
    fn floor_caps_the_loss() {
        let c = qam(4);
        let q = CavityDistribution::from_logits(1, 2, vec![0.0, -1e4]);
        let loss = cross_entropy_loss(&[q], &[vec![c.real_points[1]]], &c).unwrap();
        assert_abs_diff_eq!(loss, -LOG_FLOOR.ln(), epsilon = 1e-9);
    }

    #[test]
    fn unknown_label_rejected() {
        let c = qam(4);
        let q = CavityDistribution::from_logits(1, 2, vec![0.0, 0.0]);
        assert!(matches!(cross_entropy_loss(&[q], &[vec![0.3]], &c), Err(Error::LabelNotInConstellation(_))));
    }

    #[test]
    fn logit_gradient_matches_finite_differences() {
        let c = qam(16);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let logits: Vec<f64> = (0..12).map(|_| rng.random_range(-2.0..2.0)).collect();
        let x = vec![c.real_points[1], c.real_points[3], c.real_points[0]];
        let mut g = Vec::new();
        sample_loss_and_grad(&CavityDistribution::from_logits(3, 4, logits.clone()), &x, &c, Some(&mut g)).unwrap();
        let h = 1e-6;
        for i in 0..12 {
            let mut lp = logits.clone();
            lp[i] += h;
            let mut lm = logits.clone();
            lm[i] -= h;
            let fp = sample_loss_and_grad(&CavityDistribution::from_logits(3, 4, lp), &x, &c, None).unwrap();
            let fm = sample_loss_and_grad(&CavityDistribution::from_logits(3, 4, lm), &x, &c, None).unwrap();
            assert_abs_diff_eq!(g[i], (fp - fm) / (2.0 * h), epsilon = 1e-8);
        }
    }

    #[test]
    fn scheduler_reduces_geometrically_and_never_increases() {
        let mut s = PlateauScheduler::new(0.91, 2, 1e-4);
        let mut lr = 1e-4;
        lr = s.step(1.0, lr);
        for _ in 0..30 {
            let next = s.step(1.0, lr);
            assert!(next <= lr);
            lr = next;
        }
        // Every third stagnant epoch triggers one reduction: 30 / 3 = 10.
        assert_eq!(s.reductions, 10);
        assert_abs_diff_eq!(lr, 1e-4 * 0.91f64.powi(10), epsilon = 1e-18);
        // Improvements below the relative threshold count as stagnation.
        let mut s = PlateauScheduler::new(0.5, 0, 1e-2);
        s.step(1.0, 1.0);
        assert_eq!(s.step(0.995, 1.0), 0.5);
        assert_eq!(s.step(0.5, 1.0), 1.0);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut a = Adam::new(3, 0.01, 0.9, 0.999, 1e-8);
        let mut p = vec![1.0, -2.0, 0.5];
        a.update(&mut p, &[0.3, -4.0, 0.0]);
        assert_abs_diff_eq!(p[0], 0.99, epsilon = 1e-9);
        assert_abs_diff_eq!(p[1], -1.99, epsilon = 1e-9);
        assert_eq!(p[2], 0.5);
    }

    fn tiny_config(kind: DetectorKind) -> TrainConfig {
        TrainConfig {
            detector_kind: kind,
            epochs: 1,
            batches_per_epoch: 2,
            batch_size: 8,
            k_train_set: vec![4],
            n_rx: 4,
            val_samples: 16,
            iterations: 3,
            ..Default::default()
        }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let mut cfg = tiny_config(DetectorKind::Gepnet);
        cfg.lr = 0.0;
        let init = initial_params(&cfg).unwrap();
        let out = train_from(&cfg, init.clone(), &TrainOutputs::default()).unwrap();
        assert_eq!(out.last, init);
    }

    #[test]
    fn identical_seeds_give_identical_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(DetectorKind::Gpicnet);
        let mut bytes = Vec::new();
        for name in ["a.gnn", "b.gnn"] {
            let path = dir.path().join(name);
            train(
                &cfg,
                &TrainOutputs {
                    checkpoint: Some(path.clone()),
                    log_csv: Some(dir.path().join(format!("{name}.csv"))),
                },
            )
            .unwrap();
            bytes.push(std::fs::read(path).unwrap());
        }
        assert_eq!(bytes[0], bytes[1]);
        let log = std::fs::read_to_string(dir.path().join("a.gnn.csv")).unwrap();
        assert!(log.starts_with("epoch,train_loss,val_loss,lr"));
    }

    #[test]
    fn end_to_end_gradient_matches_finite_differences() {
        // N = 4, K = 2, M = 2, two detector iterations, two rounds.
        let c = qam(4);
        for kind in [DetectorKind::Gepnet, DetectorKind::Gpicnet] {
            let cfg = TrainConfig {
                detector_kind: kind,
                k_train_set: vec![2],
                n_rx: 2,
                iterations: 2,
                ..Default::default()
            };
            let mut p = initial_params(&cfg).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            for x in &mut p.data {
                *x += rng.random_range(-0.05..0.05);
            }
            let inst = sample_instance(1, 2, &c, 4.0, RngStream::new(9, kind as u64));
            let (_, g) = sample_gradient(&p, &cfg, &inst).unwrap();

            // Node attributes are frozen at their recorded values, matching the
            // truncated gradient; only the GNN path is perturbed.
            let frozen = frozen_attrs(&p, &cfg, &inst);
            let loss_at = |p: &GnnParams| frozen_loss(p, &inst, &frozen);
            let h = 1e-5;
            let mut worst: f64 = 0.0;
            for i in 0..p.len() {
                let orig = p.data[i];
                p.data[i] = orig + h;
                let fp = loss_at(&p);
                p.data[i] = orig - h;
                let fm = loss_at(&p);
                p.data[i] = orig;
                let fd = (fp - fm) / (2.0 * h);
                worst = worst.max((g.data[i] - fd).abs() / g.data[i].abs().max(fd.abs()).max(1e-6));
            }
            assert!(worst < 1e-4, "{kind:?}: worst relative error {worst}");
        }
    }

    /// Node attributes seen by the GNN at every iteration of an unperturbed run.
    fn frozen_attrs(p: &GnnParams, cfg: &TrainConfig, inst: &SystemInstance) -> Vec<(Vec<f64>, Vec<f64>)> {
        struct Spy<'a> {
            inner: GnnCavity<'a>,
            seen: Vec<(Vec<f64>, Vec<f64>)>,
        }
        impl crate::neural::CavitySource for Spy<'_> {
            fn cavity(&mut self, t: usize, m: &[f64], v: &[f64]) -> Result<CavityDistribution> {
                self.seen.push((m.to_vec(), v.to_vec()));
                self.inner.cavity(t, m, v)
            }
        }
        let mut spy = Spy {
            inner: GnnCavity::new(inst, p).unwrap(),
            seen: Vec::new(),
        };
        match cfg.detector_kind {
            DetectorKind::Gepnet => gepnet_run(inst, cfg.iterations, cfg.damping, false, &mut spy).unwrap(),
            DetectorKind::Gpicnet => gpicnet_run(inst, cfg.iterations, cfg.initial_variance, false, &mut spy).unwrap(),
        };
        spy.seen
    }

    fn frozen_loss(p: &GnnParams, inst: &SystemInstance, attrs: &[(Vec<f64>, Vec<f64>)]) -> f64 {
        use crate::neural::CavitySource;
        let mut src = GnnCavity::new(inst, p).unwrap();
        let mut q = None;
        for (t, (m, v)) in attrs.iter().enumerate() {
            q = Some(src.cavity(t + 1, m, v).unwrap());
        }
        sample_loss_and_grad(&q.unwrap(), &labels(inst), &inst.constellation, None).unwrap()
    }

    #[test]
    fn smoke_run_loss_decreases_on_its_batch() {
        // One epoch of two steps on K_train = 4, N = 8: each Adam step must lower
        // the loss of the batch it was computed on for at least 8 of 10 seeds.
        let c = qam(4);
        let mut decreasing = 0;
        for seed in 0..10 {
            let cfg = TrainConfig {
                seed,
                lr: 1e-3,
                batch_size: 16,
                k_train_set: vec![4],
                n_rx: 4,
                iterations: 4,
                ..Default::default()
            };
            let mut p = initial_params(&cfg).unwrap();
            let mut adam = Adam::new(p.len(), cfg.lr, 0.9, 0.999, 1e-8);
            let mut ok = true;
            for b in 0..2 {
                let batch = training_batch(&cfg, &c, 1, b).unwrap();
                let (before, g) = batch_gradient(&p, &cfg, &batch).unwrap();
                assert!(before.is_finite());
                adam.update(&mut p.data, &g.data);
                let after = evaluate_loss(&p, &cfg, &batch).unwrap();
                ok &= after < before;
            }
            decreasing += ok as usize;
        }
        assert!(decreasing >= 8, "loss decreased for {decreasing}/10 seeds");
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = TrainConfig::desk(DetectorKind::Gepnet);
        cfg.snr_min_db = 20.0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::desk(DetectorKind::Gepnet);
        cfg.k_train_set = vec![];
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::desk(DetectorKind::Gepnet);
        cfg.k_train_set = vec![18];
        assert!(cfg.validate().is_err());
        assert!(TrainConfig::paper(DetectorKind::Gpicnet).validate().is_ok());
    }

    #[test]
    fn mixed_user_counts_share_one_parameter_set() {
        let cfg = tiny_config(DetectorKind::Gepnet);
        let p = initial_params(&cfg).unwrap();
        let c = qam(4);
        for k in [2usize, 4, 6] {
            let inst = sample_instance(k / 2, 4, &c, 8.0, RngStream::new(1, k as u64));
            let (_, g) = sample_gradient(&p, &cfg, &inst).unwrap();
            assert_eq!(g.len(), p.len());
        }
    }
}
