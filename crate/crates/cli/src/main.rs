use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;

use mimo_core::analysis::{
    analyze_detector, condition_binned_ser, write_condition_csv, write_metrics_csv, write_qq_csv, AnalysisOptions,
    DEFAULT_POSTERIOR_BUDGET,
};
use mimo_core::complexity::{complexity_estimate, ComplexityParams, COMPLEXITY_DETECTORS};
use mimo_core::sweep::{
    build_detector, build_detector_with, run_robustness, run_sweep, write_rows_csv, write_rows_json, ResultRow,
    RobustnessScenario, RunOptions, Scenario,
};
use mimo_core::gnn::load_checkpoint;
use mimo_core::train::{train, train_from, DetectorKind, TrainConfig, TrainOutputs};
use mimo_core::Error;

/// Exit status per failure class.
mod exit {
    pub const OTHER: u8 = 1;
    pub const CONFIG: u8 = 2;
    pub const IO: u8 = 3;
    pub const PARTIAL: u8 = 4;
    pub const DIVERGED: u8 = 5;
}

#[derive(Parser)]
#[command(name = "mimo", version, about = "MU-MIMO detection sweeps, training and posterior analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// JSON configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file (or directory for `analyze`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Report zero wall time so identical runs write identical files.
    #[arg(long, global = true)]
    deterministic: bool,
}

#[derive(Subcommand)]
enum Command {
    /// SER versus SNR for every configured detector.
    Sweep,
    /// Train a GEPNet or GPICNet model.
    Train {
        /// Start from this preset before applying the config file.
        #[arg(long, value_enum, default_value_t = Preset::Desk)]
        preset: Preset,
        #[arg(long, value_enum)]
        detector: Option<Kind>,
        /// Continue from this checkpoint instead of a fresh initialization.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Posterior metrics, residual statistics and condition-binned SER.
    Analyze {
        /// Enumeration budget for the exact posterior.
        #[arg(long, default_value_t = DEFAULT_POSTERIOR_BUDGET as u64)]
        budget: u64,
        #[arg(long, default_value_t = 200)]
        qq_points: usize,
    },
    /// Evaluate checkpoints trained on different user counts at each test size.
    Robustness,
    /// Multiplications per detected vector.
    Complexity {
        /// Detector name; all rows when omitted.
        #[arg(long)]
        detector: Option<String>,
        /// Real receive dimension.
        #[arg(long, default_value_t = 256)]
        n: usize,
        /// Real user dimension.
        #[arg(long, default_value_t = 128)]
        k: usize,
        /// Real constellation points per dimension.
        #[arg(long, default_value_t = 4)]
        m: usize,
        #[arg(long, default_value_t = 10)]
        t: usize,
        #[arg(long, default_value_t = 2)]
        l: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Desk,
    Paper,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Gepnet,
    Gpicnet,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(classify(&e))
        }
    }
}

fn classify(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::UnknownDetector(_) | Error::UnsupportedQamOrder(_)) => exit::CONFIG,
        Some(Error::Io(_) | Error::MissingCheckpoint(_) | Error::BadMagic | Error::Truncated(_) | Error::Malformed(_) | Error::VersionMismatch { .. }) => {
            exit::IO
        }
        Some(Error::Diverged { .. }) => exit::DIVERGED,
        Some(_) => exit::OTHER,
        None if e.downcast_ref::<io::Error>().is_some() => exit::IO,
        None if e.downcast_ref::<serde_json::Error>().is_some() => exit::CONFIG,
        None => exit::OTHER,
    }
}

fn run(cli: Cli) -> Result<u8> {
    let c = cli.common;
    if let Some(w) = c.workers {
        rayon::ThreadPoolBuilder::new().num_threads(w).build_global().context("configuring worker pool")?;
    }
    let opts = RunOptions {
        deterministic: c.deterministic,
    };
    match cli.command {
        Command::Sweep => {
            let mut s: Scenario = load_or_default(c.config.as_deref())?;
            if let Some(seed) = c.seed {
                s.seed = seed;
            }
            let rows = run_sweep(&s, opts)?;
            emit_rows(&rows, c.out.as_deref())
        }
        Command::Robustness => {
            let mut s: RobustnessScenario = load_or_default(c.config.as_deref())?;
            if let Some(seed) = c.seed {
                s.base.seed = seed;
            }
            let rows = run_robustness(&s, opts)?;
            emit_rows(&rows, c.out.as_deref())
        }
        Command::Train { preset, detector, init } => {
            let kind = match detector {
                Some(Kind::Gpicnet) => DetectorKind::Gpicnet,
                _ => DetectorKind::Gepnet,
            };
            let mut cfg = match preset {
                Preset::Desk => TrainConfig::desk(kind),
                Preset::Paper => TrainConfig::paper(kind),
            };
            if let Some(path) = &c.config {
                cfg = merge_json(cfg, path)?;
            }
            if detector.is_some() {
                cfg.detector_kind = kind;
            }
            if let Some(seed) = c.seed {
                cfg.seed = seed;
            }
            let out = c.out.unwrap_or_else(|| PathBuf::from(format!("{}.gnn", cfg.detector_kind.name())));
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            let outputs = TrainOutputs {
                checkpoint: Some(out.clone()),
                log_csv: Some(out.with_extension("csv")),
            };
            let outcome = match init {
                Some(path) => train_from(&cfg, load_checkpoint(&path)?.0, &outputs)?,
                None => train(&cfg, &outputs)?,
            };
            println!(
                "best epoch {} validation loss {:.6}, checkpoint {}",
                outcome.best_epoch,
                outcome.best_val_loss,
                out.display()
            );
            Ok(0)
        }
        Command::Analyze { budget, qq_points } => {
            let mut s: Scenario = load_or_default(c.config.as_deref())?;
            if let Some(seed) = c.seed {
                s.seed = seed;
            }
            s.validate()?;
            let dir = c.out.unwrap_or_else(|| PathBuf::from("analysis"));
            fs::create_dir_all(&dir)?;
            analyze(&s, &dir, budget as u128, qq_points)
        }
        Command::Complexity { detector, n, k, m, t, l } => {
            let mut p = ComplexityParams::new(n, k, m);
            p.t = t as f64;
            p.l = l as f64;
            let names: Vec<String> = match detector {
                Some(d) => vec![d],
                None => COMPLEXITY_DETECTORS.iter().map(|s| s.to_string()).collect(),
            };
            let mut text = String::from("detector,n,k,m,t,l,multiplications\n");
            for d in &names {
                let v = complexity_estimate(d, &p)?;
                text.push_str(&format!("{d},{n},{k},{m},{t},{l},{v}\n"));
            }
            write_text(&text, c.out.as_deref())?;
            Ok(0)
        }
    }
}

fn analyze(s: &Scenario, dir: &Path, budget: u128, qq_points: usize) -> Result<u8> {
    let mut reports = Vec::new();
    let mut failed = false;
    for name in &s.detectors {
        let det = match build_detector_with(name, s, true) {
            Ok(d) => d,
            Err(e) => {
                log::error!("{name}: {e}");
                failed = true;
                continue;
            }
        };
        for snr in s.snr.points()? {
            let opts = AnalysisOptions {
                n_tx: s.n_tx,
                n_rx: s.n_rx,
                qam_order: s.qam_order,
                snr_db: snr,
                instances: s.samples,
                seed: s.seed,
                budget,
                qq_points,
                moments: s.analysis.posterior_metrics,
            };
            if s.analysis.posterior_metrics || s.analysis.residual_noise {
                match analyze_detector(det.as_ref(), &opts) {
                    Ok(rep) => {
                        if let Some(res) = &rep.residuals {
                            let f = File::create(dir.join(format!("qq_{name}_{snr}.csv")))?;
                            write_qq_csv(BufWriter::new(f), &res.qq)?;
                        }
                        reports.push(rep);
                    }
                    Err(e) => {
                        log::error!("{name} at {snr} dB: {e}");
                        failed = true;
                    }
                }
            }
            if let Some(bins) = s.analysis.condition_bins {
                let plain = build_detector(name, s)?;
                let table =
                    condition_binned_ser(plain.as_ref(), s.n_tx, s.n_rx, s.qam_order, snr, s.samples, 10, bins, s.seed)?;
                let f = File::create(dir.join(format!("condition_{name}_{snr}.csv")))?;
                write_condition_csv(BufWriter::new(f), &table)?;
            }
        }
    }
    write_metrics_csv(BufWriter::new(File::create(dir.join("metrics.csv"))?), &reports)?;
    Ok(if failed { exit::PARTIAL } else { 0 })
}

fn emit_rows(rows: &[ResultRow], out: Option<&Path>) -> Result<u8> {
    let json = out.is_some_and(|p| p.extension().is_some_and(|e| e == "json"));
    let mut buf = Vec::new();
    if json {
        write_rows_json(&mut buf, rows)?;
    } else {
        write_rows_csv(&mut buf, rows)?;
    }
    write_bytes(&buf, out)?;
    let failures = rows.iter().filter(|r| r.status != "ok").count();
    if failures > 0 {
        log::warn!("{failures} of {} rows failed", rows.len());
        return Ok(exit::PARTIAL);
    }
    Ok(0)
}

fn write_text(text: &str, out: Option<&Path>) -> Result<()> {
    write_bytes(text.as_bytes(), out)
}

fn write_bytes(bytes: &[u8], out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            fs::write(p, bytes).with_context(|| format!("writing {}", p.display()))?;
        }
        None => io::stdout().write_all(bytes)?,
    }
    Ok(())
}

fn load_or_default<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())).into())
        }
    }
}

/// Applies the keys present in a JSON file on top of `base`.
fn merge_json<T: serde::Serialize + DeserializeOwned>(base: T, path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let overlay: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let serde_json::Value::Object(overlay) = overlay else {
        bail!(Error::Config(format!("{}: expected a JSON object", path.display())));
    };
    let mut merged = serde_json::to_value(base)?;
    let obj = merged.as_object_mut().expect("configs serialize to objects");
    for (k, v) in overlay {
        obj.insert(k, v);
    }
    serde_json::from_value(merged).map_err(|e| Error::Config(format!("{}: {e}", path.display())).into())
}
