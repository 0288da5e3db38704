//! Shared fixtures for the benchmarks.

use std::sync::Arc;

use mimo_core::{sample_instance, Constellation, RngStream, SystemInstance};

/// A Rayleigh instance with `n_tx` users and `n_rx` receive antennas.
pub fn instance(n_tx: usize, n_rx: usize, qam_order: usize, snr_db: f64) -> SystemInstance {
    let c = Arc::new(Constellation::new(qam_order).expect("supported order"));
    sample_instance(n_tx, n_rx, &c, snr_db, RngStream::new(7, 0))
}
