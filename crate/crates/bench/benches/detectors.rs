use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mimo_bench::instance;
use mimo_core::analysis::enumerate_posterior;
use mimo_core::detect::{bpic_detect, ep_detect, ml_oracle, mmse_detect, BpicConfig, EpConfig};
use mimo_core::gnn::{gnn_backward, GnnDims, GnnParams};
use mimo_core::neural::{gepnet_detect, gpicnet_detect, GepnetConfig, GnnCavity, GpicnetConfig};
use mimo_core::neural::gepnet_run;
use mimo_core::RngStream;

fn classical(c: &mut Criterion) {
    let mut g = c.benchmark_group("classical");
    for n_tx in [4, 8, 16] {
        let inst = instance(n_tx, 16, 16, 12.0);
        g.bench_with_input(BenchmarkId::new("mmse", n_tx), &inst, |b, i| b.iter(|| mmse_detect(black_box(i))));
        g.bench_with_input(BenchmarkId::new("ep", n_tx), &inst, |b, i| {
            b.iter(|| ep_detect(black_box(i), &EpConfig::default()))
        });
        g.bench_with_input(BenchmarkId::new("bpic", n_tx), &inst, |b, i| {
            b.iter(|| bpic_detect(black_box(i), &BpicConfig::default()))
        });
    }
    g.finish();
}

fn learned(c: &mut Criterion) {
    let params = Arc::new(GnnParams::init(GnnDims::new(2), &mut RngStream::new(1, 1).rng()));
    let mut g = c.benchmark_group("learned");
    for n_tx in [2, 4, 8] {
        let inst = instance(n_tx, 8, 4, 9.0);
        let gep = GepnetConfig::new(params.clone());
        let gpic = GpicnetConfig::new(params.clone());
        g.bench_with_input(BenchmarkId::new("gepnet", n_tx), &inst, |b, i| b.iter(|| gepnet_detect(black_box(i), &gep)));
        g.bench_with_input(BenchmarkId::new("gpicnet", n_tx), &inst, |b, i| {
            b.iter(|| gpicnet_detect(black_box(i), &gpic))
        });
        g.bench_with_input(BenchmarkId::new("gepnet_backward", n_tx), &inst, |b, i| {
            b.iter(|| {
                let mut src = GnnCavity::recording(i, &params).unwrap();
                let run = gepnet_run(i, 10, 0.7, false, &mut src).unwrap();
                let tape = src.into_tape().unwrap();
                let mut up = vec![Vec::new(); tape.len()];
                *up.last_mut().unwrap() = run.final_cavity.q.clone();
                gnn_backward(&tape, &params, &up)
            })
        });
    }
    g.finish();
}

fn exhaustive(c: &mut Criterion) {
    let mut g = c.benchmark_group("exhaustive");
    g.sample_size(10);
    let inst = instance(6, 8, 4, 12.5);
    g.bench_function("ml_oracle_k12", |b| b.iter(|| ml_oracle(black_box(&inst), 1 << 20)));
    g.bench_function("posterior_k12", |b| b.iter(|| enumerate_posterior(black_box(&inst), 1 << 20)));
    g.finish();
}

criterion_group!(benches, classical, learned, exhaustive);
criterion_main!(benches);
