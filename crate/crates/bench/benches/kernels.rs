use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use mmer_bench::{task_vectors, toy_bundle, toy_config, toy_sequence};
use mmer_core::runtime::DecoupleOptions;
use mmer_core::{build_mask, decoupled_forward, ties_merge};

fn merging(c: &mut Criterion) {
    let mut group = c.benchmark_group("ties_merge");
    for len in [10_000usize, 100_000] {
        let taus = task_vectors(4, len, 1);
        group.bench_with_input(BenchmarkId::from_parameter(len), &taus, |b, taus| {
            b.iter(|| ties_merge(black_box(taus), 80.0, 1.0).unwrap())
        });
    }
    group.finish();
}

fn masking(c: &mut Criterion) {
    let taus = task_vectors(4, 100_000, 2);
    let merged = ties_merge(&taus, 80.0, 1.0).unwrap();
    c.bench_function("build_mask/100000", |b| {
        b.iter(|| build_mask(black_box(&taus[0]), black_box(&merged), "vision", 1.0).unwrap())
    });
}

fn decoupled(c: &mut Criterion) {
    let config = toy_config();
    let bundle = toy_bundle(&config, 3);
    let seq = toy_sequence(&config, 16, 4);
    let opts = DecoupleOptions::default();
    c.bench_function("decoupled_forward/48_tokens", |b| {
        b.iter(|| decoupled_forward(black_box(&bundle), &config, black_box(&seq), &opts).unwrap())
    });
}

criterion_group!(benches, merging, masking, decoupled);
criterion_main!(benches);
