use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use tvsynth_bench::synthetic_history;
use tvsynth_core::optimizer::{pareto_frontier, select_knee, tpe_suggest, SearchSpace, TpeConfig};

fn suggest(c: &mut Criterion) {
    let space = SearchSpace::default();
    let config = TpeConfig::default();
    let mut group = c.benchmark_group("tpe_suggest");
    for len in [20usize, 100, 500] {
        let history = synthetic_history(len, 3);
        group.bench_with_input(BenchmarkId::from_parameter(len), &history, |b, h| {
            b.iter(|| tpe_suggest(black_box(h), &space, &config).unwrap())
        });
    }
    group.finish();
}

fn frontier(c: &mut Criterion) {
    let mut group = c.benchmark_group("pareto");
    for len in [100usize, 1_000, 10_000] {
        let history = synthetic_history(len, 11);
        group.bench_with_input(BenchmarkId::new("frontier", len), &history, |b, h| {
            b.iter(|| pareto_frontier(black_box(h)).unwrap())
        });
        let front = pareto_frontier(&history).unwrap();
        group.bench_with_input(BenchmarkId::new("knee", len), &front, |b, f| {
            b.iter(|| select_knee(black_box(f)).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, suggest, frontier);
criterion_main!(benches);
