use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use std::hint::black_box;

use tvsynth_bench::synthetic_task_vector;
use tvsynth_core::task_vector::{global_l2_norm, sparsify, sparsify_and_rescale, QuantileMode, QuantileScope};

fn thresholds(c: &mut Criterion) {
    let mut group = c.benchmark_group("sparsify");
    group.sample_size(10);
    for params in [100_000usize, 1_000_000, 4_000_000] {
        let tv = synthetic_task_vector(params, 16, 42);
        group.throughput(Throughput::Elements(params as u64));
        for (label, mode) in [("exact", QuantileMode::Exact), ("streaming", QuantileMode::Streaming)] {
            group.bench_with_input(BenchmarkId::new(label, params), &tv, |b, tv| {
                b.iter(|| sparsify(black_box(tv), 0.3, mode).unwrap())
            });
        }
    }
    group.finish();
}

fn full_transform(c: &mut Criterion) {
    let tv = synthetic_task_vector(1_000_000, 16, 7);
    let mut group = c.benchmark_group("sparsify_and_rescale");
    group.sample_size(10);
    group.bench_function("global_1m", |b| {
        b.iter(|| sparsify_and_rescale(black_box(&tv), 0.3, QuantileMode::Exact, QuantileScope::Global, 1e-8).unwrap())
    });
    group.bench_function("per_tensor_1m", |b| {
        b.iter(|| {
            sparsify_and_rescale(black_box(&tv), 0.3, QuantileMode::Exact, QuantileScope::PerTensor, 1e-8).unwrap()
        })
    });
    group.bench_function("norm_1m", |b| b.iter(|| global_l2_norm(black_box(&tv))));
    group.finish();
}

criterion_group!(benches, thresholds, full_transform);
criterion_main!(benches);
