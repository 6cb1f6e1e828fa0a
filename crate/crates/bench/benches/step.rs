use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use s2h_bench::fixture;
use s2h_core::pruner::{compute_bundle, prune_step, D1Graph, OptimizerState};
use s2h_core::ForwardMode;

fn forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("forward");
    for width in [32, 128] {
        let (g, batch, _) = fixture(width, 64);
        for mode in [ForwardMode::Soft, ForwardMode::Hard] {
            group.bench_with_input(BenchmarkId::new(format!("{mode:?}"), width), &width, |b, _| {
                b.iter(|| g.logits_for(black_box(&batch.x), mode).unwrap())
            });
        }
    }
    group.finish();
}

fn backward(c: &mut Criterion) {
    let mut group = c.benchmark_group("bundle");
    for width in [32, 128] {
        let (g, batch, cfg) = fixture(width, 64);
        group.bench_with_input(BenchmarkId::from_parameter(width), &width, |b, _| {
            b.iter(|| compute_bundle(&g, black_box(&batch), &cfg, D1Graph::Detached).unwrap())
        });
    }
    group.finish();
}

fn step(c: &mut Criterion) {
    let mut group = c.benchmark_group("prune_step");
    for width in [32, 128] {
        let (mut g, batch, cfg) = fixture(width, 64);
        let mut opt = OptimizerState::zeros(&g.theta(), &g.logits());
        group.bench_with_input(BenchmarkId::from_parameter(width), &width, |b, _| {
            b.iter(|| prune_step(&mut g, black_box(&batch), &cfg, &mut opt, 1e-3).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, forward, backward, step);
criterion_main!(benches);
