use cats_bench::{ball, input};
use cats_core::geometry::{build_window_mask, cyclic_shift, window_partition, GridDims, TokenGrid, WindowSpec};
use cats_core::metrics::surface_scores;
use cats_core::{Model, ModelConfig};
use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

fn geometry(c: &mut Criterion) {
    let dims = GridDims::new(16, 16, 16).unwrap();
    let spec = WindowSpec::shifted([4; 3]).unwrap();
    let grid = TokenGrid::iota(dims, 24);
    c.bench_function("shift_partition_16^3x24", |b| {
        b.iter(|| window_partition(&cyclic_shift(black_box(&grid), [-2; 3]), &spec).unwrap())
    });
    c.bench_function("window_mask_16^3", |b| b.iter(|| build_window_mask(black_box(dims), dims, &spec).unwrap()));
}

fn metrics(c: &mut Criterion) {
    let a = ball(32, 9.0, 0.0);
    let b = ball(32, 8.0, 1.5);
    c.bench_function("surface_scores_32^3", |bench| {
        bench.iter(|| surface_scores(black_box(&a), black_box(&b), [32; 3], [1.0; 3]))
    });
}

fn forward(c: &mut Criterion) {
    let micro: Model<f32> = Model::new(ModelConfig::micro(3), 0).unwrap();
    let x = input(&[1, 1, 8, 8, 8], 1);
    c.bench_function("forward_micro_8^3", |b| b.iter(|| micro.logits(black_box(&x)).unwrap()));

    let full: Model<f32> = Model::new(ModelConfig::default(), 0).unwrap();
    let x = input(&[1, 1, 32, 32, 32], 2);
    let mut group = c.benchmark_group("forward_default");
    group.sample_size(10);
    group.bench_function("32^3", |b| b.iter(|| full.logits(black_box(&x)).unwrap()));
    group.finish();
}

criterion_group!(benches, geometry, metrics, forward);
criterion_main!(benches);
