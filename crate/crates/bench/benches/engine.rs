use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use switchdiff::families::Example52Kernel;
use switchdiff::markov_chain::{invariant_measure, transition_matrix, truncate};
use switchdiff::rates::{lambda_grid, sup_ratio_curve, RateProfile};
use switchdiff::simulator::{run_coupled_ensemble, simulate};
use switchdiff::TruncationMode;
use switchdiff_bench::{example51, example52, short_run};

fn chain(c: &mut Criterion) {
    let mut group = c.benchmark_group("chain");
    for n in [30, 100, 300] {
        let chain = truncate(&Example52Kernel::default(), 2, n, TruncationMode::Lump).unwrap();
        group.bench_with_input(BenchmarkId::new("invariant_measure", n), &chain, |b, ch| {
            b.iter(|| invariant_measure(black_box(ch)).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("transition_matrix_t10", n), &chain, |b, ch| {
            b.iter(|| transition_matrix(black_box(ch), 10.0).unwrap())
        });
    }
    group.finish();
}

fn paths(c: &mut Criterion) {
    let mut group = c.benchmark_group("simulate");
    let e51 = example51();
    let cfg = short_run(vec![0.1], 0.01, 10.0);
    group.bench_function("example51_1000_steps", |b| b.iter(|| simulate(&e51, black_box(&cfg)).unwrap()));
    let e52 = example52();
    let cfg = short_run(vec![1e-3, 0.0], 1e-3, 1.0);
    group.bench_function("example52_1000_steps", |b| b.iter(|| simulate(&e52, black_box(&cfg)).unwrap()));
    let mut coupled = cfg.clone();
    coupled.stop_radius = Some(2e-3);
    group.sample_size(20);
    group.bench_function("example52_coupled_100_paths", |b| {
        b.iter(|| run_coupled_ensemble(&e52, black_box(&coupled), 100).unwrap())
    });
    group.finish();
}

fn rate_curve(c: &mut Criterion) {
    let e51 = example51();
    let traj = simulate(&e51, &short_run(vec![0.1], 0.01, 50.0)).unwrap();
    let profile = RateProfile::power(0.5, 0.25).unwrap();
    let lambdas = lambda_grid();
    c.bench_function("sup_ratio_curve_5000_points", |b| {
        b.iter(|| sup_ratio_curve(black_box(&traj), &|x: &[f64]| x[0] * x[0], &profile, 12.5, &lambdas).unwrap())
    });
}

criterion_group!(benches, chain, paths, rate_curve);
criterion_main!(benches);
