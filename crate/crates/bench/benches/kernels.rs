use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dropphase_bench::{cloud, fixture};
use dropphase_core::diagnostics::ntk_gram;
use dropphase_core::finite::{decompose_update, dropout_step};
use dropphase_core::limit::{wgf_step, Integrator};
use dropphase_core::transport::{w1_exact, w1_sliced};
use dropphase_core::{MaskSource, MaskStream};
use std::hint::black_box;

fn steps(c: &mut Criterion) {
    let mut g = c.benchmark_group("dropout_step");
    for n in [1_000usize, 10_000] {
        let (model, ens) = fixture(5, 8, n);
        let row = MaskStream::new(0.5, 0).unwrap().row(1, n);
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| dropout_step(&model, black_box(&ens), &row, 0.5).unwrap())
        });
    }
    g.finish();

    let (model, ens) = fixture(5, 8, 1_000);
    let masks = MaskStream::new(0.5, 0).unwrap();
    let tilde = masks.row(2, 1_000);
    let row = masks.row(1, 1_000);
    c.bench_function("decompose_update/1000", |b| {
        b.iter(|| decompose_update(&model, black_box(&ens), &row, &tilde, 0.5).unwrap())
    });
    c.bench_function("wgf_rk4_step/1000", |b| {
        b.iter(|| wgf_step(&model, black_box(&ens), 0.0, 0.01, Integrator::Rk4).unwrap())
    });
}

fn transport(c: &mut Criterion) {
    let mut g = c.benchmark_group("w1_exact");
    g.sample_size(10);
    for n in [128usize, 512] {
        let (a, b) = (cloud(5, n, 1), cloud(5, n, 2));
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| w1_exact(black_box(&a), black_box(&b)).unwrap())
        });
    }
    g.finish();

    let (a, b) = (cloud(5, 8192, 1), cloud(5, 8192, 2));
    c.bench_function("w1_sliced/8192", |bench| {
        bench.iter(|| w1_sliced(black_box(&a), black_box(&b), 64, 0).unwrap())
    });
}

fn ntk(c: &mut Criterion) {
    let (model, ens) = fixture(5, 8, 4096);
    c.bench_function("ntk_gram/4096", |b| b.iter(|| ntk_gram(&model, black_box(&ens)).unwrap()));
}

criterion_group!(benches, steps, transport, ntk);
criterion_main!(benches);
