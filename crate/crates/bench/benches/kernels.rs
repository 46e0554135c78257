use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use bismut_core::{
    build_control, estimate_gradient_bismut, simulate_reference, solve_lsmc, ControlRequest, ControlVariant,
    DriftSpec, GeneratorSpec, HVector, ModeBasis, ModelParams, SimConfig, TerminalSpec, TestFunctional,
};

fn semigroup(c: &mut Criterion) {
    let mut group = c.benchmark_group("semigroup");
    for n in [32, 256] {
        let wave = ModeBasis::new(ModelParams::wave(n, 2.0)).unwrap();
        let damped = ModeBasis::new(ModelParams::damped(n, 2.0, 1.5, 0.75)).unwrap();
        let h = HVector::new(vec![1.0; n], vec![0.5; n]);
        group.bench_with_input(BenchmarkId::new("wave", n), &h, |b, h| {
            b.iter(|| wave.apply_semigroup(black_box(0.37), h))
        });
        group.bench_with_input(BenchmarkId::new("damped", n), &h, |b, h| {
            b.iter(|| damped.apply_semigroup(black_box(0.37), h))
        });
    }
    group.finish();
}

fn control(c: &mut Criterion) {
    let basis = ModeBasis::new(ModelParams::wave(32, 2.0)).unwrap();
    let h = HVector::new((1..=32).map(|n| 1.0 / n as f64).collect(), vec![0.1; 32]);
    c.bench_function("build_control/wave_k/32", |b| {
        b.iter(|| build_control(&basis, &ControlRequest::new(ControlVariant::WaveK, h.clone(), 0.0, black_box(1.0))))
    });
}

fn paths(c: &mut Criterion) {
    let basis = ModeBasis::new(ModelParams::damped(8, 2.0, 1.5, 0.75)).unwrap();
    let cfg = SimConfig::new(32, 2_000, 1, 0.0, 1.0);
    let x = HVector::zeros(8);
    c.bench_function("simulate_reference/8x32x2000", |b| b.iter(|| simulate_reference(&basis, &cfg, &x)));

    let mut a = vec![0.0; 8];
    a[0] = 1.0;
    let h = basis.embed_j(&a);
    let f = TestFunctional::BoundedSmooth(HVector::new(vec![1.0; 8], vec![0.5; 8]));
    let ctrl = build_control(&basis, &ControlRequest::new(ControlVariant::DampedJ, h.clone(), 0.0, 1.0)).unwrap();
    c.bench_function("bismut_gradient/8x32x2000", |b| {
        b.iter(|| estimate_gradient_bismut(&basis, &cfg, &x, &f, &ctrl, &h))
    });
}

fn lsmc(c: &mut Criterion) {
    let basis = ModeBasis::new(ModelParams::damped(4, 2.0, 1.5, 0.75)).unwrap();
    let cfg = SimConfig::new(16, 4_000, 1, 0.0, 1.0);
    let x = HVector::zeros(4);
    let term = TerminalSpec::new(TestFunctional::BoundedSmooth(HVector::new(vec![1.0; 4], vec![0.5; 4])));
    let gen = GeneratorSpec::LipschitzNonlinear { a: 0.3, b: 0.2 };
    let mut group = c.benchmark_group("lsmc");
    group.sample_size(10);
    group.bench_function("4x16x4000", |b| b.iter(|| solve_lsmc(&basis, &cfg, &DriftSpec::Zero, &x, &gen, &term)));
    group.finish();
}

criterion_group!(benches, semigroup, control, paths, lsmc);
criterion_main!(benches);
