use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use uslv_bench::{ar_components, lv_1d, lv_2d};
use uslv_core::ar_uslv::forward_induction_calibrate;
use uslv_core::transient_probability::transient_distribution;

fn transient(c: &mut Criterion) {
    let mut group = c.benchmark_group("transient");
    for (name, lv) in [("1d_401", lv_1d(401)), ("2d_40x40", lv_2d(40))] {
        let g = lv.interval_generator(0).unwrap();
        let p0 = lv.initial_distribution().unwrap();
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| transient_distribution(black_box(&p0), &g, 1.0, 1e-12).unwrap())
        });
    }
    group.finish();
}

fn generator(c: &mut Criterion) {
    let mut group = c.benchmark_group("generator_build");
    for p in [20, 50, 100] {
        let lv = lv_2d(p);
        group.bench_function(BenchmarkId::from_parameter(p), |b| {
            b.iter(|| lv.interval_generator(black_box(0)).unwrap())
        });
    }
    group.finish();
}

fn activity_steps(c: &mut Criterion) {
    let lv = lv_2d(20);
    let comp = ar_components(1);
    c.bench_function("ar_calibration_20x20_3x3_dt_1_50", |b| {
        b.iter(|| forward_induction_calibrate(&lv, &comp, 1.0 / 50.0, 1.0).unwrap())
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = transient, generator, activity_steps
}
criterion_main!(benches);
