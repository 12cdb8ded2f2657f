use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use nmpc_tuner::{generate_cloud, pvtol_problem, realize, sim_cl, solve, DesignBounds, MpcSetting, ShapingVector, TimingMode};

const TIMING: TimingMode = TimingMode::CostModel { c_eval: 1e-9 };

fn setting(alpha: f64) -> MpcSetting {
    let pb = pvtol_problem();
    let d = realize(&ShapingVector::linear(), alpha, &DesignBounds::default()).unwrap();
    MpcSetting::new(&pb, d).unwrap()
}

fn open_loop(c: &mut Criterion) {
    let pb = pvtol_problem();
    let sc = generate_cloud(&pb, 1, 11).remove(0);
    let mut g = c.benchmark_group("solve");
    for alpha in [0.0, 0.5, 1.0] {
        let s = setting(alpha);
        let z0 = s.default_warm_start();
        g.bench_function(format!("alpha={alpha}"), |b| {
            b.iter(|| solve(&s, black_box(&sc.x0), &sc.p, &sc.q, &z0, TIMING))
        });
    }
    g.finish();
}

fn closed_loop(c: &mut Criterion) {
    let pb = pvtol_problem();
    let sc = generate_cloud(&pb, 1, 11).remove(0);
    let s = setting(0.5);
    let z0 = s.default_warm_start();
    let mut g = c.benchmark_group("sim_cl");
    g.sample_size(10);
    g.bench_function("alpha=0.5", |b| b.iter(|| sim_cl(&s, black_box(&sc), &z0, TIMING)));
    g.finish();
}

criterion_group!(benches, open_loop, closed_loop);
criterion_main!(benches);
