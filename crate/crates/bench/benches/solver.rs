use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use strider_core::pipeline::{build_problem, EstimatorConfig, FactorSet};
use strider_core::sim::{generate, ScenarioConfig};

fn bench_solver(c: &mut Criterion) {
    let scfg = ScenarioConfig {
        duration: 5.0,
        encoder_rate: 200.0,
        imu_rate: 200.0,
        ..ScenarioConfig::default()
    };
    let (_, records) = generate(&scfg).unwrap();
    let cfg = EstimatorConfig { factor_set: FactorSet::Vic, ..EstimatorConfig::default() };
    let mut group = c.benchmark_group("solver");
    group.sample_size(10);
    group.bench_function("linearize_5s_vic", |b| {
        let problem = build_problem(&records, &cfg).unwrap();
        b.iter(|| black_box(problem.graph.linearize().unwrap()))
    });
    group.bench_function("solve_5s_vic", |b| {
        b.iter(|| {
            let mut problem = build_problem(&records, &cfg).unwrap();
            black_box(problem.solve(&cfg.lm).unwrap())
        })
    });
    group.finish();
}

criterion_group!(benches, bench_solver);
criterion_main!(benches);
