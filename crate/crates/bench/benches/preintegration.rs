use criterion::{criterion_group, criterion_main, Criterion};
use nalgebra::{DVector, Vector3};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use std::hint::black_box;

use strider_core::contact::{ContactNoiseModel, PreintegratedContact, SwitchEvent};
use strider_core::imu::{integrate_deltas, preintegrate, ImuBias, ImuNoise, ImuSample};
use strider_core::kinematics::{ContactFrame, EncoderReading, RobotModel};

fn imu_chunk(n: usize) -> (Vec<ImuSample>, f64) {
    let mut rng = StdRng::seed_from_u64(2);
    let dt = 1.0 / 400.0;
    let samples = (0..n)
        .map(|k| ImuSample {
            t: k as f64 * dt,
            omega: Vector3::from_fn(|_, _| rng.random_range(-0.5..0.5)),
            accel: Vector3::new(0.0, 0.0, 9.81)
                + Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)),
        })
        .collect();
    (samples, n as f64 * dt)
}

fn bench_imu(c: &mut Criterion) {
    let (samples, t_end) = imu_chunk(100);
    let bias = ImuBias::zero();
    let noise = ImuNoise::default();
    let mut group = c.benchmark_group("imu");
    group.bench_function("preintegrate_100_full", |b| {
        b.iter(|| black_box(preintegrate(black_box(&samples), t_end, &bias, &noise).unwrap()))
    });
    group.bench_function("preintegrate_100_deltas_only", |b| {
        b.iter(|| black_box(integrate_deltas(black_box(&samples), t_end, &bias).unwrap()))
    });
    group.finish();
}

fn bench_contact(c: &mut Criterion) {
    let robot = RobotModel::demo_biped();
    let mut rng = StdRng::seed_from_u64(3);
    let alpha = DVector::from_fn(10, |i, _| [0.0, 0.35, -0.7, 0.35, 0.0][i % 5] + rng.random_range(-0.05..0.05));
    let noise = ContactNoiseModel::default();
    let event = SwitchEvent::new(
        0.5,
        ContactFrame::Left,
        ContactFrame::Right,
        EncoderReading::isotropic(0.5, alpha, 1e-3),
    )
    .unwrap();
    let mut group = c.benchmark_group("contact");
    group.bench_function("interval_100_steps_2_switches", |b| {
        b.iter(|| {
            let mut p = PreintegratedContact::new(0);
            for _ in 0..50 {
                p.stance_step(1.0 / 400.0, &noise).unwrap();
            }
            p.switch(&robot, event.clone()).unwrap();
            for _ in 0..50 {
                p.stance_step(1.0 / 400.0, &noise).unwrap();
            }
            let mut back = event.clone();
            (back.from, back.to) = (event.to, event.from);
            p.switch(&robot, back).unwrap();
            black_box(p)
        })
    });
    group.finish();
}

criterion_group!(benches, bench_imu, bench_contact);
criterion_main!(benches);
