//! Acceptance suite: one test per shipping criterion, each printing a
//! `[PASS] criterion NN` line (run with `--nocapture` to see them). The
//! suite exercises the library end to end on simulated data plus the CLI
//! binary for the determinism criterion.

use std::collections::BTreeMap;
use std::time::Instant;

use nalgebra::{DVector, Matrix3, Matrix6, Vector3, Vector6};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use strider_core::contact::{
    point_direct_sum, point_monte_carlo_covariance, point_preintegrate, ContactEvent,
    ContactNoiseModel, ContactSchedule, SwitchEvent,
};
use strider_core::eval::{absolute_trajectory_error, median, relative_position_error};
use strider_core::graph::{
    bias_walk_factor, contact_factor, fk_factor, imu_factor, numerical_factor_jacobian,
    prior_factor, relpose_factor, terrain_factor, Factor, StateNode,
};
use strider_core::imu::{preintegrate, ImuBias, ImuNoise, ImuSample, GRAVITY};
use strider_core::kinematics::{
    fk_factor_covariance, fk_noise_factorization_check, ContactFrame, EncoderReading, JointKind,
    JointModel, KinematicChain, RobotModel,
};
use strider_core::manifold::{adjoint, se3_exp, se3_log, Pose, Rotation, Twist};
use strider_core::pipeline::{
    build_problem, build_problem_with_truth_prior, truth_trajectory, EstimatorConfig, FactorSet,
};
use strider_core::sim::{apply_dropout, generate, ScenarioConfig};

fn pass(criterion: u32, detail: &str) {
    println!("[PASS] criterion {criterion:02}: {detail}");
}

#[track_caller]
fn check(cond: bool, criterion: u32, detail: &str) {
    assert!(cond, "[FAIL] criterion {criterion:02}: {detail}");
}

fn random_unit_ball_twist(rng: &mut ChaCha8Rng) -> Twist {
    let x: Vector6<f64> = Vector6::from_fn(|_, _| rng.random_range(-1.0..1.0));
    let n = x.norm();
    Twist::from_vector(&(x / n.max(1.0)))
}

fn random_chain(rng: &mut StdRng) -> KinematicChain {
    let n = rng.random_range(2..=6);
    let joints = (0..n)
        .map(|i| {
            let kind = if rng.random_bool(0.7) { JointKind::Revolute } else { JointKind::Prismatic };
            let axis = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(0.5..1.5),
            );
            let offset = Pose::new(
                Rotation::from_rpy(
                    rng.random_range(-0.3..0.3),
                    rng.random_range(-0.3..0.3),
                    rng.random_range(-0.3..0.3),
                ),
                Vector3::new(
                    rng.random_range(-0.2..0.2),
                    rng.random_range(-0.2..0.2),
                    rng.random_range(-0.4..-0.1),
                ),
            );
            JointModel::new(format!("j{i}"), kind, axis, offset).unwrap()
        })
        .collect();
    KinematicChain {
        name: "random".into(),
        joints,
        end_offset: Pose::from_translation(Vector3::new(0.0, 0.0, -0.05)),
    }
}

fn walk_alpha(rng: &mut StdRng) -> DVector<f64> {
    DVector::from_fn(10, |i, _| {
        [0.0, 0.35, -0.7, 0.35, 0.0][i % 5] + rng.random_range(-0.1..0.1)
    })
}

/// Stance/switch schedule over the demo biped with the requested number of
/// switches, encoder noise sigma per switch reading.
fn demo_schedule(rng: &mut StdRng, n_switches: usize, sigma_alpha: f64) -> ContactSchedule {
    let dt = 1.0 / 400.0;
    let mut events = Vec::new();
    let mut frame = ContactFrame::Left;
    let mut t = 0.0;
    let stance = |events: &mut Vec<ContactEvent>, t: &mut f64, frame: ContactFrame, rng: &mut StdRng| {
        for _ in 0..20 {
            events.push(ContactEvent::Stance { t: *t, dt, frame, alpha: walk_alpha(rng) });
            *t += dt;
        }
    };
    stance(&mut events, &mut t, frame, rng);
    for _ in 0..n_switches {
        let ev = SwitchEvent::new(
            t,
            frame,
            frame.other(),
            EncoderReading::isotropic(t, walk_alpha(rng), sigma_alpha),
        )
        .unwrap();
        frame = ev.to;
        events.push(ContactEvent::Switch(ev));
        stance(&mut events, &mut t, frame, rng);
    }
    ContactSchedule { start_key: 0, events }
}

/// The canonical noisy-walk scenario for the experiment replications:
/// relatively noisy kinematics and inertial readings, good vision.
fn noisy_walk(seed: u64, duration: f64) -> ScenarioConfig {
    ScenarioConfig {
        duration,
        sigma_alpha: 2.5e-2,
        sigma_gyro: 8e-3,
        sigma_accel: 3e-2,
        sigma_relpose_rot: 5e-4,
        sigma_relpose_pos: 2e-2,
        seed,
        ..ScenarioConfig::default()
    }
}

fn estimator_for(scfg: &ScenarioConfig, set: FactorSet) -> EstimatorConfig {
    EstimatorConfig {
        factor_set: set,
        contact_noise: strider_core::sim::contact_noise_model(scfg),
        relpose_covariance: strider_core::sim::relpose_covariance(scfg),
        sigma_alpha: scfg.sigma_alpha.max(1e-4),
        ..EstimatorConfig::default()
    }
}

#[test]
fn criterion_01_lie_group_suite() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst_roundtrip: f64 = 0.0;
    let mut worst_adjoint: f64 = 0.0;
    let mut worst_homomorphism: f64 = 0.0;
    for _ in 0..1000 {
        let xi = random_unit_ball_twist(&mut rng);
        let back = se3_log(&se3_exp(&xi)).unwrap();
        worst_roundtrip = worst_roundtrip.max((back.to_vector() - xi.to_vector()).norm());

        let h = se3_exp(&random_unit_ball_twist(&mut rng));
        let lhs = se3_exp(&Twist::from_vector(&(adjoint(&h) * xi.to_vector())));
        let rhs = h * se3_exp(&xi) * h.inverse();
        worst_adjoint = worst_adjoint.max((lhs.homogeneous() - rhs.homogeneous()).norm());

        let h2 = se3_exp(&random_unit_ball_twist(&mut rng));
        worst_homomorphism = worst_homomorphism
            .max((adjoint(&(h * h2)) - adjoint(&h) * adjoint(&h2)).norm());
    }
    let elapsed = start.elapsed().as_secs_f64();
    check(worst_roundtrip <= 1e-9, 1, &format!("exp/log round trip {worst_roundtrip:.2e}"));
    check(worst_adjoint <= 1e-9, 1, &format!("adjoint conjugation identity {worst_adjoint:.2e}"));
    check(worst_homomorphism <= 1e-9, 1, &format!("adjoint homomorphism {worst_homomorphism:.2e}"));
    check(elapsed < 1.0, 1, &format!("runtime {elapsed:.3}s"));
    pass(1, &format!(
        "1000 twists: round trip {worst_roundtrip:.1e}, adjoint {worst_adjoint:.1e}, homomorphism {worst_homomorphism:.1e}, {elapsed:.2}s"
    ));
}

#[test]
fn criterion_02_fk_noise_factorization() {
    let mut rng = StdRng::seed_from_u64(202);
    let mut checked = 0;
    let mut worst_ratio = f64::INFINITY;
    for _ in 0..100 {
        let chain = random_chain(&mut rng);
        let alpha = DVector::from_fn(chain.dof(), |_, _| rng.random_range(-0.8..0.8));
        let dir = DVector::from_fn(chain.dof(), |_, _| rng.random_range(-1.0..1.0));
        let noise = &dir * (1e-2 / dir.norm());
        let e1 = fk_noise_factorization_check(&chain, &alpha, &noise).unwrap();
        let e2 = fk_noise_factorization_check(&chain, &alpha, &(&noise * 0.5)).unwrap();
        // Chains that are (nearly) affine in the noise direction sit at the
        // numeric-Jacobian floor where the ratio is unmeasurable; their
        // factorization error is already negligible.
        if e1 > 1e-10 {
            let ratio = e1 / e2;
            worst_ratio = worst_ratio.min(ratio);
            check(ratio >= 3.5, 2, &format!("factorization decay ratio {ratio:.2} (e1 {e1:.2e})"));
            checked += 1;
        } else {
            check(e1 <= 1e-10, 2, "unreachable");
        }
    }
    check(checked >= 50, 2, &format!("only {checked} chains had measurable error"));
    pass(2, &format!("{checked} random chains, worst halving ratio {worst_ratio:.2} (>= 3.5)"));
}

#[test]
fn criterion_03_fk_covariance_monte_carlo() {
    let robot = RobotModel::demo_biped();
    let mut rng = StdRng::seed_from_u64(303);
    let sigma_alpha = 1e-3;
    let mut worst_rel: f64 = 0.0;
    for trial in 0..3 {
        let alpha = walk_alpha(&mut rng);
        let reading = EncoderReading::isotropic(0.0, alpha.clone(), sigma_alpha);
        let predicted = fk_factor_covariance(&robot, &reading, ContactFrame::Left).unwrap();
        // Monte-Carlo oracle: sample encoder noise, evaluate the log error
        // of the perturbed forward kinematics directly.
        let nominal_inv = robot.fk_base_to_contact(ContactFrame::Left, &alpha).unwrap().inverse();
        let mut mc_rng = ChaCha8Rng::seed_from_u64(3030 + trial);
        let n_samples = 10_000;
        let mut samples: Vec<Vector6<f64>> = Vec::with_capacity(n_samples);
        for _ in 0..n_samples {
            let noise = DVector::from_fn(10, |_, _| {
                let z: f64 = mc_rng.sample(rand_distr::StandardNormal);
                sigma_alpha * z
            });
            let fk = robot.fk_base_to_contact(ContactFrame::Left, &(&alpha - noise)).unwrap();
            samples.push(se3_log(&(nominal_inv * fk)).unwrap().to_vector());
        }
        let mean: Vector6<f64> = samples.iter().sum::<Vector6<f64>>() / n_samples as f64;
        let mut mc = Matrix6::zeros();
        for s in &samples {
            let d = s - mean;
            mc += d * d.transpose();
        }
        mc /= (n_samples - 1) as f64;
        let rel = (mc - predicted.matrix()).norm() / predicted.matrix().norm();
        worst_rel = worst_rel.max(rel);
        check(rel <= 0.10, 3, &format!("trial {trial}: Frobenius discrepancy {rel:.3}"));
    }
    pass(3, &format!("3 configurations x 10^4 samples, worst discrepancy {:.1}%", worst_rel * 100.0));
}

#[test]
fn criterion_04_hybrid_preintegration_exactness() {
    let robot = RobotModel::demo_biped();
    let mut rng = StdRng::seed_from_u64(404);
    for n_switches in [0usize, 1, 2, 5] {
        let sched = demo_schedule(&mut rng, n_switches, 1e-3);
        let preint = sched.preintegrate(&robot, &ContactNoiseModel::default()).unwrap();
        // Independent direct product over the switch readings.
        let mut product = Pose::identity();
        for ev in &sched.events {
            if let ContactEvent::Switch(sw) = ev {
                product = product * robot.fk_contact_to_contact(sw.from, sw.to, &sw.reading.alpha).unwrap();
            }
        }
        check(
            preint.delta_c().homogeneous() == product.homogeneous(),
            4,
            &format!("{n_switches} switches: measurement differs from the direct product"),
        );
        // Residual at ground truth: C_j generated by the oracle product.
        let c_i = se3_exp(&Twist::new(
            Vector3::new(0.1, -0.05, 0.2),
            Vector3::new(1.0, 0.5, 0.0),
        ));
        let c_j = c_i * product;
        let r = preint.residual(&c_i, &c_j).unwrap().norm();
        check(r <= 1e-9, 4, &format!("{n_switches} switches: residual at truth {r:.2e}"));
    }
    pass(4, "schedules with 0/1/2/5 switches bit-match the switch product; residuals at truth <= 1e-9");
}

#[test]
fn criterion_05_hybrid_covariance_monte_carlo_and_semigroup() {
    let robot = RobotModel::demo_biped();
    let noise = ContactNoiseModel::isotropic(1e-2, 1e-2);
    let mut rng = StdRng::seed_from_u64(505);
    let mut worst_rel: f64 = 0.0;
    for n_switches in [0usize, 1, 2, 5] {
        let sched = demo_schedule(&mut rng, n_switches, 1e-2);
        let preint = sched.preintegrate(&robot, &noise).unwrap();
        let mc = sched
            .monte_carlo_covariance(&robot, &noise, 10_000, 5050 + n_switches as u64)
            .unwrap();
        let rel = (mc - preint.sigma()).norm() / preint.sigma().norm();
        worst_rel = worst_rel.max(rel);
        check(rel <= 0.10, 5, &format!("{n_switches} switches: covariance discrepancy {rel:.3}"));
    }
    // Semigroup property on a 3-switch schedule split at a stance boundary.
    let sched = demo_schedule(&mut rng, 3, 2e-3);
    let split = 30;
    assert!(matches!(sched.events[split - 1], ContactEvent::Stance { .. }));
    let first = ContactSchedule { start_key: 0, events: sched.events[..split].to_vec() };
    let second = ContactSchedule { start_key: 1, events: sched.events[split..].to_vec() };
    let direct = sched.preintegrate(&robot, &noise).unwrap();
    let composed = first
        .preintegrate(&robot, &noise)
        .unwrap()
        .compose(&second.preintegrate(&robot, &noise).unwrap());
    let d_meas = (direct.delta_c().homogeneous() - composed.delta_c().homogeneous()).norm();
    let d_cov = (direct.sigma() - composed.sigma()).norm();
    check(d_meas <= 1e-9, 5, &format!("semigroup measurement gap {d_meas:.2e}"));
    check(d_cov <= 1e-9, 5, &format!("semigroup covariance gap {d_cov:.2e}"));
    pass(5, &format!(
        "Monte-Carlo within {:.1}% across 0/1/2/5 switches; semigroup split/compose {d_meas:.1e}/{d_cov:.1e}",
        worst_rel * 100.0
    ));
}

#[test]
fn criterion_06_point_contact_preintegration() {
    let robot = RobotModel::demo_biped();
    let mut rng = StdRng::seed_from_u64(606);
    let sched = demo_schedule(&mut rng, 2, 5e-3);
    let t_end = sched
        .events
        .iter()
        .map(|ev| match ev {
            ContactEvent::Stance { t, dt, .. } => t + dt,
            ContactEvent::Switch(sw) => sw.t,
        })
        .fold(0.0, f64::max);
    // Aligned IMU stream with a constant turn rate.
    let dt = 1.0 / 400.0;
    let n = (t_end / dt).round() as usize;
    let samples: Vec<ImuSample> = (0..n)
        .map(|k| ImuSample {
            t: k as f64 * dt,
            omega: Vector3::new(0.05, -0.1, 0.3),
            accel: Vector3::zeros(),
        })
        .collect();
    let imu = preintegrate(&samples, t_end, &ImuBias::zero(), &ImuNoise::default()).unwrap();

    let sigma_v = Matrix3::identity() * 1e-4;
    let preint = point_preintegrate(&sched, &robot, &imu, &sigma_v).unwrap();
    // Independent oracle: explicit sum over switch events.
    let mut oracle = Vector3::zeros();
    for ev in &sched.events {
        if let ContactEvent::Switch(sw) = ev {
            let delta_r = imu.rotation_at(sw.t, 1e-9).unwrap();
            let fk_r = robot.fk_base_to_contact(sw.from, &sw.reading.alpha).unwrap().rotation;
            let fk_p = robot
                .fk_contact_to_contact(sw.from, sw.to, &sw.reading.alpha)
                .unwrap()
                .translation;
            oracle += delta_r.rotate(&fk_r.rotate(&fk_p));
        }
    }
    let gap = (preint.delta_d() - oracle).norm();
    check(gap <= 1e-9, 6, &format!("two-switch direct-sum gap {gap:.2e}"));
    check(preint.switches().len() == 2, 6, "schedule should carry two switches");
    let cross_check = point_direct_sum(&sched, &robot, &imu).unwrap();
    check((cross_check - oracle).norm() <= 1e-12, 6, "library oracle disagrees with inline sum");

    let mc = point_monte_carlo_covariance(&sched, &robot, &imu, &sigma_v, 10_000, 606).unwrap();
    let rel = (mc - preint.sigma_d()).norm() / preint.sigma_d().norm();
    check(rel <= 0.15, 6, &format!("point covariance discrepancy {rel:.3}"));
    pass(6, &format!("direct-sum gap {gap:.1e}; Monte-Carlo within {:.1}%", rel * 100.0));
}

#[test]
fn criterion_07_solver_exactness_noise_free_walk() {
    let start = Instant::now();
    let scfg = ScenarioConfig::default(); // 10 s, noise-free
    let (truth, records) = generate(&scfg).unwrap();
    check(truth.switches.len() >= 14, 7, &format!("{} switches", truth.switches.len()));
    let truth_records = truth.to_records();
    let cfg = estimator_for(&scfg, FactorSet::Vic);
    let mut problem = build_problem_with_truth_prior(&records, &truth_records, &cfg).unwrap();
    check(problem.keyframe_times.len() >= 40, 7, &format!("{} keyframes", problem.keyframe_times.len()));
    let report = problem.solve(&cfg.lm).unwrap();
    check(report.converged, 7, "solver did not converge");

    let stride = (cfg.keyframe_dt * scfg.encoder_rate).round() as usize;
    let mut max_pos: f64 = 0.0;
    let mut max_rot: f64 = 0.0;
    for (k, t) in problem.keyframe_times.iter().enumerate() {
        let node = problem.graph.node(k).unwrap();
        let tru = &truth.samples[k * stride];
        assert!((tru.t - t).abs() < 1e-9);
        max_pos = max_pos.max((node.pose.translation - tru.pose.translation).norm());
        max_rot = max_rot.max((tru.pose.rotation.inverse() * node.pose.rotation).angle());
    }
    let elapsed = start.elapsed().as_secs_f64();
    check(max_pos <= 1e-4, 7, &format!("max position error {max_pos:.2e} m"));
    check(max_rot <= 1e-5, 7, &format!("max rotation error {max_rot:.2e} rad"));
    check(elapsed < 60.0, 7, &format!("runtime {elapsed:.1}s"));
    pass(7, &format!(
        "noise-free 10 s walk: max position error {max_pos:.1e} m, rotation {max_rot:.1e} rad, {elapsed:.1}s"
    ));
}

#[test]
fn criterion_08_odometry_drift_ordering() {
    let mut beats_ic = 0;
    let mut beats_vi = 0;
    let mut pooled: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for seed in 0..10u64 {
        let scfg = noisy_walk(seed, 60.0);
        let (truth, records) = generate(&scfg).unwrap();
        let tru = truth_trajectory(&truth.to_records());
        let mut final_drift = BTreeMap::new();
        for set in [FactorSet::Vic, FactorSet::Ic, FactorSet::Vi] {
            let cfg = estimator_for(&scfg, set);
            let mut problem = build_problem(&records, &cfg).unwrap();
            let report = problem.solve(&cfg.lm).unwrap();
            check(report.converged, 8, &format!("seed {seed} {set:?} did not converge"));
            let est = problem.trajectory();
            let ate = absolute_trajectory_error(&est, &tru, cfg.keyframe_dt / 2.0).unwrap();
            final_drift.insert(set.label(), ate.errors.last().unwrap().1);
            let rpe = relative_position_error(&est, &tru, 1.0, cfg.keyframe_dt / 2.0).unwrap();
            pooled.entry(set.label()).or_default().extend(rpe.errors.iter().map(|(_, e)| *e));
        }
        if final_drift["vic"] < final_drift["ic"] {
            beats_ic += 1;
        }
        if final_drift["vic"] < final_drift["vi"] {
            beats_vi += 1;
        }
    }
    check(beats_ic >= 8, 8, &format!("VIC beat IC on only {beats_ic}/10 seeds"));
    check(beats_vi >= 8, 8, &format!("VIC beat VI on only {beats_vi}/10 seeds"));
    let med_vic = median(&pooled["vic"]);
    let med_ic = median(&pooled["ic"]);
    let med_vi = median(&pooled["vi"]);
    check(med_vic < med_ic, 8, &format!("median RPE: vic {med_vic:.4} !< ic {med_ic:.4}"));
    check(med_vic < med_vi, 8, &format!("median RPE: vic {med_vic:.4} !< vi {med_vi:.4}"));
    pass(8, &format!(
        "drift ordering VIC<IC on {beats_ic}/10, VIC<VI on {beats_vi}/10; median RPE vic {med_vic:.4} < ic {med_ic:.4}, vi {med_vi:.4}"
    ));
}

#[test]
fn criterion_09_vision_dropout_covariance() {
    // Tight kinematics and a noisy accelerometer stress the mechanism under
    // test: contact factors keep the pose covariance bounded when vision
    // disappears.
    let scfg = ScenarioConfig {
        duration: 60.0,
        sigma_alpha: 5e-3,
        sigma_contact_omega: 5e-3,
        sigma_contact_v: 5e-3,
        sigma_gyro: 8e-3,
        sigma_accel: 8e-2,
        sigma_relpose_rot: 5e-3,
        sigma_relpose_pos: 2e-2,
        seed: 1,
        ..ScenarioConfig::default()
    };
    let windows = [(15.0, 25.0), (35.0, 45.0)];
    let (_, records) = generate(&scfg).unwrap();
    let dropped = apply_dropout(&records, &windows);
    let mut curves: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
    for (name, set, recs) in [
        ("vic_nominal", FactorSet::Vic, &records),
        ("vic_dropout", FactorSet::Vic, &dropped),
        ("vi_nominal", FactorSet::Vi, &records),
        ("vi_dropout", FactorSet::Vi, &dropped),
    ] {
        let cfg = estimator_for(&scfg, set);
        let mut problem = build_problem(recs, &cfg).unwrap();
        let report = problem.solve(&cfg.lm).unwrap();
        check(report.converged, 9, &format!("{name} did not converge"));
        curves.insert(name, problem.pose_logdets().unwrap());
    }
    let max_increase = |nominal: &[(f64, f64)], dropout: &[(f64, f64)]| -> f64 {
        nominal
            .iter()
            .zip(dropout.iter())
            .filter(|((t, _), _)| windows.iter().any(|(a, b)| t >= a && t <= b))
            .map(|((_, ln), (_, ld))| ld - ln)
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let vic_inc = max_increase(&curves["vic_nominal"], &curves["vic_dropout"]);
    let vi_inc = max_increase(&curves["vi_nominal"], &curves["vi_dropout"]);
    let ratio = vi_inc / vic_inc.max(1e-9);
    check(
        ratio >= 5.0,
        9,
        &format!("log-det increase ratio VI/VIC = {ratio:.2} (vi {vi_inc:.2}, vic {vic_inc:.2})"),
    );
    pass(9, &format!(
        "dropout log-det increase: VI->I {vi_inc:.2}, VIC->IC {vic_inc:.2} (ratio {ratio:.1} >= 5)"
    ));
}

#[test]
fn criterion_10_terrain_factor_z_drift() {
    let mut rms_on = Vec::new();
    let mut rms_off = Vec::new();
    for seed in 0..10u64 {
        let scfg = noisy_walk(seed, 30.0);
        let (truth, records) = generate(&scfg).unwrap();
        let tru = truth_trajectory(&truth.to_records());
        for terrain in [false, true] {
            let mut cfg = estimator_for(&scfg, FactorSet::Vic);
            cfg.terrain = terrain;
            let mut problem = build_problem(&records, &cfg).unwrap();
            let report = problem.solve(&cfg.lm).unwrap();
            check(report.converged, 10, &format!("seed {seed} terrain={terrain} did not converge"));
            let est = problem.trajectory();
            let align = tru[0].pose * est[0].pose.inverse();
            let mut zsq = 0.0;
            for p in &est {
                let aligned = align * p.pose;
                let nearest = tru
                    .iter()
                    .min_by(|a, b| (a.t - p.t).abs().partial_cmp(&(b.t - p.t).abs()).unwrap())
                    .unwrap();
                zsq += (aligned.translation[2] - nearest.pose.translation[2]).powi(2);
            }
            let rms = (zsq / est.len() as f64).sqrt();
            if terrain {
                rms_on.push(rms);
            } else {
                rms_off.push(rms);
            }
        }
    }
    let mean_on = rms_on.iter().sum::<f64>() / rms_on.len() as f64;
    let mean_off = rms_off.iter().sum::<f64>() / rms_off.len() as f64;
    check(
        mean_on <= 0.5 * mean_off,
        10,
        &format!("terrain z-RMS {mean_on:.4} m vs {mean_off:.4} m without (need <= 0.5x)"),
    );
    pass(10, &format!(
        "10 seeds: z-RMS {mean_on:.4} m with terrain factors vs {mean_off:.4} m without ({:.2}x)",
        mean_on / mean_off
    ));
}

#[test]
fn criterion_11_jacobian_richardson_health() {
    let robot = std::sync::Arc::new(RobotModel::demo_biped());
    let mut rng = StdRng::seed_from_u64(1111);
    let mut checked_per_kind: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for _ in 0..100 {
        let alpha = walk_alpha(&mut rng);
        let reading = EncoderReading::isotropic(0.0, alpha, 1e-3);
        let samples: Vec<ImuSample> = (0..50)
            .map(|k| ImuSample {
                t: k as f64 / 200.0,
                omega: Vector3::from_fn(|_, _| rng.random_range(-0.5..0.5)),
                accel: Vector3::new(0.0, 0.0, 9.81) + Vector3::from_fn(|_, _| rng.random_range(-0.5..0.5)),
            })
            .collect();
        let mut preint = strider_core::contact::PreintegratedContact::new(0);
        preint.stance_step(0.25, &ContactNoiseModel::default()).unwrap();

        let factors: Vec<Factor> = vec![
            prior_factor(random_node(0, &mut rng), nalgebra::DMatrix::identity(21, 21) * 1e-2).unwrap(),
            relpose_factor(0, 1, random_pose(&mut rng), Matrix6::identity()).unwrap(),
            imu_factor(0, 1, samples, 0.25, &ImuNoise::default(), GRAVITY, &ImuBias::zero()).unwrap(),
            bias_walk_factor(0, 1, Matrix6::identity() * 1e-6).unwrap(),
            fk_factor(0, robot.clone(), reading, ContactFrame::Left).unwrap(),
            contact_factor(0, 1, preint).unwrap(),
            terrain_factor(0, 0.0, 1e-2).unwrap(),
        ];
        for f in &factors {
            let n0 = random_node(0, &mut rng);
            let n1 = random_node(1, &mut rng);
            let nodes: Vec<&StateNode> = f.keys.iter().map(|k| if *k == 0 { &n0 } else { &n1 }).collect();
            let jacs = numerical_factor_jacobian(f, &nodes, 1e-6).unwrap();
            let r0 = f.evaluate(&nodes).unwrap();
            let dirs: Vec<Vec<f64>> = nodes
                .iter()
                .map(|n| (0..n.tangent_dim()).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            let lin_err = |scale: f64| {
                let perturbed: Vec<StateNode> = nodes
                    .iter()
                    .zip(&dirs)
                    .map(|(n, d)| {
                        let dx: Vec<f64> = d.iter().map(|v| v * scale).collect();
                        n.retracted(&dx)
                    })
                    .collect();
                let refs: Vec<&StateNode> = perturbed.iter().collect();
                let r = f.evaluate(&refs).unwrap();
                let mut predicted = r0.clone();
                for (jac, d) in jacs.iter().zip(&dirs) {
                    let dv = nalgebra::DVector::from_vec(d.iter().map(|v| v * scale).collect());
                    predicted += jac * dv;
                }
                (r - predicted).norm()
            };
            let e1 = lin_err(1e-3);
            let e2 = lin_err(5e-4);
            let entry = checked_per_kind.entry(format!("{:?}", f.kind)).or_insert((0usize, 0usize));
            if e1 > 1e-11 {
                let ratio = e1 / e2;
                check(
                    ratio >= 3.5,
                    11,
                    &format!("{:?}: Richardson ratio {ratio:.2} (e1 {e1:.2e}, e2 {e2:.2e})", f.kind),
                );
                entry.0 += 1;
            } else {
                // Exactly linear residuals (bias walk) have no measurable
                // linearization error; machine-precision agreement passes.
                entry.1 += 1;
            }
        }
    }
    check(checked_per_kind.len() == 7, 11, &format!("expected 7 factor kinds, saw {}", checked_per_kind.len()));
    for (kind, (ratio_checked, exact)) in &checked_per_kind {
        check(
            *ratio_checked >= 30 || *exact >= 30,
            11,
            &format!("{kind}: only {ratio_checked} measurable + {exact} exact points"),
        );
    }
    pass(11, "all 7 factor kinds pass the first-order decay (or exactness) check at 100 points");
}

fn random_pose(rng: &mut StdRng) -> Pose {
    se3_exp(&Twist::new(
        Vector3::from_fn(|_, _| rng.random_range(-0.3..0.3)),
        Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)),
    ))
}

fn random_node(key: usize, rng: &mut StdRng) -> StateNode {
    StateNode::new(
        key,
        key as f64 * 0.25,
        random_pose(rng),
        Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)),
        Some(random_pose(rng)),
        ImuBias::zero(),
    )
}

#[test]
fn criterion_12_cli_determinism() {
    let bin = env!("CARGO_BIN_EXE_strider");
    let dir = std::env::temp_dir().join(format!("strider-acceptance-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let cfg_path = dir.join("scenario.cfg");
    std::fs::write(
        &cfg_path,
        "duration = 2.0\nencoder_rate = 200\nimu_rate = 200\n\
         sigma_alpha = 0.002\nsigma_gyro = 0.001\nsigma_accel = 0.01\n\
         sigma_relpose_rot = 0.002\nsigma_relpose_pos = 0.002\nseed = 5\n",
    )
    .unwrap();
    let run = |args: &[&str]| {
        let out = std::process::Command::new(bin).args(args).output().unwrap();
        assert!(
            out.status.success(),
            "[FAIL] criterion 12: {:?} exited {:?}: {}",
            args,
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        );
    };
    let d1 = dir.join("a.jsonl");
    let d2 = dir.join("b.jsonl");
    run(&["simulate", "--config", cfg_path.to_str().unwrap(), "--out", d1.to_str().unwrap()]);
    run(&["simulate", "--config", cfg_path.to_str().unwrap(), "--out", d2.to_str().unwrap()]);
    check(
        std::fs::read(&d1).unwrap() == std::fs::read(&d2).unwrap(),
        12,
        "simulate outputs differ between identical runs",
    );
    check(
        std::fs::read(dir.join("a.truth.jsonl")).unwrap() == std::fs::read(dir.join("b.truth.jsonl")).unwrap(),
        12,
        "truth outputs differ between identical runs",
    );
    let e1 = dir.join("est1");
    let e2 = dir.join("est2");
    for e in [&e1, &e2] {
        run(&[
            "estimate",
            "--dataset", d1.to_str().unwrap(),
            "--factors", "vic",
            "--out", e.to_str().unwrap(),
        ]);
    }
    for file in ["trajectory.csv", "logdet.csv"] {
        check(
            std::fs::read(e1.join(file)).unwrap() == std::fs::read(e2.join(file)).unwrap(),
            12,
            &format!("estimate output {file} differs between identical runs"),
        );
    }
    pass(12, "simulate and estimate are byte-deterministic across repeated runs");
}
