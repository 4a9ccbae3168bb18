use chebyodo::data::{
    make_windows, read_sequence, remove_gravity, restore_gravity, rotate_to_world, stationary, synthesize,
    write_sequence, Gait, GravityPolicy, ImuNoise, ImuSequence, PathShape, SynthSpec, GRAVITY,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn norm(v: [f64; 3]) -> f64 {
    v.iter().map(|c| c * c).sum::<f64>().sqrt()
}

/// Rotation matrix of a unit quaternion `(w, x, y, z)`.
fn quat_matrix(q: [f64; 4]) -> [[f64; 3]; 3] {
    let [w, x, y, z] = q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

fn random_sequence(seed: u64, n: usize) -> ImuSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v3 = |rng: &mut ChaCha8Rng, s: f64| [0, 1, 2].map(|_| rng.random_range(-s..s));
    let rate = 100.0;
    let mut seq = ImuSequence {
        sample_rate_hz: rate,
        t: (0..n).map(|i| i as f64 / rate).collect(),
        gyro: Vec::new(),
        accel: Vec::new(),
        orientation: Vec::new(),
        gt_pos: Vec::new(),
        gravity_removed: false,
    };
    for _ in 0..n {
        seq.gyro.push(v3(&mut rng, 3.0));
        seq.accel.push(v3(&mut rng, 20.0));
        seq.gt_pos.push(v3(&mut rng, 50.0));
        let q: [f64; 4] = [0, 1, 2, 3].map(|_| rng.random_range(-1.0..1.0));
        let s = q.iter().map(|c| c * c).sum::<f64>().sqrt();
        seq.orientation.push(q.map(|c| c / s));
    }
    seq
}

#[test]
fn world_rotation_matches_matrix_and_keeps_norms() {
    let seq = random_sequence(1, 500);
    let world = rotate_to_world(&seq);
    for i in 0..seq.len() {
        let m = quat_matrix(seq.orientation[i]);
        for (body, out) in [(seq.accel[i], world.accel[i]), (seq.gyro[i], world.gyro[i])] {
            assert!((norm(out) - norm(body)).abs() < 1e-12);
            for r in 0..3 {
                let want: f64 = (0..3).map(|c| m[r][c] * body[c]).sum();
                assert!((out[r] - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn gravity_removal_is_reversible() {
    let seq = random_sequence(2, 300);
    let back = restore_gravity(&remove_gravity(&seq, GRAVITY).unwrap(), GRAVITY).unwrap();
    assert!(!back.gravity_removed);
    for (a, b) in seq.accel.iter().zip(&back.accel) {
        for k in 0..3 {
            assert!((a[k] - b[k]).abs() < 1e-12);
        }
    }
}

#[test]
fn upside_down_device_reads_zero_after_removal() {
    let mut seq = stationary(2.0, 100.0, ImuNoise::default(), 0).unwrap();
    for (a, q) in seq.accel.iter_mut().zip(&mut seq.orientation) {
        *a = [0.0, 0.0, -GRAVITY];
        *q = [0.0, 1.0, 0.0, 0.0];
    }
    let out = rotate_to_world(&remove_gravity(&seq, GRAVITY).unwrap());
    assert!(out.accel.iter().all(|a| norm(*a) < 1e-12));
}

fn targets(seq: &ImuSequence, w: usize, stride: usize) -> Vec<[f64; 2]> {
    let b = make_windows(seq, w, stride, GravityPolicy::AllowGravity).unwrap();
    (0..b.len()).map(|i| b.target(i)).collect()
}

#[test]
fn window_targets_are_resampled_ground_truth_differences() {
    let seq = random_sequence(3, 257);
    let (w, stride) = (40, 7);
    let got = targets(&seq, w, stride);
    assert_eq!(got.len(), (257 - w) / stride + 1);
    let span = (w - 1) as f64 / seq.sample_rate_hz;
    for (k, t) in got.iter().enumerate() {
        let (a, b) = (seq.gt_pos[k * stride], seq.gt_pos[k * stride + w - 1]);
        assert_eq!(*t, [(b[0] - a[0]) / span, (b[1] - a[1]) / span]);
    }
    let no_overlap = targets(&seq, w, w);
    assert_eq!(no_overlap.len(), (257 - w) / w + 1);
}

#[test]
fn constant_velocity_targets() {
    let seq = synthesize(&SynthSpec::new(PathShape::Line, 1.0, 10.0, 100.0)).unwrap();
    for t in targets(&seq, 100, 10) {
        assert!((t[0] - 1.0).abs() < 1e-12 && t[1].abs() < 1e-12);
    }
}

#[test]
fn circle_targets_match_chord_average_velocity() {
    let (r, v, rate, w) = (5.0, 1.3, 200.0, 200);
    for clockwise in [false, true] {
        let mut spec = SynthSpec::new(PathShape::Circle { radius: r, clockwise }, v, 30.0, rate);
        spec.heading = 0.4;
        let seq = synthesize(&spec).unwrap();
        let omega = if clockwise { -v / r } else { v / r };
        let span = (w - 1) as f64 / rate;
        let chord_speed = 2.0 * r * (v * span / (2.0 * r)).sin() / span;
        for (k, t) in targets(&seq, w, 37).iter().enumerate() {
            let mid = (k * 37) as f64 / rate + span / 2.0;
            let dir = 0.4 + omega * mid;
            assert!((t[0] - chord_speed * dir.cos()).abs() < 1e-6);
            assert!((t[1] - chord_speed * dir.sin()).abs() < 1e-6);
        }
    }
}

#[test]
fn double_integration_reproduces_ground_truth() {
    let shapes = [PathShape::Circle { radius: 4.0, clockwise: false }, PathShape::Lissajous { a: 10.0, b: 4.0 }];
    let gaits = [(Gait::default(), 200.0), (Gait { surge: 1.0, bounce: 1.5 }, 400.0)];
    for ((gait, rate), shape) in gaits.into_iter().flat_map(|g| shapes.map(|s| (g, s))) {
        let mut spec = SynthSpec::new(shape, 1.1, 60.0, rate);
        spec.gait = gait;
        spec.heading = -1.2;
        let seq = synthesize(&spec).unwrap();
        let acc = rotate_to_world(&seq).accel;
        let dt = 1.0 / rate;
        let mut vel = spec.kinematics(0.0).vel;
        let mut pos = seq.gt_pos[0];
        let mut worst: f64 = 0.0;
        for i in 1..seq.len() {
            for k in 0..3 {
                let dv = 0.5 * (acc[i - 1][k] + acc[i][k]) * dt;
                pos[k] += (vel[k] + 0.5 * dv) * dt;
                vel[k] += dv;
            }
            let e = [0, 1, 2].map(|k| pos[k] - seq.gt_pos[i][k]);
            worst = worst.max(norm(e));
        }
        assert!(worst < 1e-3, "{} at {rate} Hz: {worst}", shape.name());
    }
}

#[test]
fn circle_accel_after_removal_is_centripetal() {
    let (r, v, rate) = (3.0, 1.5, 200.0);
    let mut spec = SynthSpec::new(PathShape::Circle { radius: r, clockwise: true }, v, 20.0, rate);
    spec.include_gravity = true;
    spec.noise = ImuNoise { gyro_density: 1e-3, accel_density: 4e-3 };
    spec.seed = 9;
    let seq = synthesize(&spec).unwrap();
    let world = rotate_to_world(&remove_gravity(&seq, GRAVITY).unwrap()).accel;
    let bound = 5.0 * 4e-3 * rate.sqrt() * 3f64.sqrt();
    let centre = {
        let k = spec.kinematics(0.0);
        let a = norm(k.acc);
        [k.pos[0] + k.acc[0] / a * r, k.pos[1] + k.acc[1] / a * r]
    };
    for (a, p) in world.iter().zip(&seq.gt_pos) {
        let inward = [centre[0] - p[0], centre[1] - p[1]];
        let d = inward[0].hypot(inward[1]);
        let want = [v * v / r * inward[0] / d, v * v / r * inward[1] / d, 0.0];
        assert!(norm([a[0] - want[0], a[1] - want[1], a[2] - want[2]]) < bound);
    }
}

#[test]
fn stationary_gravity_dominates_vertical_axis() {
    let noise = ImuNoise { gyro_density: 1e-3, accel_density: 4e-3 };
    let seq = stationary(60.0, 200.0, noise, 4).unwrap();
    let mean = |k: usize| seq.accel.iter().map(|a| a[k].abs()).sum::<f64>() / seq.len() as f64;
    assert!(mean(2) >= 10.0 * mean(0).max(mean(1)));
}

#[test]
fn files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("walk.imu.csv");
    let mut spec = SynthSpec::new(PathShape::Lissajous { a: 8.0, b: 3.0 }, 1.0, 5.0, 100.0);
    spec.noise = ImuNoise { gyro_density: 1e-3, accel_density: 4e-3 };
    spec.include_gravity = true;
    let seq = synthesize(&spec).unwrap();
    write_sequence(&seq, &path).unwrap();
    let back = read_sequence(&path).unwrap();
    assert_eq!(back.gravity_removed, seq.gravity_removed);
    let close = |a: &[[f64; 3]], b: &[[f64; 3]]| a.iter().zip(b).all(|(x, y)| (0..3).all(|k| (x[k] - y[k]).abs() < 1e-9));
    assert!(close(&seq.accel, &back.accel) && close(&seq.gyro, &back.gyro) && close(&seq.gt_pos, &back.gt_pos));
    assert!(seq.t.iter().zip(&back.t).all(|(a, b)| (a - b).abs() < 1e-9));
}

proptest! {
    #[test]
    fn synthetic_sequences_satisfy_invariants(
        seed in any::<u64>(),
        kind in 0usize..3,
        speed in 0.5f64..2.0,
        heading in -3.0f64..3.0,
    ) {
        let shape = match kind {
            0 => PathShape::Line,
            1 => PathShape::Circle { radius: 4.0, clockwise: seed % 2 == 0 },
            _ => PathShape::Lissajous { a: 9.0, b: 4.0 },
        };
        let mut spec = SynthSpec::new(shape, speed, 4.0, 50.0);
        spec.heading = heading;
        spec.seed = seed;
        spec.gait = Gait { surge: 0.5, bounce: 1.0 };
        let seq = synthesize(&spec).unwrap();
        prop_assert!(seq.validate().is_ok());
        let world = rotate_to_world(&seq);
        for (b, w) in seq.accel.iter().zip(&world.accel) {
            prop_assert!((norm(*b) - norm(*w)).abs() < 1e-12);
        }
    }
}
