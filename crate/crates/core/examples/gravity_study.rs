//! Stationary axis magnitudes, then the same training run on data with and
//! without gravity.
//!
//! `cargo run --release --example gravity_study -- [epochs]`

use chebyodo::data::{
    make_windows, remove_gravity, stationary, suite_specs, synthesize, to_world_frame, GravityPolicy,
    ImuNoise, ImuSequence, SuiteConfig, WindowBatch, GRAVITY,
};
use chebyodo::eval::{evaluate_sequence, EvalConfig};
use chebyodo::training::{train, worker_threads, ModelConfig};

const RATE: f64 = 50.0;
const W: usize = 50;

fn mean_abs(seq: &ImuSequence) -> [f64; 3] {
    let mut m = [0.0; 3];
    for a in &seq.accel {
        for k in 0..3 {
            m[k] += a[k].abs() / seq.len() as f64;
        }
    }
    m
}

fn suite(seed: u64, strip: bool) -> chebyodo::Result<Vec<ImuSequence>> {
    let cfg = SuiteConfig { lines: 2, circles: 2, lissajous: 1, duration: 60.0, sample_rate_hz: RATE, seed, ..SuiteConfig::default() };
    suite_specs(&cfg)
        .iter()
        .map(|s| {
            let world = to_world_frame(&synthesize(s)?);
            if strip { remove_gravity(&world, GRAVITY) } else { Ok(world) }
        })
        .collect()
}

fn windows(seqs: &[ImuSequence], stride: usize) -> chebyodo::Result<WindowBatch> {
    let b = seqs
        .iter()
        .map(|s| make_windows(s, W, stride, GravityPolicy::AllowGravity))
        .collect::<chebyodo::Result<Vec<_>>>()?;
    WindowBatch::concat(&b)
}

fn main() -> chebyodo::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(6);
    let still = stationary(30.0, 200.0, ImuNoise { gyro_density: 1e-3, accel_density: 4e-3 }, 0)?;
    let [x, y, z] = mean_abs(&still);
    println!("stationary mean |accel|: x {x:.4}, y {y:.4}, z {z:.4}");

    for strip in [false, true] {
        let (tr, va, te) = (suite(1, strip)?, suite(2, strip)?, suite(3, strip)?);
        let mut cfg = ModelConfig::compact(W);
        cfg.epochs = epochs;
        cfg.batch_size = 16;
        let outcome = train(&cfg, &windows(&tr, 10)?, &windows(&va, W)?)?;
        let eval_cfg = EvalConfig { gravity: GravityPolicy::AllowGravity, ..EvalConfig::new(W, 5) };
        let mut ate = 0.0;
        for seq in &te {
            ate += evaluate_sequence(&outcome.model, seq, &eval_cfg, worker_threads())?.ate;
        }
        let label = if strip { "gravity removed" } else { "gravity included" };
        println!("{label}: held-out mean ATE {:.3} m", ate / te.len() as f64);
    }
    Ok(())
}
