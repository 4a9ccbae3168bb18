//! Scores a noisy velocity track against ground truth and writes a report bundle.

use chebyodo::data::{synthesize, PathShape, SynthSpec};
use chebyodo::eval::{evaluate_predictions, zero_velocity_report, EvalConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn main() -> chebyodo::Result<()> {
    let mut spec = SynthSpec::new(PathShape::Circle { radius: 5.0, clockwise: false }, 1.2, 90.0, 100.0);
    spec.include_gravity = false;
    let seq = synthesize(&spec)?;
    let cfg = EvalConfig::new(100, 10);

    // Ground-truth window velocities with a little noise stand in for a model.
    let noise = Normal::new(0.0, 0.05).expect("valid std");
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = chebyodo::data::window_count(seq.len(), cfg.window_size, cfg.stride);
    let span = (cfg.window_size - 1) as f64 / seq.sample_rate_hz;
    let velocities: Vec<[f64; 2]> = (0..n)
        .map(|k| {
            let (a, b) = (seq.gt_pos[k * cfg.stride], seq.gt_pos[k * cfg.stride + cfg.window_size - 1]);
            [
                (b[0] - a[0]) / span + noise.sample(&mut rng),
                (b[1] - a[1]) / span + noise.sample(&mut rng),
            ]
        })
        .collect();
    let report = evaluate_predictions(&seq, &velocities, &cfg)?;
    let zero = zero_velocity_report(&seq, &cfg)?;
    println!("noisy truth: ATE {:.3} m, RTE {:.3} m, PDE {:.4}", report.ate, report.rte.value, report.pde);
    println!("zero velocity: ATE {:.3} m", zero.ate);
    let dir = std::env::temp_dir().join("chebyodo_report");
    report.write_bundle(&dir)?;
    println!("bundle written to {}", dir.display());
    Ok(())
}
