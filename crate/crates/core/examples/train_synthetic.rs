//! Trains a compact network on synthetic walks, compares it with a
//! zero-velocity baseline on held-out walks and round-trips the checkpoint.
//!
//! `cargo run --release --example train_synthetic -- [epochs]`

use chebyodo::data::{make_windows, suite_specs, synthesize, GravityPolicy, ImuSequence, SuiteConfig, WindowBatch};
use chebyodo::eval::{evaluate_sequence, zero_velocity_report, EvalConfig};
use chebyodo::nn::Module;
use chebyodo::training::{train, worker_threads, Checkpoint, ModelConfig};

const RATE: f64 = 50.0;
const W: usize = 50;

fn suite(seed: u64) -> chebyodo::Result<Vec<ImuSequence>> {
    let cfg = SuiteConfig {
        lines: 2,
        circles: 2,
        lissajous: 1,
        duration: 60.0,
        sample_rate_hz: RATE,
        include_gravity: false,
        seed,
        ..SuiteConfig::default()
    };
    suite_specs(&cfg).iter().map(synthesize).collect()
}

fn windows(seqs: &[ImuSequence], stride: usize) -> chebyodo::Result<WindowBatch> {
    let batches = seqs
        .iter()
        .map(|s| make_windows(s, W, stride, GravityPolicy::RequireRemoved))
        .collect::<chebyodo::Result<Vec<_>>>()?;
    WindowBatch::concat(&batches)
}

fn main() -> chebyodo::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let epochs = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(6);
    let (tr, va, te) = (suite(1)?, suite(2)?, suite(3)?);
    let mut cfg = ModelConfig::compact(W);
    cfg.epochs = epochs;
    cfg.batch_size = 16;

    let outcome = train(&cfg, &windows(&tr, 10)?, &windows(&va, W)?)?;
    println!("{} parameters, best epoch {}", outcome.model.param_count(), outcome.best_epoch);

    let eval_cfg = EvalConfig::new(W, 5);
    let (mut ate, mut zero) = (0.0, 0.0);
    for seq in &te {
        ate += evaluate_sequence(&outcome.model, seq, &eval_cfg, worker_threads())?.ate;
        zero += zero_velocity_report(seq, &eval_cfg)?.ate;
    }
    let n = te.len() as f64;
    println!("held-out mean ATE {:.3} m, zero-velocity {:.3} m", ate / n, zero / n);

    let restored = Checkpoint::from_bytes(&outcome.checkpoint.to_bytes())?.to_model()?;
    let probe = windows(&te[..1], W)?.input(0);
    println!(
        "checkpoint round trip identical: {}",
        restored.predict(&probe)? == outcome.model.predict(&probe)?
    );
    Ok(())
}
