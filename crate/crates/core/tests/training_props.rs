use chebyodo::data::{make_windows, synthesize, Gait, GravityPolicy, PathShape, SynthSpec, WindowBatch};
use chebyodo::nn::Module;
use chebyodo::tensor::Tape;
use chebyodo::training::{
    evaluate_mse, load_checkpoint, mse_loss, mse_loss_values, save_checkpoint, train, Adam, Checkpoint,
    ModelConfig, ResKacNet,
};
use chebyodo::{Error, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const RATE: f64 = 50.0;
const W: usize = 50;

fn tiny(window: usize) -> ModelConfig {
    let mut cfg = ModelConfig::compact(window);
    cfg.backbone.stage_channels = [4, 8, 8, 8];
    cfg.head_widths = [16, 8, 2];
    cfg
}

/// Straight walks at constant speed and heading with a periodic gait.
fn straight_walks(seed: u64, count: usize, stride: usize) -> WindowBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batches: Vec<_> = (0..count)
        .map(|i| {
            let mut spec = SynthSpec::new(PathShape::Line, rng.random_range(0.6..1.6), 8.0, RATE);
            spec.heading = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            spec.gait = Gait { surge: 1.0, bounce: 1.5 };
            spec.include_gravity = false;
            spec.seed = seed * 100 + i as u64;
            make_windows(&synthesize(&spec).unwrap(), W, stride, GravityPolicy::RequireRemoved).unwrap()
        })
        .collect();
    WindowBatch::concat(&batches).unwrap()
}

#[test]
fn mse_matches_scalar_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pred: Vec<[f64; 2]> = (0..37).map(|_| [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)]).collect();
    let target: Vec<[f64; 2]> = (0..37).map(|_| [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)]).collect();
    let mut s = 0.0;
    for i in 0..37 {
        for c in 0..2 {
            s += (pred[i][c] - target[i][c]).powi(2);
        }
    }
    let want = s / 74.0;
    assert!((mse_loss_values(&pred, &target).unwrap() - want).abs() < 1e-12);

    let mut tape = Tape::no_grad();
    let p = tape.constant(&Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap());
    let t = tape.constant(&Tensor::zeros(&[1, 2]));
    let l = mse_loss(&mut tape, p, t).unwrap();
    assert_eq!(tape.value(l)[0], 0.5);
}

fn batch_loss_and_grads(model: &ResKacNet, data: &WindowBatch, idx: &[usize]) -> (f64, Vec<Vec<f64>>) {
    let mut total = 0.0;
    let mut grads: Vec<Vec<f64>> = Vec::new();
    for &i in idx {
        let mut tape = Tape::new();
        let x = tape.constant(&data.input(i));
        let pred = model.forward(&mut tape, x).unwrap();
        let t = tape.constant(&Tensor::new(&[1, 2], data.target(i).to_vec()).unwrap());
        let loss = mse_loss(&mut tape, pred, t).unwrap();
        let scaled = tape.scale(loss, 1.0 / idx.len() as f64).unwrap();
        total += tape.value(scaled)[0];
        tape.backward(scaled).unwrap();
        let mut k = 0;
        model.visit("", &mut |_, p| {
            let g = tape.param_grad(p).map_or_else(|| vec![0.0; p.numel()], <[f64]>::to_vec);
            match grads.get_mut(k) {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => grads.push(g),
            }
            k += 1;
        });
    }
    (total, grads)
}

#[test]
fn small_steps_do_not_increase_fixed_batch_loss() {
    let data = straight_walks(7, 2, 10);
    let mut model = ResKacNet::new(ModelConfig { learning_rate: 1e-4, ..tiny(W) }).unwrap();
    let mut adam = Adam::new(1e-4, 0.9, 0.999, 1e-8);
    let idx: Vec<usize> = (0..8).collect();
    let mut losses = Vec::new();
    for _ in 0..6 {
        let (loss, grads) = batch_loss_and_grads(&model, &data, &idx);
        losses.push(loss);
        adam.step(&mut model, &grads).unwrap();
    }
    for w in losses.windows(2) {
        assert!(w[1] <= w[0], "{losses:?}");
    }
}

#[test]
fn learns_constant_velocity_walks() {
    let (tr, va) = (straight_walks(1, 48, 10), straight_walks(2, 12, 10));
    let mut cfg = tiny(W);
    cfg.epochs = 30;
    cfg.batch_size = 16;
    let zero: f64 = (0..va.len()).map(|i| {
        let t = va.target(i);
        (t[0] * t[0] + t[1] * t[1]) / 2.0
    }).sum::<f64>() / va.len() as f64;
    let outcome = train(&cfg, &tr, &va).unwrap();
    let val = evaluate_mse(&outcome.model, &va, 1).unwrap();
    assert!(val < 0.1 * zero, "val {val} vs zero predictor {zero}");
    assert_eq!(val, outcome.history[outcome.best_epoch - 1].val_mse);
}

#[test]
fn checkpoint_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let model = ResKacNet::new(tiny(W)).unwrap();
    let ckpt = Checkpoint::from_model(&model);
    let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    save_checkpoint(&ckpt, &a).unwrap();
    let loaded = load_checkpoint(&a).unwrap();
    save_checkpoint(&loaded, &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let bytes = std::fs::read(&a).unwrap();
    std::fs::write(&b, &bytes[..bytes.len() - 9]).unwrap();
    assert!(matches!(load_checkpoint(&b), Err(Error::Format(_))));
    let mut bad = bytes.clone();
    bad[8] = 2;
    std::fs::write(&b, &bad).unwrap();
    assert!(matches!(load_checkpoint(&b), Err(Error::Format(_))));
}
