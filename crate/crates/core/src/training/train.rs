use std::io::Write;
use std::thread;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{mse_loss, mse_loss_values, Adam, Checkpoint, ModelConfig, ResKacNet};
use crate::data::WindowBatch;
use crate::error::{Error, Result};
use crate::nn::Module;
use crate::tensor::{Tape, Tensor};

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "CHEBYODO_THREADS";

/// Worker count from `CHEBYODO_THREADS`, else the machine's parallelism.
pub fn worker_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| thread::available_parallelism().map_or(1, |n| n.get()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
    pub wall_s: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation MSE.
    pub model: ResKacNet,
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainOutcome {
    pub fn write_log(&self, out: &mut impl Write) -> Result<()> {
        writeln!(out, "epoch,train_mse,val_mse,wall_s")?;
        for m in &self.history {
            writeln!(out, "{},{:?},{:?},{:.3}", m.epoch, m.train_mse, m.val_mse, m.wall_s)?;
        }
        Ok(())
    }
}

/// Trains a freshly initialized model with Adam on mean squared error and
/// keeps the parameters that score best on `val`.
///
/// Gradients of a minibatch are summed in sample order whatever the thread
/// count, so runs with the same seed are reproducible.
pub fn train(config: &ModelConfig, train: &WindowBatch, val: &WindowBatch) -> Result<TrainOutcome> {
    let mut config = config.clone();
    config.sync_eksa_dims();
    config.validate()?;
    for (name, data) in [("training", train), ("validation", val)] {
        if data.is_empty() {
            return Err(Error::contract(format!("{name} set is empty")));
        }
        if data.window_size != config.window_size {
            return Err(Error::contract(format!(
                "{name} windows have {} samples, model expects {}",
                data.window_size, config.window_size
            )));
        }
    }
    let threads = worker_threads();
    let mut model = ResKacNet::new(config.clone())?;
    let mut adam = Adam::new(config.learning_rate, config.beta1, config.beta2, config.epsilon);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5eed));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let started = Instant::now();

    let mut best = (f64::INFINITY, model.clone(), 0);
    let mut history = Vec::new();
    let mut since_best = 0;
    let mut stopped_early = false;
    log::info!(
        "training {} parameters on {} windows ({} validation), {threads} thread(s)",
        model.param_count(),
        train.len(),
        val.len()
    );
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (step, idx) in order.chunks(config.batch_size).enumerate() {
            let (loss, grads) = batch_gradients(&model, train, idx, threads)
                .map_err(|e| diagnose(&model, e, epoch, step))?;
            if !loss.is_finite() {
                return Err(diagnose(
                    &model,
                    Error::Numerical(format!("loss is {loss}")),
                    epoch,
                    step,
                ));
            }
            loss_sum += loss * idx.len() as f64;
            adam.step(&mut model, &grads)?;
        }
        let train_mse = loss_sum / train.len() as f64;
        let val_mse = evaluate_mse(&model, val, threads)?;
        let metrics = EpochMetrics {
            epoch,
            train_mse,
            val_mse,
            wall_s: started.elapsed().as_secs_f64(),
        };
        log::info!("epoch {epoch}: train {train_mse:.5} val {val_mse:.5}");
        history.push(metrics);
        if val_mse < best.0 {
            best = (val_mse, model.clone(), epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if config.patience > 0 && since_best >= config.patience {
                stopped_early = true;
                break;
            }
        }
    }
    let (_, model, best_epoch) = best;
    Ok(TrainOutcome {
        checkpoint: Checkpoint::from_model(&model),
        model,
        history,
        best_epoch,
        stopped_early,
    })
}

/// Mean squared error of the model over a batch.
pub fn evaluate_mse(model: &ResKacNet, data: &WindowBatch, threads: usize) -> Result<f64> {
    let pred = predict_batch(model, data, threads)?;
    let target: Vec<[f64; 2]> = (0..data.len()).map(|i| data.target(i)).collect();
    mse_loss_values(&pred, &target)
}

/// Predicted velocity for every window, in order.
pub fn predict_batch(model: &ResKacNet, data: &WindowBatch, threads: usize) -> Result<Vec<[f64; 2]>> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let per_thread = idx.len().div_ceil(threads.max(1)).max(1);
    thread::scope(|s| {
        let handles: Vec<_> = idx
            .chunks(per_thread)
            .map(|chunk| {
                s.spawn(move || {
                    chunk
                        .iter()
                        .map(|&i| model.predict(&data.input(i)))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        let mut out = Vec::with_capacity(data.len());
        for h in handles {
            out.extend(h.join().expect("prediction worker panicked")?);
        }
        Ok(out)
    })
}

/// Loss and parameter gradients of one sample, gradients in visit order.
fn sample_gradients(model: &ResKacNet, data: &WindowBatch, i: usize, scale: f64) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let x = tape.constant(&data.input(i));
    let pred = model.forward(&mut tape, x)?;
    let t = data.target(i);
    let target = tape.constant(&Tensor::new(&[1, 2], t.to_vec())?);
    let loss = mse_loss(&mut tape, pred, target)?;
    let value = tape.value(loss)[0];
    let scaled = tape.scale(loss, scale)?;
    tape.backward(scaled)?;
    let mut grads = Vec::new();
    model.visit("", &mut |_, p| {
        grads.push(
            tape.param_grad(p)
                .map_or_else(|| vec![0.0; p.numel()], |g| g.to_vec()),
        )
    });
    Ok((value, grads))
}

/// Mean loss over `idx` and the gradient of that mean.
fn batch_gradients(
    model: &ResKacNet,
    data: &WindowBatch,
    idx: &[usize],
    threads: usize,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let scale = 1.0 / idx.len() as f64;
    let mut loss = 0.0;
    let mut total: Option<Vec<Vec<f64>>> = None;
    for group in idx.chunks(threads.max(1)) {
        let results: Vec<Result<(f64, Vec<Vec<f64>>)>> = if group.len() == 1 {
            vec![sample_gradients(model, data, group[0], scale)]
        } else {
            thread::scope(|s| {
                let handles: Vec<_> = group
                    .iter()
                    .map(|&i| s.spawn(move || sample_gradients(model, data, i, scale)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("gradient worker panicked"))
                    .collect()
            })
        };
        for r in results {
            let (l, g) = r?;
            loss += l * scale;
            match &mut total {
                None => total = Some(g),
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&g) {
                        for (x, y) in a.iter_mut().zip(b) {
                            *x += y;
                        }
                    }
                }
            }
        }
    }
    Ok((loss, total.unwrap_or_default()))
}

/// Names the first parameter holding a non-finite value, if any.
fn diagnose(model: &ResKacNet, err: Error, epoch: usize, step: usize) -> Error {
    let Error::Numerical(msg) = err else {
        return err;
    };
    let mut culprit = None;
    model.visit("", &mut |name, t| {
        if culprit.is_none() && !t.is_finite() {
            culprit = Some(name.to_string());
        }
    });
    let culprit = culprit.unwrap_or_else(|| "none (all parameters finite)".into());
    Error::Numerical(format!(
        "{msg} at epoch {epoch}, step {step}; first non-finite parameter: {culprit}"
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_windows, synthesize, Gait, GravityPolicy, PathShape, SynthSpec};

    fn tiny_config() -> ModelConfig {
        let mut cfg = ModelConfig::compact(40);
        cfg.backbone.stage_channels = [4, 4, 8, 8];
        cfg.head_widths = [8, 8, 2];
        cfg.batch_size = 8;
        cfg.epochs = 3;
        cfg
    }

    fn windows(seed: u64) -> WindowBatch {
        let mut spec = SynthSpec::new(PathShape::Circle { radius: 3.0, clockwise: false }, 1.0, 6.0, 40.0);
        spec.gait = Gait { surge: 1.0, bounce: 1.0 };
        spec.seed = seed;
        let seq = synthesize(&spec).unwrap();
        make_windows(&seq, 40, 8, GravityPolicy::RequireRemoved).unwrap()
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let (tr, va) = (windows(1), windows(2));
        let a = train(&tiny_config(), &tr, &va).unwrap();
        let b = train(&tiny_config(), &tr, &va).unwrap();
        let losses = |o: &TrainOutcome| o.history.iter().map(|m| (m.train_mse, m.val_mse)).collect::<Vec<_>>();
        assert_eq!(losses(&a), losses(&b));
        assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
    }

    #[test]
    fn batch_gradient_matches_sample_sum() {
        let model = ResKacNet::new(tiny_config()).unwrap();
        let data = windows(3);
        let idx = [0, 3, 5];
        let (l1, g1) = batch_gradients(&model, &data, &idx, 1).unwrap();
        let (l3, g3) = batch_gradients(&model, &data, &idx, 3).unwrap();
        assert_eq!(l1, l3);
        assert_eq!(g1, g3);
    }

    #[test]
    fn empty_and_nan_are_reported() {
        let data = windows(1);
        let empty = WindowBatch {
            inputs: Tensor::zeros(&[1, 6, 40]),
            targets: Tensor::zeros(&[1, 2]),
            window_start_indices: vec![],
            window_size: 40,
        };
        assert!(matches!(train(&tiny_config(), &empty, &data), Err(Error::Contract(_))));

        let mut model = ResKacNet::new(tiny_config()).unwrap();
        model.head.layers[1].bias.data_mut()[0] = f64::NAN;
        let (loss, _) = batch_gradients(&model, &data, &[0], 1).unwrap();
        assert!(loss.is_nan());
        let err = diagnose(&model, Error::Numerical("loss is NaN".into()), 1, 0);
        assert!(err.to_string().contains("head.fc2.bias"), "{err}");
    }
}
