//! Chebyshev expansion of a signal and a learnable ChebyKAN convolution on top.

use chebyodo::chebykan::{cheb_features_values, ChebyKanConfig, ChebyKanLayer};
use chebyodo::tensor::Tape;
use chebyodo::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> chebyodo::Result<()> {
    let degree = 4;
    let xs = [-2.0, -0.5, 0.0, 0.5, 2.0];
    let feats = cheb_features_values(&Tensor::new(&[1, xs.len()], xs.to_vec())?, degree)?;
    println!("x      T0..T{degree} of tanh(x)");
    for (j, x) in xs.iter().enumerate() {
        let row: Vec<String> = (0..=degree).map(|n| format!("{:+.4}", feats.at(&[n, j]))).collect();
        println!("{x:+.2}  {}", row.join(" "));
    }

    // Same numbers from the three-term recurrence.
    let t = 0.5f64.tanh();
    let (mut a, mut b) = (1.0, t);
    for _ in 2..=degree {
        (a, b) = (b, 2.0 * t * b - a);
    }
    println!("recurrence T{degree}(tanh 0.5) = {b:+.4}");

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cfg = ChebyKanConfig { groups: 2, ..ChebyKanConfig::new(6, 8, 3) };
    let layer = ChebyKanLayer::new(cfg, &mut rng)?;
    let input = Tensor::from_fn(&[6, 64], |i| ((i as f64) * 0.37).sin());
    let mut tape = Tape::no_grad();
    let x = tape.constant(&input);
    let y = layer.forward(&mut tape, x)?;
    println!("ChebyKAN layer: {:?} -> {:?}", input.shape(), tape.shape(y));
    Ok(())
}
