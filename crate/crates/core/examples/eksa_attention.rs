//! Correlation kernel, its Taylor feature map, and linear against softmax attention.

use chebyodo::eksa::{
    corr_sq, feature_map_values, linear_attention_values, softmax_attention_values, taylor_features,
};
use chebyodo::tensor::Tape;
use chebyodo::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> chebyodo::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let q: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
    let k: Vec<f64> = q.iter().map(|v| v + rng.random_range(-0.5..0.5)).collect();
    let shifted: Vec<f64> = q.iter().map(|v| -3.0 * v + 10.0).collect();
    println!("corr²(q, k) = {:.6}", corr_sq(&q, &k));
    println!("corr²(-3q + 10, k) = {:.6}", corr_sq(&shifted, &k));

    // Scalar case: the features reproduce the partial sums of exp(ρ²).
    let rho: f64 = 0.8;
    for m in [1, 2, 4, 8] {
        let mut tape = Tape::no_grad();
        let a = tape.constant(&Tensor::new(&[1, 1], vec![rho])?);
        let b = tape.constant(&Tensor::new(&[1, 1], vec![1.0])?);
        let fa = taylor_features(&mut tape, a, m, 1.0)?;
        let fb = taylor_features(&mut tape, b, m, 1.0)?;
        let dot: f64 = tape.value(fa).iter().zip(tape.value(fb)).map(|(x, y)| x * y).sum();
        println!("m={m}: feature inner product {dot:.8}, exp(ρ²) {:.8}", (rho * rho).exp());
    }

    // Longer rows: elementwise powers no longer sum to powers of ρ.
    let fq = feature_map_values(&Tensor::new(&[1, 16], q.clone())?, 8, 1.0)?;
    let fk = feature_map_values(&Tensor::new(&[1, 16], k.clone())?, 8, 1.0)?;
    let dot: f64 = fq.data().iter().zip(fk.data()).map(|(x, y)| x * y).sum();
    println!("L=16: feature inner product {dot:.4}, exp(corr²) {:.4}", corr_sq(&q, &k).exp());

    let (n, l) = (128, 16);
    let rand_t = |rng: &mut ChaCha8Rng| Tensor::from_fn(&[n, l], |_| rng.random_range(-1.0..1.0));
    let (q, k, v) = (rand_t(&mut rng), rand_t(&mut rng), rand_t(&mut rng));
    let lin = linear_attention_values(&q, &k, &v, 2, 1.0, true)?;
    let soft = softmax_attention_values(&q, &k, &v, l as f64)?;
    println!(
        "N={n} L={l}: linear {:?}, softmax {:?}, max |difference| {:.3}",
        lin.shape(),
        soft.shape(),
        lin.max_abs_diff(&soft)
    );
    Ok(())
}
