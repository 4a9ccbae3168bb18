use chebyodo::backbone::{Backbone, BackboneConfig};
use chebyodo::eksa::{corr_sq, feature_map_values, linear_attention_values, EksaConfig, EksaLayer};
use chebyodo::nn::Module;
use chebyodo::tensor::{Tape, Var};
use chebyodo::training::{mse_loss, ModelConfig, ResKacNet};
use chebyodo::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn small_backbone() -> BackboneConfig {
    BackboneConfig { stage_channels: [4, 8, 8, 16], ..BackboneConfig::default() }
}

fn run(backbone: &Backbone, x: &Tensor) -> Tensor {
    let mut tape = Tape::no_grad();
    let v = tape.constant(x);
    let y = backbone.forward(&mut tape, v).unwrap();
    tape.tensor(y)
}

#[test]
fn announced_shape_matches_output() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for cfg in [BackboneConfig::default(), small_backbone()] {
        let bb = Backbone::new(cfg.clone(), &mut rng).unwrap();
        for w in [100, 200, 400] {
            let (n, l) = cfg.output_shape(w);
            let y = run(&bb, &random(&mut rng, &[6, w]));
            assert_eq!(y.shape(), &[n, l], "W={w}");
        }
    }
    assert_eq!(BackboneConfig::default().output_shape(200), (512, 25));
}

#[test]
fn forward_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let bb = Backbone::new(small_backbone(), &mut rng).unwrap();
    let x = random(&mut rng, &[6, 64]);
    assert_eq!(run(&bb, &x).data(), run(&bb, &x).data());
}

#[test]
fn zeroed_units_reduce_to_the_shortcut_chain() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut bb = Backbone::new(small_backbone(), &mut rng).unwrap();
    for block in &mut bb.blocks {
        for unit in [&mut block.unit1, &mut block.unit2] {
            unit.conv_weight.data_mut().fill(0.0);
        }
    }
    let x = random(&mut rng, &[6, 48]);
    let mut tape = Tape::no_grad();
    let mut h = tape.constant(&x);
    for block in &bb.blocks {
        if let Some(s) = &block.shortcut {
            h = s.forward(&mut tape, h).unwrap();
        }
    }
    let chain = tape.tensor(h);
    assert!(run(&bb, &x).max_abs_diff(&chain) < 1e-12);
}

#[test]
fn default_model_gets_finite_gradients_everywhere() {
    let model = ResKacNet::new(ModelConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&mut rng, &[6, 200]);
    let mut tape = Tape::new();
    let xv = tape.constant(&x);
    let pred = model.forward(&mut tape, xv).unwrap();
    let target = tape.constant(&Tensor::new(&[1, 2], vec![0.5, -0.3]).unwrap());
    let loss = mse_loss(&mut tape, pred, target).unwrap();
    tape.backward(loss).unwrap();
    let mut checked = 0;
    model.visit("", &mut |name, p| {
        let g = tape.param_grad(p).unwrap_or_else(|| panic!("{name} got no gradient"));
        assert!(g.iter().all(|v| v.is_finite()), "{name}");
        checked += 1;
    });
    assert_eq!(checked, model.param_names().len());
}

fn gram(phi: &Tensor) -> Vec<Vec<f64>> {
    let rows: Vec<&[f64]> = phi.rows().collect();
    rows.iter()
        .map(|a| rows.iter().map(|b| a.iter().zip(*b).map(|(x, y)| x * y).sum()).collect())
        .collect()
}

/// Cholesky of `g + jitter·I`; fails iff the shifted matrix is not positive definite.
fn cholesky_ok(g: &[Vec<f64>], jitter: f64) -> bool {
    let n = g.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                let d = g[i][i] + jitter - s;
                if d <= 0.0 {
                    return false;
                }
                l[i][i] = d.sqrt();
            } else {
                l[i][j] = (g[i][j] - s) / l[j][j];
            }
        }
    }
    true
}

#[test]
fn kernel_matrix_is_symmetric_and_positive_semidefinite() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (n, l, m) in [(12, 4, 2), (20, 16, 3), (8, 8, 0)] {
        let q = feature_map_values(&random(&mut rng, &[n, l]), m, 0.7).unwrap();
        let k = feature_map_values(&random(&mut rng, &[n, l]), m, 0.7).unwrap();
        let qk = gram_cross(&q, &k);
        let kq = gram_cross(&k, &q);
        for i in 0..n {
            for j in 0..n {
                assert_eq!(qk[i][j], kq[j][i]);
            }
        }
        assert!(cholesky_ok(&gram(&q), 1e-8));
    }
}

fn gram_cross(a: &Tensor, b: &Tensor) -> Vec<Vec<f64>> {
    a.rows()
        .map(|x| b.rows().map(|y| x.iter().zip(y).map(|(p, q)| p * q).sum()).collect())
        .collect()
}

#[test]
fn scalar_kernel_increases_toward_the_exponential() {
    for (a, b, sigma) in [(0.3, -2.0, 1.0), (1.5, 4.0, 0.5), (-1.0, -1.0, 2.0)] {
        let (q, k) = (Tensor::new(&[1, 1], vec![a]).unwrap(), Tensor::new(&[1, 1], vec![b]).unwrap());
        let rho2 = corr_sq(&[a], &[b]);
        let target = (rho2 / sigma).exp();
        let mut prev = 0.0;
        for m in 0..=10 {
            let (fq, fk) = (feature_map_values(&q, m, sigma).unwrap(), feature_map_values(&k, m, sigma).unwrap());
            let dot: f64 = fq.data().iter().zip(fk.data()).map(|(x, y)| x * y).sum();
            assert!(dot > prev && dot <= target + 1e-15, "m={m}: {dot} vs {target}");
            prev = dot;
        }
    }
}

#[test]
fn identity_projection_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random(&mut rng, &[5, 7]);
    for normalize in [false, true] {
        let cfg = EksaConfig { taylor_order: 0, normalize_output: normalize, ..EksaConfig::new(5, 7) };
        let layer = EksaLayer::with_identity_projections(cfg).unwrap();
        let mut tape = Tape::no_grad();
        let v = tape.constant(&x);
        let y = layer.forward(&mut tape, v).unwrap();
        let y = tape.tensor(y);
        for j in 0..7 {
            let col: f64 = (0..5).map(|i| x.at(&[i, j])).sum();
            let want = if normalize { col / 5.0 } else { col };
            for i in 0..5 {
                assert!((y.at(&[i, j]) - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn linearized_path_equals_quadratic_path() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (q, k, v) = (random(&mut rng, &[16, 8]), random(&mut rng, &[16, 8]), random(&mut rng, &[16, 8]));
    let fast = linear_attention_values(&q, &k, &v, 2, 1.0, false).unwrap();
    let (fq, fk) = (feature_map_values(&q, 2, 1.0).unwrap(), feature_map_values(&k, 2, 1.0).unwrap());
    let scores = gram_cross(&fq, &fk);
    for i in 0..16 {
        for j in 0..8 {
            let slow: f64 = (0..16).map(|t| scores[i][t] * v.at(&[t, j])).sum();
            assert!((fast.at(&[i, j]) - slow).abs() < 1e-10);
        }
    }
}

fn var_value(tape: &Tape, v: Var) -> Vec<f64> {
    tape.value(v).to_vec()
}

proptest! {
    #[test]
    fn correlation_ignores_affine_maps(
        seed in any::<u64>(),
        len in 2usize..24,
        a in prop_oneof![-50.0f64..-0.01, 0.01f64..50.0],
        b in -100.0f64..100.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
        let k: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
        let moved: Vec<f64> = q.iter().map(|v| a * v + b).collect();
        prop_assert!((corr_sq(&moved, &k) - corr_sq(&q, &k)).abs() < 1e-10);
        prop_assert!((0.0..=1.0).contains(&corr_sq(&q, &k)));

        let fq = feature_map_values(&Tensor::new(&[1, len], q).unwrap(), 3, 1.0).unwrap();
        let fm = feature_map_values(&Tensor::new(&[1, len], moved).unwrap(), 3, 1.0).unwrap();
        prop_assert!(fq.max_abs_diff(&fm) < 1e-9);
    }

    #[test]
    fn feature_width_is_one_plus_m_l(n in 1usize..6, l in 1usize..9, m in 0usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::no_grad();
        let x = tape.constant(&random(&mut rng, &[n, l]));
        let f = chebyodo::eksa::feature_map(&mut tape, x, m, 1.0).unwrap();
        prop_assert_eq!(tape.shape(f), &[n, 1 + m * l]);
        prop_assert!(var_value(&tape, f).iter().all(|v| v.is_finite()));
    }
}
