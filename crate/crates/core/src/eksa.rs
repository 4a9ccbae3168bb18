//! Efficient kernel-based self-attention.
//!
//! Rows of `X ∈ R^{N×L}` are the tokens. Similarity between two rows is
//! `exp(ρ²/σ)` with `ρ` their Pearson correlation. Truncating the Taylor
//! series of that kernel after `m` terms gives an explicit feature map
//!
//! ```text
//! φ(x) = [1, x̂∘2 / (√1!·σ^½), x̂∘4 / (√2!·σ^1), …, x̂∘2m / (√m!·σ^(m/2))]
//! ```
//!
//! where `x̂` is the centered, unit-norm row and `∘` an elementwise power.
//! Attention then reassociates as `φ(Q)·(φ(K)ᵀ·V)`, costing `O(N·m·L²)`
//! instead of the `O(L·N²)` of softmax attention. For `L > 1` the
//! elementwise powers make `φ(q)·φ(k)` an approximation of `exp(ρ²/σ)`
//! rather than an identity.

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{join, uniform_init, Module};
use crate::tensor::{ConvSpec, Tape, Tensor, Var};

/// Row norms below this are treated as zero when normalizing.
const MIN_ROW_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EksaConfig {
    pub feature_dim: usize,
    pub seq_len: usize,
    pub taylor_order: usize,
    pub sigma: f64,
    pub normalize_output: bool,
}

impl EksaConfig {
    pub fn new(feature_dim: usize, seq_len: usize) -> Self {
        Self {
            feature_dim,
            seq_len,
            taylor_order: 2,
            sigma: 1.0,
            normalize_output: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(Error::Config(format!("sigma must be positive, got {}", self.sigma)));
        }
        if self.feature_dim == 0 || self.seq_len == 0 {
            return Err(Error::Config("EKSA dimensions must be positive".into()));
        }
        Ok(())
    }

    /// Width `1 + m·L` of the feature map.
    pub fn feature_width(&self) -> usize {
        1 + self.taylor_order * self.seq_len
    }
}

/// 1×1 convolution followed by a width-3 depthwise convolution.
#[derive(Debug, Clone)]
pub struct Projection {
    pub pointwise: Tensor,
    pub depthwise: Tensor,
}

impl Projection {
    pub fn new(channels: usize, rng: &mut impl Rng) -> Self {
        Self {
            pointwise: uniform_init(&[channels, channels, 1], channels, rng),
            depthwise: uniform_init(&[channels, 1, 3], 3, rng),
        }
    }

    pub fn identity(channels: usize) -> Self {
        let pointwise = Tensor::from_fn(&[channels, channels, 1], |i| {
            if i / channels == i % channels {
                1.0
            } else {
                0.0
            }
        });
        let depthwise = Tensor::from_fn(&[channels, 1, 3], |i| if i % 3 == 1 { 1.0 } else { 0.0 });
        Self {
            pointwise: pointwise.requiring_grad(),
            depthwise: depthwise.requiring_grad(),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let n = tape.shape(x)[0];
        let pw = tape.param(&self.pointwise);
        let h = tape.conv1d(x, pw, ConvSpec::new(1, 0, 1))?;
        let dw = tape.param(&self.depthwise);
        tape.conv1d(h, dw, ConvSpec::depthwise(n, 1))
    }
}

impl Module for Projection {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "pointwise"), &self.pointwise);
        f(&join(prefix, "depthwise"), &self.depthwise);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "pointwise"), &mut self.pointwise);
        f(&join(prefix, "depthwise"), &mut self.depthwise);
    }
}

#[derive(Debug, Clone)]
pub struct EksaLayer {
    pub config: EksaConfig,
    pub q_proj: Projection,
    pub k_proj: Projection,
    pub v_proj: Projection,
}

impl EksaLayer {
    pub fn new(config: EksaConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let n = config.feature_dim;
        Ok(Self {
            config,
            q_proj: Projection::new(n, rng),
            k_proj: Projection::new(n, rng),
            v_proj: Projection::new(n, rng),
        })
    }

    pub fn with_identity_projections(config: EksaConfig) -> Result<Self> {
        config.validate()?;
        let n = config.feature_dim;
        Ok(Self {
            config,
            q_proj: Projection::identity(n),
            k_proj: Projection::identity(n),
            v_proj: Projection::identity(n),
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let (n, l) = (self.config.feature_dim, self.config.seq_len);
        if tape.shape(x) != [n, l] {
            return Err(Error::shape(format!(
                "EKSA configured for [{n}×{l}] got {:?}",
                tape.shape(x)
            )));
        }
        let q = self.q_proj.forward(tape, x)?;
        let k = self.k_proj.forward(tape, x)?;
        let v = self.v_proj.forward(tape, x)?;
        linear_attention(
            tape,
            q,
            k,
            v,
            self.config.taylor_order,
            self.config.sigma,
            self.config.normalize_output,
        )
    }
}

impl Module for EksaLayer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.q_proj.visit(&join(prefix, "q_proj"), f);
        self.k_proj.visit(&join(prefix, "k_proj"), f);
        self.v_proj.visit(&join(prefix, "v_proj"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.q_proj.visit_mut(&join(prefix, "q_proj"), f);
        self.k_proj.visit_mut(&join(prefix, "k_proj"), f);
        self.v_proj.visit_mut(&join(prefix, "v_proj"), f);
    }
}

/// Squared Pearson correlation of two equal-length rows. A row with zero
/// centered norm correlates with nothing: the result is 0. Single-element
/// rows are compared uncentered, so two nonzero scalars give 1.
pub fn corr_sq(q: &[f64], k: &[f64]) -> f64 {
    assert_eq!(q.len(), k.len(), "corr_sq: row lengths differ");
    if q.len() == 1 {
        return if q[0] != 0.0 && k[0] != 0.0 { 1.0 } else { 0.0 };
    }
    let n = q.len() as f64;
    let mq = q.iter().sum::<f64>() / n;
    let mk = k.iter().sum::<f64>() / n;
    let (mut dot, mut nq, mut nk) = (0.0, 0.0, 0.0);
    for (a, b) in q.iter().zip(k) {
        let (a, b) = (a - mq, b - mk);
        dot += a * b;
        nq += a * a;
        nk += b * b;
    }
    if nq == 0.0 || nk == 0.0 {
        return 0.0;
    }
    let rho = dot / (nq.sqrt() * nk.sqrt());
    (rho * rho).min(1.0)
}

/// Centers each row and scales it to unit L2 norm; zero-variance rows map to
/// the zero vector. Single-column input is not centered, so each value maps
/// to its sign.
pub fn normalize_rows(tape: &mut Tape, x: Var) -> Result<Var> {
    let l = tape.shape(x)[1];
    let centered = if l == 1 {
        x
    } else {
        let mean = tape.mean(x, 1)?;
        let mean = tape.expand(mean, 1, l)?;
        tape.sub(x, mean)?
    };
    let norm = tape.l2norm(centered, 1)?;
    let norm = tape.clamp(norm, MIN_ROW_NORM, f64::INFINITY)?;
    let norm = tape.expand(norm, 1, l)?;
    tape.div(centered, norm)
}

/// Taylor expansion of already-normalized rows: `[N×L]` to `[N×(1+m·L)]`.
pub fn taylor_features(tape: &mut Tape, xhat: Var, m: usize, sigma: f64) -> Result<Var> {
    if !(sigma > 0.0) {
        return Err(Error::Domain(format!("sigma must be positive, got {sigma}")));
    }
    let rows = tape.shape(xhat)[0];
    let mut parts = vec![tape.constant(&Tensor::ones(&[rows, 1]))];
    let mut factorial = 1.0;
    for n in 1..=m {
        factorial *= n as f64;
        let coeff = 1.0 / (factorial.sqrt() * sigma.powf(n as f64 / 2.0));
        let p = tape.powi(xhat, 2 * n as i32)?;
        parts.push(tape.scale(p, coeff)?);
    }
    tape.concat(&parts, 1)
}

/// Truncated Mercer feature map of each row of `x: [N×L]`.
pub fn feature_map(tape: &mut Tape, x: Var, m: usize, sigma: f64) -> Result<Var> {
    if tape.shape(x).len() != 2 {
        return Err(Error::shape("feature_map expects a 2-D input"));
    }
    let xhat = normalize_rows(tape, x)?;
    taylor_features(tape, xhat, m, sigma)
}

/// `φ(q)·(φ(k)ᵀ·v)`, optionally divided row-wise by `φ(q)·(φ(k)ᵀ·1)`.
/// Never forms an `N×N` matrix.
pub fn linear_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    m: usize,
    sigma: f64,
    normalize: bool,
) -> Result<Var> {
    let shape = tape.shape(q).to_vec();
    if shape.len() != 2 || tape.shape(k) != shape.as_slice() || tape.shape(v) != shape.as_slice()
    {
        return Err(Error::shape("q, k and v must share one 2-D shape"));
    }
    let l = shape[1];
    let phi_q = feature_map(tape, q, m, sigma)?;
    let phi_k = feature_map(tape, k, m, sigma)?;
    let phi_k_t = tape.transpose(phi_k)?;
    let kv = tape.matmul(phi_k_t, v)?;
    let out = tape.matmul(phi_q, kv)?;
    if !normalize {
        return Ok(out);
    }
    let ksum = tape.sum(phi_k, 0)?;
    let ksum = tape.transpose(ksum)?;
    let denom = tape.matmul(phi_q, ksum)?;
    let denom = tape.expand(denom, 1, l)?;
    tape.div(out, denom)
}

/// Reference `softmax(q·kᵀ/√γ)·v`; quadratic in the token count.
pub fn softmax_attention(tape: &mut Tape, q: Var, k: Var, v: Var, gamma: f64) -> Result<Var> {
    let shape = tape.shape(q).to_vec();
    if shape.len() != 2 || tape.shape(k) != shape.as_slice() || tape.shape(v) != shape.as_slice()
    {
        return Err(Error::shape("q, k and v must share one 2-D shape"));
    }
    if !(gamma > 0.0) {
        return Err(Error::Domain(format!("gamma must be positive, got {gamma}")));
    }
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / gamma.sqrt())?;
    let weights = tape.softmax_rows(scores)?;
    tape.matmul(weights, v)
}

/// Value-only [`feature_map`].
pub fn feature_map_values(x: &Tensor, m: usize, sigma: f64) -> Result<Tensor> {
    let mut tape = Tape::no_grad();
    let v = tape.constant(x);
    let y = feature_map(&mut tape, v, m, sigma)?;
    Ok(tape.tensor(y))
}

/// Value-only [`linear_attention`].
pub fn linear_attention_values(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    m: usize,
    sigma: f64,
    normalize: bool,
) -> Result<Tensor> {
    let mut tape = Tape::no_grad();
    let (q, k, v) = (tape.constant(q), tape.constant(k), tape.constant(v));
    let y = linear_attention(&mut tape, q, k, v, m, sigma, normalize)?;
    Ok(tape.tensor(y))
}

/// Value-only [`softmax_attention`].
pub fn softmax_attention_values(q: &Tensor, k: &Tensor, v: &Tensor, gamma: f64) -> Result<Tensor> {
    let mut tape = Tape::no_grad();
    let (q, k, v) = (tape.constant(q), tape.constant(k), tape.constant(v));
    let y = softmax_attention(&mut tape, q, k, v, gamma)?;
    Ok(tape.tensor(y))
}

/// One row of the complexity table; times are medians in microseconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchRow {
    pub n: usize,
    pub t_softmax_us: f64,
    pub t_eksa_us: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub n_grid: Vec<usize>,
    pub seq_len: usize,
    pub repetitions: usize,
    pub taylor_order: usize,
    pub sigma: f64,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            n_grid: vec![256, 512, 1024, 2048],
            seq_len: 32,
            repetitions: 7,
            taylor_order: 2,
            sigma: 1.0,
            seed: 0,
        }
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Times softmax attention against the linearized path over a grid of
/// token counts at fixed sequence length.
pub fn complexity_bench(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    if cfg.n_grid.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::contract("benchmark grid must be sorted ascending"));
    }
    if cfg.repetitions == 0 {
        return Err(Error::contract("benchmark needs at least one repetition"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let gamma = cfg.seq_len as f64;
    let mut rows = Vec::with_capacity(cfg.n_grid.len());
    for &n in &cfg.n_grid {
        let mut rand_t = || Tensor::from_fn(&[n, cfg.seq_len], |_| rng.random_range(-1.0..1.0));
        let (q, k, v) = (rand_t(), rand_t(), rand_t());
        // warm-up
        softmax_attention_values(&q, &k, &v, gamma)?;
        linear_attention_values(&q, &k, &v, cfg.taylor_order, cfg.sigma, true)?;
        let mut ts = Vec::with_capacity(cfg.repetitions);
        let mut te = Vec::with_capacity(cfg.repetitions);
        for _ in 0..cfg.repetitions {
            let start = Instant::now();
            std::hint::black_box(softmax_attention_values(&q, &k, &v, gamma)?);
            ts.push(start.elapsed().as_secs_f64() * 1e6);
            let start = Instant::now();
            std::hint::black_box(linear_attention_values(
                &q,
                &k,
                &v,
                cfg.taylor_order,
                cfg.sigma,
                true,
            )?);
            te.push(start.elapsed().as_secs_f64() * 1e6);
        }
        rows.push(BenchRow {
            n,
            t_softmax_us: median(ts),
            t_eksa_us: median(te),
        });
    }
    Ok(rows)
}

/// Writes `n,t_softmax_us,t_eksa_us` rows.
pub fn write_bench_csv(rows: &[BenchRow], out: &mut impl Write) -> Result<()> {
    writeln!(out, "n,t_softmax_us,t_eksa_us")?;
    for r in rows {
        writeln!(out, "{},{:.3},{:.3}", r.n, r.t_softmax_us, r.t_eksa_us)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Pearson oracle written out term by term.
    fn pearson_sq(q: &[f64], k: &[f64]) -> f64 {
        let n = q.len() as f64;
        let sq: f64 = q.iter().sum();
        let sk: f64 = k.iter().sum();
        let sqk: f64 = q.iter().zip(k).map(|(a, b)| a * b).sum();
        let sqq: f64 = q.iter().map(|a| a * a).sum();
        let skk: f64 = k.iter().map(|b| b * b).sum();
        let r = (n * sqk - sq * sk) / ((n * sqq - sq * sq).sqrt() * (n * skk - sk * sk).sqrt());
        r * r
    }

    #[test]
    fn corr_examples() {
        assert!((corr_sq(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]) - 1.0).abs() < 1e-15);
        assert!(corr_sq(&[1.0, 0.0, -1.0], &[0.0, 1.0, 0.0]).abs() < 1e-15);
        let q = [1.0, 2.0, 3.0, 4.0];
        let k = [1.0, 3.0, 2.0, 4.0];
        assert!((pearson_sq(&q, &k) - 0.64).abs() < 1e-12);
        assert!((corr_sq(&q, &k) - 0.64).abs() < 1e-10);
        assert_eq!(corr_sq(&[2.0, 2.0], &[1.0, 5.0]), 0.0);
    }

    #[test]
    fn feature_map_examples() {
        let x = random(&[5, 3], 1);
        let f = feature_map_values(&x, 0, 1.0).unwrap();
        assert_eq!(f.shape(), &[5, 1]);
        assert!(f.data().iter().all(|&v| v == 1.0));

        let mut tape = Tape::no_grad();
        let xhat = tape.constant(&Tensor::from_rows(&[vec![0.6, 0.8]]).unwrap());
        let phi = taylor_features(&mut tape, xhat, 1, 1.0).unwrap();
        let phi = tape.value(phi);
        assert!((phi[0] - 1.0).abs() < 1e-15);
        assert!((phi[1] - 0.36).abs() < 1e-15);
        assert!((phi[2] - 0.64).abs() < 1e-15);
    }

    #[test]
    fn feature_width_and_degenerate_rows() {
        let x = Tensor::from_rows(&[vec![3.0; 4], vec![1.0, 2.0, 0.0, 5.0]]).unwrap();
        let f = feature_map_values(&x, 2, 1.0).unwrap();
        assert_eq!(f.shape(), &[2, 9]);
        assert_eq!(f.data()[0], 1.0);
        assert!(f.data()[1..9].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softmax_examples() {
        let v = random(&[1, 4], 2);
        let q = random(&[1, 4], 3);
        let out = softmax_attention_values(&q, &q, &v, 4.0).unwrap();
        assert!(out.max_abs_diff(&v) < 1e-15);

        let v = random(&[5, 3], 4);
        let k = random(&[5, 3], 5);
        let out = softmax_attention_values(&Tensor::zeros(&[5, 3]), &k, &v, 3.0).unwrap();
        for j in 0..3 {
            let mean: f64 = (0..5).map(|i| v.at(&[i, j])).sum::<f64>() / 5.0;
            for i in 0..5 {
                assert!((out.at(&[i, j]) - mean).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn softmax_matches_double_loop() {
        let (q, k, v) = (random(&[8, 4], 6), random(&[8, 4], 7), random(&[8, 4], 8));
        let gamma = 4.0;
        let out = softmax_attention_values(&q, &k, &v, gamma).unwrap();
        for i in 0..8 {
            let scores: Vec<f64> = (0..8)
                .map(|j| (0..4).map(|c| q.at(&[i, c]) * k.at(&[j, c])).sum::<f64>() / 2.0)
                .collect();
            let total: f64 = scores.iter().map(|s| s.exp()).sum();
            for c in 0..4 {
                let want: f64 = (0..8).map(|j| scores[j].exp() / total * v.at(&[j, c])).sum();
                assert!((out.at(&[i, c]) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_order_attention_sums_or_averages_values() {
        let cfg = EksaConfig {
            taylor_order: 0,
            normalize_output: false,
            ..EksaConfig::new(6, 5)
        };
        let x = random(&[6, 5], 9);
        for normalize in [false, true] {
            let layer = EksaLayer::with_identity_projections(EksaConfig {
                normalize_output: normalize,
                ..cfg
            })
            .unwrap();
            let mut tape = Tape::no_grad();
            let xv = tape.constant(&x);
            let y = layer.forward(&mut tape, xv).unwrap();
        let y = tape.tensor(y);
            for j in 0..5 {
                let sum: f64 = (0..6).map(|i| x.at(&[i, j])).sum();
                let want = if normalize { sum / 6.0 } else { sum };
                for i in 0..6 {
                    assert!((y.at(&[i, j]) - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn linearized_matches_quadratic_path() {
        let (q, k, v) = (random(&[16, 8], 10), random(&[16, 8], 11), random(&[16, 8], 12));
        let lin = linear_attention_values(&q, &k, &v, 2, 1.0, false).unwrap();
        let pq = feature_map_values(&q, 2, 1.0).unwrap();
        let pk = feature_map_values(&k, 2, 1.0).unwrap();
        let mut tape = Tape::no_grad();
        let (a, b, c) = (tape.constant(&pq), tape.constant(&pk), tape.constant(&v));
        let bt = tape.transpose(b).unwrap();
        let gram = tape.matmul(a, bt).unwrap();
        let quad = tape.matmul(gram, c).unwrap();
        assert!(lin.max_abs_diff(&tape.tensor(quad)) < 1e-10);
    }

    #[test]
    fn rejects_mismatched_shapes() {
        let layer = EksaLayer::with_identity_projections(EksaConfig::new(4, 4)).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::zeros(&[4, 5]));
        assert!(matches!(layer.forward(&mut tape, x), Err(Error::Shape(_))));
        assert!(EksaConfig {
            sigma: 0.0,
            ..EksaConfig::new(4, 4)
        }
        .validate()
        .is_err());
    }

    #[test]
    fn bench_csv_format() {
        let rows = complexity_bench(&BenchConfig {
            n_grid: vec![8, 16],
            seq_len: 4,
            repetitions: 1,
            ..BenchConfig::default()
        })
        .unwrap();
        let mut buf = Vec::new();
        write_bench_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "n,t_softmax_us,t_eksa_us");
        assert!(lines[1].starts_with("8,"));
        assert_eq!(lines.len(), 3);
        assert!(complexity_bench(&BenchConfig {
            n_grid: vec![16, 8],
            ..BenchConfig::default()
        })
        .is_err());
    }
}
