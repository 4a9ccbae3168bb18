//! Parameter traversal and the small layers shared by the network blocks.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Standardization epsilon for [`ChannelNorm`].
pub const NORM_EPS: f64 = 1e-5;

/// Anything that owns named trainable tensors.
///
/// Visiting order is fixed per type; checkpoints and the optimizer both rely
/// on it.
pub trait Module {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.numel());
        n
    }

    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit("", &mut |name, _| names.push(name.to_string()));
        names
    }

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, t| t.zero_grad());
    }

    /// Pulls every parameter's gradient off `tape`.
    fn collect_grads(&mut self, tape: &Tape) -> Result<()> {
        let mut result = Ok(());
        self.visit_mut("", &mut |_, t| {
            if result.is_ok() {
                result = tape.write_grad(t);
            }
        });
        result
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Uniform initialization in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub fn uniform_init(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound)).requiring_grad()
}

/// Per-channel standardization over the length axis followed by a learned
/// affine map. A channel with zero variance standardizes to 0.
#[derive(Debug, Clone)]
pub struct ChannelNorm {
    pub scale: Tensor,
    pub bias: Tensor,
}

impl ChannelNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            scale: Tensor::ones(&[channels]).requiring_grad(),
            bias: Tensor::zeros(&[channels]).requiring_grad(),
        }
    }

    pub fn channels(&self) -> usize {
        self.scale.numel()
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 2 || shape[0] != self.channels() {
            return Err(Error::shape(format!(
                "channel norm over {} channels applied to {shape:?}",
                self.channels()
            )));
        }
        let (c, l) = (shape[0], shape[1]);
        let z = standardize_rows(tape, x, NORM_EPS)?;
        let s = tape.param(&self.scale);
        let s = tape.reshape(s, &[c, 1])?;
        let s = tape.expand(s, 1, l)?;
        let b = tape.param(&self.bias);
        let b = tape.reshape(b, &[c, 1])?;
        let b = tape.expand(b, 1, l)?;
        let z = tape.mul(z, s)?;
        tape.add(z, b)
    }
}

impl Module for ChannelNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "scale"), &self.scale);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "scale"), &mut self.scale);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// `(x - mean) / sqrt(var + eps)` along axis 1 of a 2-D tensor.
pub fn standardize_rows(tape: &mut Tape, x: Var, eps: f64) -> Result<Var> {
    let l = tape.shape(x)[1];
    let mean = tape.mean(x, 1)?;
    let mean = tape.expand(mean, 1, l)?;
    let centered = tape.sub(x, mean)?;
    let sq = tape.square(centered)?;
    let var = tape.mean(sq, 1)?;
    let var = tape.add_scalar(var, eps)?;
    let std = tape.sqrt(var)?;
    let std = tape.expand(std, 1, l)?;
    tape.div(centered, std)
}

/// Fully connected layer acting on row vectors: `y = x·W + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: uniform_init(&[inputs, outputs], inputs, rng),
            bias: Tensor::zeros(&[1, outputs]).requiring_grad(),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        let y = tape.matmul(x, w)?;
        tape.add(y, b)
    }
}

impl Module for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}
