//! Grouped Chebyshev-KAN convolution unit.
//!
//! Each input value is squashed with `tanh`, turned into an angle with
//! `arccos`, and expanded into `cos(n·angle)` for `n = 0..=degree`. Because
//! `T_n(cos θ) = cos(nθ)`, feature `n` is exactly the Chebyshev polynomial
//! `T_n(tanh x)`. The expanded channels are laid out channel-major and
//! degree-minor (row `c·(degree+1) + n` holds `T_n` of source channel `c`),
//! so every group's features form one contiguous block and a single grouped
//! convolution applies independent weights per group. Per-channel
//! normalization follows.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{join, uniform_init, ChannelNorm, Module};
use crate::tensor::{ConvSpec, Tape, Tensor, Var};

/// `tanh` outputs are clamped to `[-ACOS_CLAMP, ACOS_CLAMP]` before `arccos`
/// so the angle and its derivative stay finite.
pub const ACOS_CLAMP: f64 = 1.0 - 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChebyKanConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub groups: usize,
    pub degree: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub padding: usize,
    /// Disables the post-convolution normalization when false.
    pub normalize: bool,
}

impl ChebyKanConfig {
    pub fn new(in_channels: usize, out_channels: usize, degree: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            groups: 1,
            degree,
            kernel_size: 3,
            stride: 1,
            padding: 1,
            normalize: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.groups == 0 {
            return Err(Error::shape("channel and group counts must be positive"));
        }
        if self.kernel_size == 0 || self.stride == 0 {
            return Err(Error::shape("kernel size and stride must be positive"));
        }
        if self.in_channels % self.groups != 0 || self.out_channels % self.groups != 0 {
            return Err(Error::shape(format!(
                "{} in / {} out channels not divisible by {} groups",
                self.in_channels, self.out_channels, self.groups
            )));
        }
        Ok(())
    }

    /// Expanded input channels seen by each group's convolution.
    pub fn features_per_group(&self) -> usize {
        self.in_channels * (self.degree + 1) / self.groups
    }

    pub fn weight_shape(&self) -> [usize; 3] {
        [self.out_channels, self.features_per_group(), self.kernel_size]
    }

    pub fn out_length(&self, length: usize) -> usize {
        (length + 2 * self.padding).saturating_sub(self.kernel_size) / self.stride + 1
    }
}

#[derive(Debug, Clone)]
pub struct ChebyKanLayer {
    pub config: ChebyKanConfig,
    pub conv_weight: Tensor,
    pub norm: ChannelNorm,
}

impl ChebyKanLayer {
    pub fn new(config: ChebyKanConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let shape = config.weight_shape();
        Ok(Self {
            config,
            conv_weight: uniform_init(&shape, shape[1] * shape[2], rng),
            norm: ChannelNorm::new(config.out_channels),
        })
    }

    /// A layer whose convolution weights are all zero.
    pub fn zeroed(config: ChebyKanConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            conv_weight: Tensor::zeros(&config.weight_shape()).requiring_grad(),
            norm: ChannelNorm::new(config.out_channels),
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let shape = tape.shape(x);
        if shape.len() != 2 || shape[0] != self.config.in_channels {
            return Err(Error::shape(format!(
                "ChebyKAN layer expects [{}×L] input, got {shape:?}",
                self.config.in_channels
            )));
        }
        let features = cheb_features(tape, x, self.config.degree)?;
        let w = tape.param(&self.conv_weight);
        let spec = ConvSpec::new(self.config.stride, self.config.padding, self.config.groups);
        let y = tape.conv1d(features, w, spec)?;
        if self.config.normalize {
            self.norm.forward(tape, y)
        } else {
            Ok(y)
        }
    }
}

impl Module for ChebyKanLayer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "conv_weight"), &self.conv_weight);
        self.norm.visit(&join(prefix, "norm"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "conv_weight"), &mut self.conv_weight);
        self.norm.visit_mut(&join(prefix, "norm"), f);
    }
}

/// `arccos(clamp(tanh(x)))`, elementwise. Values lie in `(0, π)`.
pub fn cheb_angle(tape: &mut Tape, x: Var) -> Result<Var> {
    let t = tape.tanh(x)?;
    let t = tape.clamp(t, -ACOS_CLAMP, ACOS_CLAMP)?;
    tape.acos(t)
}

/// Expands `[c×L]` into `[(c·(degree+1))×L]` Chebyshev features.
pub fn cheb_features(tape: &mut Tape, x: Var, degree: usize) -> Result<Var> {
    if tape.shape(x).len() != 2 {
        return Err(Error::shape(format!(
            "cheb_features expects a 2-D input, got {:?}",
            tape.shape(x)
        )));
    }
    let angle = cheb_angle(tape, x)?;
    let mut terms = Vec::with_capacity(degree + 1);
    for n in 0..=degree {
        let scaled = tape.scale(angle, n as f64)?;
        terms.push(tape.cos(scaled)?);
    }
    tape.interleave(&terms)
}

/// Value-only [`cheb_features`].
pub fn cheb_features_values(x: &Tensor, degree: usize) -> Result<Tensor> {
    let mut tape = Tape::no_grad();
    let v = tape.constant(x);
    let y = cheb_features(&mut tape, v, degree)?;
    Ok(tape.tensor(y))
}
