//! Residual ChebyKAN backbone: four stages of two residual blocks.
//!
//! The first unit of a stage's first block carries the stage stride; a
//! strided 1×1 convolution plus normalization forms the shortcut whenever the
//! block changes channel count or length. There is no input stem, so stage 1
//! reads the six IMU channels directly.

use rand::Rng;

use crate::chebykan::{ChebyKanConfig, ChebyKanLayer};
use crate::error::{Error, Result};
use crate::nn::{join, uniform_init, ChannelNorm, Module};
use crate::tensor::{ConvSpec, Tape, Tensor, Var};

/// Number of IMU input channels (3 gyro + 3 accel).
pub const INPUT_CHANNELS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackboneConfig {
    pub stage_channels: [usize; 4],
    pub stage_strides: [usize; 4],
    pub degree: usize,
    pub groups: usize,
    pub kernel_size: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            stage_channels: [64, 128, 256, 512],
            stage_strides: [1, 2, 2, 2],
            degree: 3,
            groups: 1,
            kernel_size: 3,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.contains(&0) || self.stage_strides.contains(&0) {
            return Err(Error::Config("stage channels and strides must be positive".into()));
        }
        if self.stage_channels.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Config(format!(
                "stage channels must be nondecreasing, got {:?}",
                self.stage_channels
            )));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::Config("kernel size must be odd for same padding".into()));
        }
        for unit in self.unit_configs() {
            unit.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }

    fn padding(&self) -> usize {
        self.kernel_size / 2
    }

    fn unit(&self, cin: usize, cout: usize, stride: usize) -> ChebyKanConfig {
        ChebyKanConfig {
            in_channels: cin,
            out_channels: cout,
            groups: self.groups,
            degree: self.degree,
            kernel_size: self.kernel_size,
            stride,
            padding: self.padding(),
            normalize: true,
        }
    }

    /// Configurations of all sixteen ChebyKAN units in forward order.
    pub fn unit_configs(&self) -> Vec<ChebyKanConfig> {
        self.block_plans()
            .into_iter()
            .flat_map(|(cin, cout, stride)| [self.unit(cin, cout, stride), self.unit(cout, cout, 1)])
            .collect()
    }

    /// `(in_channels, out_channels, stride)` of each residual block.
    fn block_plans(&self) -> Vec<(usize, usize, usize)> {
        let mut plans = Vec::with_capacity(8);
        let mut cin = INPUT_CHANNELS;
        for (&cout, &stride) in self.stage_channels.iter().zip(&self.stage_strides) {
            plans.push((cin, cout, stride));
            plans.push((cout, cout, 1));
            cin = cout;
        }
        plans
    }

    /// `(N, L)` produced for a window of `w` samples.
    pub fn output_shape(&self, w: usize) -> (usize, usize) {
        let k = self.kernel_size;
        let p = self.padding();
        let len = self
            .stage_strides
            .iter()
            .fold(w, |l, &s| (l + 2 * p - k) / s + 1);
        (self.stage_channels[3], len)
    }
}

/// Strided 1×1 convolution followed by normalization.
#[derive(Debug, Clone)]
pub struct Shortcut {
    pub weight: Tensor,
    pub stride: usize,
    pub norm: ChannelNorm,
}

impl Shortcut {
    pub fn new(cin: usize, cout: usize, stride: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: uniform_init(&[cout, cin, 1], cin, rng),
            stride,
            norm: ChannelNorm::new(cout),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(&self.weight);
        let y = tape.conv1d(x, w, ConvSpec::new(self.stride, 0, 1))?;
        self.norm.forward(tape, y)
    }
}

#[derive(Debug, Clone)]
pub struct ResBlock {
    pub unit1: ChebyKanLayer,
    pub unit2: ChebyKanLayer,
    /// `None` means identity.
    pub shortcut: Option<Shortcut>,
}

impl ResBlock {
    pub fn new(
        unit1: ChebyKanConfig,
        unit2: ChebyKanConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let shortcut = Self::needs_shortcut(&unit1).then(|| {
            Shortcut::new(unit1.in_channels, unit1.out_channels, unit1.stride, rng)
        });
        let unit1 = ChebyKanLayer::new(unit1, rng)?;
        let mut unit2 = ChebyKanLayer::new(unit2, rng)?;
        // Each block starts as its shortcut path.
        unit2.norm.scale.data_mut().fill(0.0);
        Ok(Self {
            unit1,
            unit2,
            shortcut,
        })
    }

    /// A block with zeroed unit convolutions and an identity shortcut (only
    /// valid when the block preserves shape).
    pub fn zeroed_identity(unit1: ChebyKanConfig, unit2: ChebyKanConfig) -> Result<Self> {
        if Self::needs_shortcut(&unit1) {
            return Err(Error::shape("identity shortcut needs a shape-preserving block"));
        }
        Ok(Self {
            unit1: ChebyKanLayer::zeroed(unit1)?,
            unit2: ChebyKanLayer::zeroed(unit2)?,
            shortcut: None,
        })
    }

    fn needs_shortcut(unit1: &ChebyKanConfig) -> bool {
        unit1.in_channels != unit1.out_channels || unit1.stride != 1
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.unit1.forward(tape, x)?;
        let h = self.unit2.forward(tape, h)?;
        let skip = match &self.shortcut {
            Some(s) => s.forward(tape, x)?,
            None => x,
        };
        if tape.shape(h) != tape.shape(skip) {
            return Err(Error::shape(format!(
                "residual branch {:?} does not match shortcut {:?}",
                tape.shape(h),
                tape.shape(skip)
            )));
        }
        tape.add(h, skip)
    }
}

impl Module for ResBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.unit1.visit(&join(prefix, "unit1"), f);
        self.unit2.visit(&join(prefix, "unit2"), f);
        if let Some(s) = &self.shortcut {
            f(&join(prefix, "shortcut.weight"), &s.weight);
            s.norm.visit(&join(prefix, "shortcut.norm"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.unit1.visit_mut(&join(prefix, "unit1"), f);
        self.unit2.visit_mut(&join(prefix, "unit2"), f);
        if let Some(s) = &mut self.shortcut {
            f(&join(prefix, "shortcut.weight"), &mut s.weight);
            s.norm.visit_mut(&join(prefix, "shortcut.norm"), f);
        }
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub blocks: Vec<ResBlock>,
}

impl Backbone {
    pub fn new(config: BackboneConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let units = config.unit_configs();
        let blocks = units
            .chunks(2)
            .map(|pair| ResBlock::new(pair[0], pair[1], rng))
            .collect::<Result<_>>()?;
        Ok(Self { config, blocks })
    }

    /// `x: [6×W]` to `[N×L]`.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let shape = tape.shape(x);
        if shape.len() != 2 || shape[0] != INPUT_CHANNELS {
            return Err(Error::contract(format!(
                "backbone expects [{INPUT_CHANNELS}×W] input, got {shape:?}"
            )));
        }
        self.blocks
            .iter()
            .try_fold(x, |h, block| block.forward(tape, h))
    }
}

impl Module for Backbone {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("stage{}.block{}", i / 2, i % 2)), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("stage{}.block{}", i / 2, i % 2)), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Shape oracle that walks the conv arithmetic unit by unit.
    fn propagate(cfg: &BackboneConfig, w: usize) -> (usize, usize) {
        let mut len = w;
        let mut ch = INPUT_CHANNELS;
        for u in cfg.unit_configs() {
            len = (len + 2 * u.padding - u.kernel_size) / u.stride + 1;
            ch = u.out_channels;
        }
        (ch, len)
    }

    #[test]
    fn default_shape_is_512_by_25() {
        let cfg = BackboneConfig::default();
        assert_eq!(propagate(&cfg, 200), (512, 25));
        assert_eq!(cfg.output_shape(200), (512, 25));
        for w in [100, 200, 400] {
            assert_eq!(cfg.output_shape(w), propagate(&cfg, w));
        }
    }

    #[test]
    fn zeroed_block_is_identity() {
        let cfg = BackboneConfig::default();
        let u = ChebyKanConfig {
            in_channels: 4,
            out_channels: 4,
            ..cfg.unit(4, 4, 1)
        };
        let block = ResBlock::zeroed_identity(u, u).unwrap();
        let x = Tensor::from_fn(&[4, 10], |i| (i as f64 * 0.7).sin());
        let mut tape = Tape::no_grad();
        let xv = tape.constant(&x);
        let y = block.forward(&mut tape, xv).unwrap();
        assert_eq!(tape.tensor(y), x);
    }

    #[test]
    fn stride_two_block_halves_length() {
        let cfg = BackboneConfig {
            stage_channels: [4, 4, 4, 4],
            ..BackboneConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let block = ResBlock::new(cfg.unit(4, 4, 2), cfg.unit(4, 4, 1), &mut rng).unwrap();
        assert!(block.shortcut.is_some());
        let mut tape = Tape::no_grad();
        let x = tape.constant(&Tensor::from_fn(&[4, 200], |i| (i as f64 * 0.1).cos()));
        let y = block.forward(&mut tape, x).unwrap();
        assert_eq!(tape.shape(y), &[4, 100]);
    }

    #[test]
    fn rejects_wrong_channel_count() {
        let cfg = BackboneConfig {
            stage_channels: [4, 4, 8, 8],
            ..BackboneConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bb = Backbone::new(cfg, &mut rng).unwrap();
        let mut tape = Tape::no_grad();
        let x = tape.constant(&Tensor::zeros(&[5, 32]));
        assert!(matches!(bb.forward(&mut tape, x), Err(Error::Contract(_))));
    }

    #[test]
    fn config_validation() {
        let mut cfg = BackboneConfig::default();
        cfg.stage_channels = [64, 32, 256, 512];
        assert!(cfg.validate().is_err());
        let mut cfg = BackboneConfig::default();
        cfg.groups = 4;
        // the 6-channel input is not divisible by 4 groups
        assert!(cfg.validate().is_err());
        cfg.groups = 2;
        assert!(cfg.validate().is_ok());
    }
}
