//! Velocity-regression network, optimizer, training loop and checkpoints.

mod checkpoint;
mod model;
mod optim;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, FORMAT_VERSION};
pub use model::{head_forward, mse_loss, mse_loss_values, Head, ResKacNet};
pub use optim::Adam;
pub use train::{
    evaluate_mse, predict_batch, train, worker_threads, EpochMetrics, TrainOutcome, THREADS_ENV,
};

use crate::backbone::BackboneConfig;
use crate::eksa::EksaConfig;
use crate::error::{Error, Result};

/// How the `[N×L]` feature map becomes the head's input row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pooling {
    /// All `N·L` values, channel-major.
    Flatten,
    /// Average over length, `N` values.
    Mean,
}

impl Pooling {
    pub fn name(&self) -> &'static str {
        match self {
            Pooling::Flatten => "flatten",
            Pooling::Mean => "mean",
        }
    }

    /// Head input width for an `[n×l]` feature map.
    pub fn width(&self, n: usize, l: usize) -> usize {
        match self {
            Pooling::Flatten => n * l,
            Pooling::Mean => n,
        }
    }
}

impl std::str::FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flatten" => Ok(Pooling::Flatten),
            "mean" => Ok(Pooling::Mean),
            _ => Err(Error::Config(format!("unknown pooling {s:?}"))),
        }
    }
}

/// Everything needed to rebuild and train a model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// `feature_dim` and `seq_len` always mirror the backbone output.
    pub eksa: EksaConfig,
    pub eksa_enabled: bool,
    pub head_widths: [usize; 3],
    pub pooling: Pooling,
    pub window_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::with_backbone(BackboneConfig::default(), 200)
    }
}

impl ModelConfig {
    pub fn with_backbone(backbone: BackboneConfig, window_size: usize) -> Self {
        let (n, l) = backbone.output_shape(window_size);
        Self {
            backbone,
            eksa: EksaConfig::new(n, l),
            eksa_enabled: true,
            head_widths: [512, 128, 2],
            pooling: Pooling::Flatten,
            window_size,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 32,
            epochs: 50,
            patience: 10,
            seed: 0,
        }
    }

    /// Same topology as the default with narrow stages, for CPU-scale runs.
    pub fn compact(window_size: usize) -> Self {
        let backbone = BackboneConfig {
            stage_channels: [8, 16, 16, 32],
            ..BackboneConfig::default()
        };
        let mut cfg = Self::with_backbone(backbone, window_size);
        cfg.head_widths = [64, 32, 2];
        cfg.learning_rate = 1e-3;
        cfg
    }

    /// Recomputes the attention dimensions from the backbone and window.
    pub fn sync_eksa_dims(&mut self) {
        let (n, l) = self.backbone.output_shape(self.window_size);
        self.eksa.feature_dim = n;
        self.eksa.seq_len = l;
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.eksa.validate()?;
        if self.window_size < 2 {
            return Err(Error::Config("window_size must be at least 2".into()));
        }
        let (n, l) = self.backbone.output_shape(self.window_size);
        if (self.eksa.feature_dim, self.eksa.seq_len) != (n, l) {
            return Err(Error::Config(format!(
                "attention dims {}×{} do not match backbone output {n}×{l}",
                self.eksa.feature_dim, self.eksa.seq_len
            )));
        }
        if self.head_widths.contains(&0) || self.head_widths[2] != 2 {
            return Err(Error::Config(format!(
                "head widths must be positive and end at 2, got {:?}",
                self.head_widths
            )));
        }
        let betas_ok = (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2);
        if !(self.learning_rate >= 0.0) || !betas_ok || !(self.epsilon > 0.0) {
            return Err(Error::Config("invalid optimizer hyperparameters".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }

    /// Canonical `key = value` pairs; floats use shortest round-trip form.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let b = &self.backbone;
        [
            ("backbone.stage_channels", list(&b.stage_channels)),
            ("backbone.stage_strides", list(&b.stage_strides)),
            ("backbone.degree", b.degree.to_string()),
            ("backbone.groups", b.groups.to_string()),
            ("backbone.kernel_size", b.kernel_size.to_string()),
            ("eksa.enabled", self.eksa_enabled.to_string()),
            ("eksa.taylor_order", self.eksa.taylor_order.to_string()),
            ("eksa.sigma", format!("{:?}", self.eksa.sigma)),
            ("eksa.normalize_output", self.eksa.normalize_output.to_string()),
            ("head.widths", list(&self.head_widths)),
            ("head.pooling", self.pooling.name().to_string()),
            ("window_size", self.window_size.to_string()),
            ("learning_rate", format!("{:?}", self.learning_rate)),
            ("beta1", format!("{:?}", self.beta1)),
            ("beta2", format!("{:?}", self.beta2)),
            ("epsilon", format!("{:?}", self.epsilon)),
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("patience", self.patience.to_string()),
            ("seed", self.seed.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    /// Applies one `key = value` setting. Returns `Ok(false)` for keys that
    /// do not belong to the model.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        let b = &mut self.backbone;
        match key {
            "backbone.stage_channels" => b.stage_channels = parse_array(key, value)?,
            "backbone.stage_strides" => b.stage_strides = parse_array(key, value)?,
            "backbone.degree" => b.degree = parse(key, value)?,
            "backbone.groups" => b.groups = parse(key, value)?,
            "backbone.kernel_size" => b.kernel_size = parse(key, value)?,
            "eksa.enabled" => self.eksa_enabled = parse(key, value)?,
            "eksa.taylor_order" => self.eksa.taylor_order = parse(key, value)?,
            "eksa.sigma" => self.eksa.sigma = parse(key, value)?,
            "eksa.normalize_output" => self.eksa.normalize_output = parse(key, value)?,
            "head.widths" => self.head_widths = parse_array(key, value)?,
            "head.pooling" => self.pooling = value.trim().parse()?,
            "window_size" => self.window_size = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "epsilon" => self.epsilon = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "patience" => self.patience = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            _ => return Ok(false),
        }
        self.sync_eksa_dims();
        Ok(true)
    }

    /// Rebuilds a config from canonical pairs. Every key must be known.
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in pairs {
            if !cfg.apply(k, v)? {
                return Err(Error::Config(format!("unknown model key `{k}`")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn list(values: &[usize]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

pub(crate) fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for `{key}`")))
}

pub(crate) fn parse_array<const N: usize>(key: &str, value: &str) -> Result<[usize; N]> {
    let items = value
        .split(',')
        .map(|s| parse(key, s))
        .collect::<Result<Vec<usize>>>()?;
    items
        .try_into()
        .map_err(|_| Error::Config(format!("`{key}` needs {N} comma-separated values")))
}
