//! Flat `key = value` run configuration shared by every command.
//!
//! Lines are `key = value`; `#` starts a comment. Unknown keys are rejected.
//! A single `seed` drives the model, the synthetic suite, the benchmark and
//! the gradient check.

use std::fmt::Write as _;
use std::path::Path;

use crate::data::{GravityPolicy, SuiteConfig, GRAVITY};
use crate::eksa::BenchConfig;
use crate::error::{Error, Result};
use crate::eval::{EvalConfig, RTE_INTERVAL_S};
use crate::gradcheck::GradcheckConfig;
use crate::tensor::Op;
use crate::training::{parse, ModelConfig};

/// Settings for turning sequences into windows and trajectories.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub train_stride: usize,
    pub val_stride: usize,
    pub eval_stride: usize,
    /// Sequences held out for validation, taken from the end of the sorted list.
    pub val_sequences: usize,
    /// Accept sequences that still contain gravity.
    pub allow_gravity: bool,
    /// Applied by `preprocess`.
    pub remove_gravity: bool,
    pub gravity: f64,
    pub rte_interval_s: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            train_stride: 10,
            val_stride: 50,
            eval_stride: 10,
            val_sequences: 1,
            allow_gravity: false,
            remove_gravity: false,
            gravity: GRAVITY,
            rte_interval_s: RTE_INTERVAL_S,
        }
    }
}

impl PipelineConfig {
    pub fn policy(&self) -> GravityPolicy {
        if self.allow_gravity {
            GravityPolicy::AllowGravity
        } else {
            GravityPolicy::RequireRemoved
        }
    }

    pub fn eval_config(&self, window_size: usize) -> EvalConfig {
        EvalConfig {
            gravity: self.policy(),
            rte_interval_s: self.rte_interval_s,
            ..EvalConfig::new(window_size, self.eval_stride)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub suite: SuiteConfig,
    pub pipeline: PipelineConfig,
    pub bench: BenchConfig,
    pub gradcheck: GradcheckConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_str(&text, path)
    }

    /// Parses config text; errors carry `path` and the 1-based line.
    pub fn parse_str(text: &str, path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fail = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| fail(format!("expected `key = value`, got {line:?}")))?;
            cfg.set(key.trim(), value.trim()).map_err(|e| match e {
                Error::Config(msg) => fail(msg),
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one key. Unknown keys and malformed values are config errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if key == "seed" {
            self.set_seed(parse(key, value)?);
            return Ok(());
        }
        if self.model.apply(key, value)? {
            return Ok(());
        }
        let s = &mut self.suite;
        let p = &mut self.pipeline;
        let b = &mut self.bench;
        let g = &mut self.gradcheck;
        match key {
            "suite.lines" => s.lines = parse(key, value)?,
            "suite.circles" => s.circles = parse(key, value)?,
            "suite.lissajous" => s.lissajous = parse(key, value)?,
            "suite.duration_s" => s.duration = parse(key, value)?,
            "suite.sample_rate_hz" => s.sample_rate_hz = parse(key, value)?,
            "suite.speed_min" => s.speed_range.0 = parse(key, value)?,
            "suite.speed_max" => s.speed_range.1 = parse(key, value)?,
            "suite.radius_min" => s.radius_range.0 = parse(key, value)?,
            "suite.radius_max" => s.radius_range.1 = parse(key, value)?,
            "suite.gait_surge" => s.gait.surge = parse(key, value)?,
            "suite.gait_bounce" => s.gait.bounce = parse(key, value)?,
            "suite.gyro_noise_density" => s.noise.gyro_density = parse(key, value)?,
            "suite.accel_noise_density" => s.noise.accel_density = parse(key, value)?,
            "suite.include_gravity" => s.include_gravity = parse(key, value)?,
            "pipeline.train_stride" => p.train_stride = parse(key, value)?,
            "pipeline.val_stride" => p.val_stride = parse(key, value)?,
            "pipeline.eval_stride" => p.eval_stride = parse(key, value)?,
            "pipeline.val_sequences" => p.val_sequences = parse(key, value)?,
            "pipeline.allow_gravity" => p.allow_gravity = parse(key, value)?,
            "pipeline.remove_gravity" => p.remove_gravity = parse(key, value)?,
            "pipeline.gravity" => p.gravity = parse(key, value)?,
            "pipeline.rte_interval_s" => p.rte_interval_s = parse(key, value)?,
            "bench.n_grid" => {
                b.n_grid = value
                    .split(',')
                    .map(|v| parse(key, v))
                    .collect::<Result<_>>()?
            }
            "bench.seq_len" => b.seq_len = parse(key, value)?,
            "bench.repetitions" => b.repetitions = parse(key, value)?,
            "bench.taylor_order" => b.taylor_order = parse(key, value)?,
            "bench.sigma" => b.sigma = parse(key, value)?,
            "gradcheck.step" => g.step = parse(key, value)?,
            "gradcheck.tolerance" => g.tolerance = parse(key, value)?,
            "gradcheck.max_coords" => g.max_coords = parse(key, value)?,
            "gradcheck.fault" => {
                g.fault = match value {
                    "" | "none" => None,
                    op if Op::NAMES.contains(&op) => Some(op.to_string()),
                    op => return Err(Error::Config(format!("unknown op {op:?} for `{key}`"))),
                }
            }
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.model.seed = seed;
        self.suite.seed = seed;
        self.bench.seed = seed;
        self.gradcheck.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let p = &self.pipeline;
        if p.train_stride == 0 || p.val_stride == 0 || p.eval_stride == 0 {
            return Err(Error::Config("strides must be positive".into()));
        }
        if !(p.rte_interval_s > 0.0) || !(p.gravity >= 0.0) {
            return Err(Error::Config("rte interval and gravity must be positive".into()));
        }
        let s = &self.suite;
        if s.speed_range.0 > s.speed_range.1 || s.radius_range.0 > s.radius_range.1 {
            return Err(Error::Config("suite ranges must have min ≤ max".into()));
        }
        Ok(())
    }

    /// Every key with its resolved value, in a stable order.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut out = self.model.to_pairs();
        let s = &self.suite;
        let p = &self.pipeline;
        let b = &self.bench;
        let g = &self.gradcheck;
        let f = |v: f64| format!("{v:?}");
        let grid = b.n_grid.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(",");
        let rest = [
            ("suite.lines", s.lines.to_string()),
            ("suite.circles", s.circles.to_string()),
            ("suite.lissajous", s.lissajous.to_string()),
            ("suite.duration_s", f(s.duration)),
            ("suite.sample_rate_hz", f(s.sample_rate_hz)),
            ("suite.speed_min", f(s.speed_range.0)),
            ("suite.speed_max", f(s.speed_range.1)),
            ("suite.radius_min", f(s.radius_range.0)),
            ("suite.radius_max", f(s.radius_range.1)),
            ("suite.gait_surge", f(s.gait.surge)),
            ("suite.gait_bounce", f(s.gait.bounce)),
            ("suite.gyro_noise_density", f(s.noise.gyro_density)),
            ("suite.accel_noise_density", f(s.noise.accel_density)),
            ("suite.include_gravity", s.include_gravity.to_string()),
            ("pipeline.train_stride", p.train_stride.to_string()),
            ("pipeline.val_stride", p.val_stride.to_string()),
            ("pipeline.eval_stride", p.eval_stride.to_string()),
            ("pipeline.val_sequences", p.val_sequences.to_string()),
            ("pipeline.allow_gravity", p.allow_gravity.to_string()),
            ("pipeline.remove_gravity", p.remove_gravity.to_string()),
            ("pipeline.gravity", f(p.gravity)),
            ("pipeline.rte_interval_s", f(p.rte_interval_s)),
            ("bench.n_grid", grid),
            ("bench.seq_len", b.seq_len.to_string()),
            ("bench.repetitions", b.repetitions.to_string()),
            ("bench.taylor_order", b.taylor_order.to_string()),
            ("bench.sigma", f(b.sigma)),
            ("gradcheck.step", f(g.step)),
            ("gradcheck.tolerance", f(g.tolerance)),
            ("gradcheck.max_coords", g.max_coords.to_string()),
            ("gradcheck.fault", g.fault.clone().unwrap_or_else(|| "none".into())),
        ];
        out.extend(rest.into_iter().map(|(k, v)| (k.to_string(), v)));
        out
    }

    /// The resolved config as config-file text.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.to_pairs() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.set("seed", "17").unwrap();
        cfg.set("suite.speed_max", "2.5").unwrap();
        cfg.set("bench.n_grid", "8,16").unwrap();
        cfg.set("gradcheck.fault", "arccos").unwrap();
        cfg.set("eksa.enabled", "false").unwrap();
        let back = RunConfig::parse_str(&cfg.render(), Path::new("x.cfg")).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.suite.seed, 17);
        assert_eq!(back.gradcheck.seed, 17);
    }

    #[test]
    fn comments_blank_lines_and_defaults() {
        let text = "# header\n\nwindow_size = 100 # trailing\n";
        let cfg = RunConfig::parse_str(text, Path::new("a.cfg")).unwrap();
        assert_eq!(cfg.model.window_size, 100);
        assert_eq!(cfg.model.eksa.seq_len, 13);
        assert_eq!(cfg.pipeline, PipelineConfig::default());
    }

    #[test]
    fn errors_name_the_line() {
        let err = RunConfig::parse_str("seed = 1\nbogus = 3\n", Path::new("b.cfg")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        let err = RunConfig::parse_str("seed\n", Path::new("b.cfg")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
        let err = RunConfig::parse_str("epochs = lots\n", Path::new("b.cfg")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
        assert!(RunConfig::default().set("gradcheck.fault", "nope").is_err());
    }
}
