//! Closed-form synthetic trajectories and the IMU readings they imply.
//!
//! A planar path `P(τ)` is traversed with an optional gait: a periodic time
//! warp `τ(t) = t + ε·sin(ω t)` produces forward surge and a vertical bounce
//! `z(t) = (b/ω²)(1 − cos ω t)` rides on top. The step frequency grows with
//! speed, so a window of IMU data carries the walking speed in its spectrum.
//! Orientation is yaw-only and follows the path tangent.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{quat_conj, quat_from_yaw, rotate, ImuSequence, Vec3, GRAVITY};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PathShape {
    Line,
    /// Turns left when `clockwise` is false.
    Circle { radius: f64, clockwise: bool },
    /// Figure-eight `(a·sin Ωτ, b·sin 2Ωτ)` with `Ω` set by the mean speed.
    Lissajous { a: f64, b: f64 },
}

impl PathShape {
    pub fn name(&self) -> &'static str {
        match self {
            PathShape::Line => "line",
            PathShape::Circle { .. } => "circle",
            PathShape::Lissajous { .. } => "lissajous",
        }
    }
}

/// White-noise densities; per-sample standard deviation is
/// `density·sqrt(rate)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ImuNoise {
    pub gyro_density: f64,
    pub accel_density: f64,
}

/// Constant sensor biases in the body frame.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ImuBias {
    pub gyro: Vec3,
    pub accel: Vec3,
}

/// Walking gait amplitudes in m/s². Zero means smooth motion.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Gait {
    pub surge: f64,
    pub bounce: f64,
}

impl Gait {
    /// Step frequency in Hz at walking speed `v`.
    pub fn step_hz(speed: f64) -> f64 {
        1.0 + 0.6 * speed
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    pub shape: PathShape,
    /// Mean speed, m/s.
    pub speed: f64,
    pub duration: f64,
    pub sample_rate_hz: f64,
    /// Initial heading, rad from world x.
    pub heading: f64,
    pub gait: Gait,
    pub noise: ImuNoise,
    pub bias: ImuBias,
    pub include_gravity: bool,
    pub seed: u64,
}

impl SynthSpec {
    pub fn new(shape: PathShape, speed: f64, duration: f64, sample_rate_hz: f64) -> Self {
        Self {
            shape,
            speed,
            duration,
            sample_rate_hz,
            heading: 0.0,
            gait: Gait::default(),
            noise: ImuNoise::default(),
            bias: ImuBias::default(),
            include_gravity: false,
            seed: 0,
        }
    }

    pub fn samples(&self) -> usize {
        (self.duration * self.sample_rate_hz).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.speed > 0.0) || !(self.duration > 0.0) || !(self.sample_rate_hz > 0.0) {
            return Err(Error::contract("speed, duration and rate must be positive"));
        }
        if self.samples() < 2 {
            return Err(Error::contract("synthetic sequence needs at least two samples"));
        }
        match self.shape {
            PathShape::Circle { radius, .. } if !(radius > 0.0) => {
                Err(Error::contract("circle radius must be positive"))
            }
            PathShape::Lissajous { a, b } if !(a > 0.0 && b > 0.0) => {
                Err(Error::contract("lissajous amplitudes must be positive"))
            }
            _ => {
                let gait = Path::new(self).gait_omega();
                if self.gait.surge / (self.speed * gait) >= 0.5 {
                    return Err(Error::contract("gait surge too strong for the speed"));
                }
                Ok(())
            }
        }
    }

    /// Noise-free kinematics at time `t`.
    pub fn kinematics(&self, t: f64) -> Kinematics {
        Path::new(self).at(t)
    }
}

/// World-frame state at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Kinematics {
    pub pos: Vec3,
    pub vel: Vec3,
    pub acc: Vec3,
    pub yaw: f64,
    pub yaw_rate: f64,
}

struct Path {
    shape: PathShape,
    speed: f64,
    heading: f64,
    /// Angular rate along the closed paths.
    omega: f64,
    gait: Gait,
}

impl Path {
    fn new(spec: &SynthSpec) -> Self {
        let omega = match spec.shape {
            PathShape::Line => 0.0,
            PathShape::Circle { radius, .. } => spec.speed / radius,
            PathShape::Lissajous { a, b } => spec.speed / lissajous_mean_rate(a, b),
        };
        Self {
            shape: spec.shape,
            speed: spec.speed,
            heading: spec.heading,
            omega,
            gait: spec.gait,
        }
    }

    fn gait_omega(&self) -> f64 {
        2.0 * PI * Gait::step_hz(self.speed)
    }

    /// Path value, first and second derivatives at `tau` in the path frame.
    fn local(&self, tau: f64) -> [[f64; 2]; 3] {
        let (v, w) = (self.speed, self.omega);
        match self.shape {
            PathShape::Line => [[v * tau, 0.0], [v, 0.0], [0.0, 0.0]],
            PathShape::Circle { radius: r, clockwise } => {
                let s = if clockwise { -1.0 } else { 1.0 };
                let (sn, cs) = (w * tau).sin_cos();
                [
                    [r * sn, s * r * (1.0 - cs)],
                    [r * w * cs, s * r * w * sn],
                    [-r * w * w * sn, s * r * w * w * cs],
                ]
            }
            PathShape::Lissajous { a, b } => {
                let (s1, c1) = (w * tau).sin_cos();
                let (s2, c2) = (2.0 * w * tau).sin_cos();
                [
                    [a * s1, b * s2],
                    [a * w * c1, 2.0 * b * w * c2],
                    [-a * w * w * s1, -4.0 * b * w * w * s2],
                ]
            }
        }
    }

    fn at(&self, t: f64) -> Kinematics {
        let wg = self.gait_omega();
        let eps = self.gait.surge / (self.speed * wg * wg);
        let (sg, cg) = (wg * t).sin_cos();
        let tau = t + eps * sg;
        let dtau = 1.0 + eps * wg * cg;
        let ddtau = -eps * wg * wg * sg;

        let [p, dp, ddp] = self.local(tau);
        let (sh, ch) = self.heading.sin_cos();
        let rot = |u: [f64; 2]| [ch * u[0] - sh * u[1], sh * u[0] + ch * u[1]];
        let pos = rot(p);
        let vel = rot([dp[0] * dtau, dp[1] * dtau]);
        let acc = rot([
            ddp[0] * dtau * dtau + dp[0] * ddtau,
            ddp[1] * dtau * dtau + dp[1] * ddtau,
        ]);
        let speed_sq = dp[0] * dp[0] + dp[1] * dp[1];
        let yaw = self.heading + dp[1].atan2(dp[0]);
        let yaw_rate = (dp[0] * ddp[1] - dp[1] * ddp[0]) / speed_sq * dtau;

        let bounce = self.gait.bounce / (wg * wg);
        Kinematics {
            pos: [pos[0], pos[1], bounce * (1.0 - cg)],
            vel: [vel[0], vel[1], bounce * wg * sg],
            acc: [acc[0], acc[1], self.gait.bounce * cg],
            yaw,
            yaw_rate,
        }
    }
}

/// Mean of `|d/du (a sin u, b sin 2u)|` over one period.
fn lissajous_mean_rate(a: f64, b: f64) -> f64 {
    const N: usize = 4096;
    let step = 2.0 * PI / N as f64;
    (0..N)
        .map(|i| {
            let u = (i as f64 + 0.5) * step;
            (a * a * u.cos().powi(2) + 4.0 * b * b * (2.0 * u).cos().powi(2)).sqrt()
        })
        .sum::<f64>()
        / N as f64
}

/// Generates the sequence described by `spec`. Ground truth is noise free;
/// sensor noise is drawn from a generator seeded by `spec.seed`.
pub fn synthesize(spec: &SynthSpec) -> Result<ImuSequence> {
    spec.validate()?;
    let path = Path::new(spec);
    let n = spec.samples();
    let rate = spec.sample_rate_hz;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let gyro_noise = normal(spec.noise.gyro_density * rate.sqrt())?;
    let accel_noise = normal(spec.noise.accel_density * rate.sqrt())?;

    let mut seq = empty(rate, n);
    for i in 0..n {
        let t = i as f64 / rate;
        let k = path.at(t);
        let q = quat_from_yaw(k.yaw);
        let g = if spec.include_gravity { GRAVITY } else { 0.0 };
        let specific = rotate(quat_conj(q), [k.acc[0], k.acc[1], k.acc[2] + g]);
        let rate_body = [0.0, 0.0, k.yaw_rate];
        seq.t.push(t);
        seq.gyro.push(perturb(rate_body, spec.bias.gyro, &gyro_noise, &mut rng));
        seq.accel.push(perturb(specific, spec.bias.accel, &accel_noise, &mut rng));
        seq.orientation.push(q);
        seq.gt_pos.push(k.pos);
    }
    seq.gravity_removed = !spec.include_gravity;
    Ok(seq)
}

/// A motionless device with identity orientation and gravity present.
pub fn stationary(duration: f64, sample_rate_hz: f64, noise: ImuNoise, seed: u64) -> Result<ImuSequence> {
    let n = (duration * sample_rate_hz).round() as usize;
    if n < 2 {
        return Err(Error::contract("stationary sequence needs at least two samples"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gyro_noise = normal(noise.gyro_density * sample_rate_hz.sqrt())?;
    let accel_noise = normal(noise.accel_density * sample_rate_hz.sqrt())?;
    let mut seq = empty(sample_rate_hz, n);
    for i in 0..n {
        seq.t.push(i as f64 / sample_rate_hz);
        seq.gyro.push(perturb([0.0; 3], [0.0; 3], &gyro_noise, &mut rng));
        seq.accel.push(perturb([0.0, 0.0, GRAVITY], [0.0; 3], &accel_noise, &mut rng));
        seq.orientation.push([1.0, 0.0, 0.0, 0.0]);
        seq.gt_pos.push([0.0; 3]);
    }
    Ok(seq)
}

fn empty(rate: f64, n: usize) -> ImuSequence {
    ImuSequence {
        sample_rate_hz: rate,
        t: Vec::with_capacity(n),
        gyro: Vec::with_capacity(n),
        accel: Vec::with_capacity(n),
        orientation: Vec::with_capacity(n),
        gt_pos: Vec::with_capacity(n),
        gravity_removed: false,
    }
}

fn normal(std: f64) -> Result<Normal<f64>> {
    Normal::new(0.0, std).map_err(|e| Error::contract(format!("noise density: {e}")))
}

fn perturb(v: Vec3, bias: Vec3, noise: &Normal<f64>, rng: &mut ChaCha8Rng) -> Vec3 {
    let mut out = [0.0; 3];
    for k in 0..3 {
        out[k] = v[k] + bias[k] + noise.sample(rng);
    }
    out
}

/// Recipe for a randomized collection of trajectories.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteConfig {
    pub lines: usize,
    pub circles: usize,
    pub lissajous: usize,
    pub duration: f64,
    pub sample_rate_hz: f64,
    pub speed_range: (f64, f64),
    pub radius_range: (f64, f64),
    pub gait: Gait,
    pub noise: ImuNoise,
    pub include_gravity: bool,
    pub seed: u64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            lines: 3,
            circles: 3,
            lissajous: 2,
            duration: 120.0,
            sample_rate_hz: 200.0,
            speed_range: (0.6, 1.6),
            radius_range: (3.0, 8.0),
            gait: Gait {
                surge: 1.0,
                bounce: 1.5,
            },
            noise: ImuNoise {
                gyro_density: 1e-3,
                accel_density: 4e-3,
            },
            include_gravity: true,
            seed: 0,
        }
    }
}

/// Draws one spec per requested trajectory. Heading, speed, radius and turn
/// direction vary per trajectory; the same config always yields the same list.
pub fn suite_specs(cfg: &SuiteConfig) -> Vec<SynthSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let kinds = std::iter::repeat_n(0, cfg.lines)
        .chain(std::iter::repeat_n(1, cfg.circles))
        .chain(std::iter::repeat_n(2, cfg.lissajous));
    kinds
        .map(|kind| {
            let speed = rng.random_range(cfg.speed_range.0..=cfg.speed_range.1);
            let heading = rng.random_range(-PI..PI);
            let shape = match kind {
                0 => PathShape::Line,
                1 => PathShape::Circle {
                    radius: rng.random_range(cfg.radius_range.0..=cfg.radius_range.1),
                    clockwise: rng.random_bool(0.5),
                },
                _ => {
                    let a = rng.random_range(2.0 * cfg.radius_range.0..=2.0 * cfg.radius_range.1);
                    PathShape::Lissajous {
                        a,
                        b: a * rng.random_range(0.3..=0.6),
                    }
                }
            };
            SynthSpec {
                shape,
                speed,
                duration: cfg.duration,
                sample_rate_hz: cfg.sample_rate_hz,
                heading,
                gait: cfg.gait,
                noise: cfg.noise,
                bias: ImuBias::default(),
                include_gravity: cfg.include_gravity,
                seed: rng.random(),
            }
        })
        .collect()
}
