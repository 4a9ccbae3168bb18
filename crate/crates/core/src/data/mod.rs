//! IMU sequences: storage format, frame handling, windowing and the
//! synthetic trajectory generator.

mod frames;
mod io;
pub mod synth;
mod windows;

pub use frames::{
    quat_conj, quat_from_yaw, restore_gravity, remove_gravity, rotate, rotate_to_world,
    to_world_frame, WorldImu, GRAVITY,
};
pub use io::{read_sequence, write_sequence, write_sequence_to};
pub use synth::{
    stationary, suite_specs, synthesize, Gait, ImuBias, ImuNoise, Kinematics, PathShape,
    SuiteConfig, SynthSpec,
};
pub use windows::{make_windows, window_count, GravityPolicy, WindowBatch};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];
/// Unit quaternion `(w, x, y, z)`, body to world.
pub type Quat = [f64; 4];

/// Time-stamped IMU record stream with ground-truth positions.
#[derive(Debug, Clone, PartialEq)]
pub struct ImuSequence {
    pub sample_rate_hz: f64,
    /// Seconds, strictly increasing.
    pub t: Vec<f64>,
    /// Body-frame angular rate, rad/s.
    pub gyro: Vec<Vec3>,
    /// Body-frame specific force, m/s².
    pub accel: Vec<Vec3>,
    pub orientation: Vec<Quat>,
    /// World-frame position, m.
    pub gt_pos: Vec<Vec3>,
    pub gravity_removed: bool,
}

impl ImuSequence {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn duration(&self) -> f64 {
        match (self.t.first(), self.t.last()) {
            (Some(a), Some(b)) => b - a,
            _ => 0.0,
        }
    }

    /// Checks array lengths, quaternion norms and timestamp regularity.
    pub fn validate(&self) -> Result<()> {
        let n = self.t.len();
        if !(self.sample_rate_hz > 0.0) {
            return Err(Error::contract(format!(
                "sample rate must be positive, got {}",
                self.sample_rate_hz
            )));
        }
        if [self.gyro.len(), self.accel.len(), self.orientation.len(), self.gt_pos.len()]
            .iter()
            .any(|&m| m != n)
        {
            return Err(Error::contract("IMU sequence arrays differ in length"));
        }
        for (i, q) in self.orientation.iter().enumerate() {
            let norm = q.iter().map(|c| c * c).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(Error::contract(format!(
                    "quaternion at sample {i} has norm {norm}"
                )));
            }
        }
        let dt = 1.0 / self.sample_rate_hz;
        for (i, w) in self.t.windows(2).enumerate() {
            let d = w[1] - w[0];
            if d <= 0.0 {
                return Err(Error::contract(format!(
                    "timestamps not increasing at sample {}",
                    i + 1
                )));
            }
            if (d - dt).abs() > 0.01 * dt {
                return Err(Error::contract(format!(
                    "timestamp step {d} at sample {} deviates from 1/rate = {dt}",
                    i + 1
                )));
            }
        }
        Ok(())
    }

    /// Ground-truth planar position at a fractional sample index, linearly
    /// interpolated and clamped to the sequence.
    pub fn gt_xy_at(&self, index: f64) -> [f64; 2] {
        let last = self.len() - 1;
        let index = index.clamp(0.0, last as f64);
        let i0 = (index.floor() as usize).min(last);
        let i1 = (i0 + 1).min(last);
        let frac = index - i0 as f64;
        let (a, b) = (self.gt_pos[i0], self.gt_pos[i1]);
        [a[0] + frac * (b[0] - a[0]), a[1] + frac * (b[1] - a[1])]
    }
}
