use super::{rotate_to_world, ImuSequence};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Whether windowing accepts sequences that still contain gravity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GravityPolicy {
    RequireRemoved,
    AllowGravity,
}

/// Stacked network inputs with their velocity targets.
#[derive(Debug, Clone)]
pub struct WindowBatch {
    /// `[B×6×W]`, rows ordered `gx gy gz ax ay az`, world frame.
    pub inputs: Tensor,
    /// `[B×2]` mean planar velocity per window, m/s.
    pub targets: Tensor,
    pub window_start_indices: Vec<usize>,
    pub window_size: usize,
}

impl WindowBatch {
    pub fn len(&self) -> usize {
        self.window_start_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.window_start_indices.is_empty()
    }

    /// The `[6×W]` input of window `i`.
    pub fn input(&self, i: usize) -> Tensor {
        let n = 6 * self.window_size;
        Tensor::new(&[6, self.window_size], self.inputs.data()[i * n..(i + 1) * n].to_vec())
            .expect("window slice matches its shape")
    }

    pub fn target(&self, i: usize) -> [f64; 2] {
        let t = self.targets.data();
        [t[2 * i], t[2 * i + 1]]
    }

    /// Concatenates batches with equal window size.
    pub fn concat(batches: &[WindowBatch]) -> Result<WindowBatch> {
        let first = batches
            .first()
            .ok_or_else(|| Error::contract("no window batches to concatenate"))?;
        let w = first.window_size;
        if batches.iter().any(|b| b.window_size != w) {
            return Err(Error::shape("window sizes differ between batches"));
        }
        let count: usize = batches.iter().map(|b| b.len()).sum();
        if count == 0 {
            return Err(Error::contract("all window batches are empty"));
        }
        let mut inputs = Vec::with_capacity(count * 6 * w);
        let mut targets = Vec::with_capacity(count * 2);
        let mut starts = Vec::with_capacity(count);
        for b in batches {
            inputs.extend_from_slice(b.inputs.data());
            targets.extend_from_slice(b.targets.data());
            starts.extend_from_slice(&b.window_start_indices);
        }
        Ok(WindowBatch {
            inputs: Tensor::new(&[count, 6, w], inputs)?,
            targets: Tensor::new(&[count, 2], targets)?,
            window_start_indices: starts,
            window_size: w,
        })
    }
}

/// Number of windows of `w` samples at `stride` in a sequence of `len`.
pub fn window_count(len: usize, w: usize, stride: usize) -> usize {
    if w == 0 || stride == 0 || w > len {
        0
    } else {
        (len - w) / stride + 1
    }
}

/// Slices a sequence into windows of `w` samples every `stride` samples.
///
/// Each target is the ground-truth planar displacement between the first and
/// last sample of the window divided by the time between them.
pub fn make_windows(
    seq: &ImuSequence,
    w: usize,
    stride: usize,
    policy: GravityPolicy,
) -> Result<WindowBatch> {
    seq.validate()?;
    if w < 2 || stride == 0 {
        return Err(Error::contract(format!(
            "window size must be at least 2 and stride positive, got W={w}, stride={stride}"
        )));
    }
    if w > seq.len() {
        return Err(Error::contract(format!(
            "window size {w} exceeds sequence length {}",
            seq.len()
        )));
    }
    if policy == GravityPolicy::RequireRemoved && !seq.gravity_removed {
        return Err(Error::contract(
            "sequence still contains gravity; remove it or allow gravity explicitly",
        ));
    }
    let world = rotate_to_world(seq);
    let count = window_count(seq.len(), w, stride);
    let span = (w - 1) as f64 / seq.sample_rate_hz;
    let mut inputs = Vec::with_capacity(count * 6 * w);
    let mut targets = Vec::with_capacity(count * 2);
    let mut starts = Vec::with_capacity(count);
    for k in 0..count {
        let start = k * stride;
        let end = start + w - 1;
        for axis in 0..3 {
            inputs.extend(world.gyro[start..=end].iter().map(|g| g[axis]));
        }
        for axis in 0..3 {
            inputs.extend(world.accel[start..=end].iter().map(|a| a[axis]));
        }
        let (a, b) = (seq.gt_pos[start], seq.gt_pos[end]);
        targets.push((b[0] - a[0]) / span);
        targets.push((b[1] - a[1]) / span);
        starts.push(start);
    }
    if targets.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite window target".into()));
    }
    Ok(WindowBatch {
        inputs: Tensor::new(&[count, 6, w], inputs)?,
        targets: Tensor::new(&[count, 2], targets)?,
        window_start_indices: starts,
        window_size: w,
    })
}
