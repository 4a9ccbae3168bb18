//! Trajectory reconstruction from window velocities and the ATE, RTE and
//! PDE metrics.
//!
//! Window `k` starts at sample `k·s` and its prediction is held over the `s`
//! samples centred on the window middle. Integration therefore runs on knots
//! spaced `s/rate` apart, starting half a stride before the first window
//! centre at the ground-truth position.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::data::{make_windows, GravityPolicy, ImuSequence};
use crate::error::{Error, Result};
use crate::training::{predict_batch, ResKacNet};

/// Interval used by RTE, seconds.
pub const RTE_INTERVAL_S: f64 = 60.0;

pub type Xy = [f64; 2];

/// `p₀ = origin`, `p_{k+1} = p_k + v_k·dt`. Returns `v.len() + 1` points.
pub fn integrate_velocity(v: &[Xy], dt: f64, origin: Xy) -> Result<Vec<Xy>> {
    if !(dt > 0.0) {
        return Err(Error::contract(format!("dt must be positive, got {dt}")));
    }
    let mut out = Vec::with_capacity(v.len() + 1);
    let mut p = origin;
    out.push(p);
    for vk in v {
        p = [p[0] + vk[0] * dt, p[1] + vk[1] * dt];
        out.push(p);
    }
    Ok(out)
}

fn dist(a: Xy, b: Xy) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn same_len(pred: &[Xy], gt: &[Xy]) -> Result<()> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::contract(format!(
            "trajectories have {} and {} points",
            pred.len(),
            gt.len()
        )));
    }
    Ok(())
}

/// Root mean square of the per-point distances, without alignment.
pub fn ate(pred: &[Xy], gt: &[Xy]) -> Result<f64> {
    same_len(pred, gt)?;
    let ss: f64 = pred.iter().zip(gt).map(|(&p, &g)| dist(p, g).powi(2)).sum();
    Ok((ss / pred.len() as f64).sqrt())
}

/// Relative trajectory error with its effective interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rte {
    pub value: f64,
    /// Interval actually measured, seconds.
    pub interval_s: f64,
    /// True when the trajectory was shorter than the requested interval and
    /// the error was scaled up from the longest available one.
    pub scaled: bool,
}

/// RMSE of the displacement mismatch over every `interval_s` span.
///
/// When the trajectory is shorter than `interval_s`, the whole trajectory
/// is used and the result is multiplied by `interval_s / duration`.
pub fn rte(pred: &[Xy], gt: &[Xy], interval_s: f64, dt: f64) -> Result<Rte> {
    same_len(pred, gt)?;
    if !(dt > 0.0) || !(interval_s > 0.0) {
        return Err(Error::contract("rte needs positive dt and interval"));
    }
    if pred.len() < 2 {
        return Err(Error::contract("rte needs at least two points"));
    }
    let wanted = (interval_s / dt).round().max(1.0) as usize;
    let (n, scaled) = if wanted < pred.len() {
        (wanted, false)
    } else {
        (pred.len() - 1, true)
    };
    let count = pred.len() - n;
    let ss: f64 = (0..count)
        .map(|i| {
            let dp = [pred[i + n][0] - pred[i][0], pred[i + n][1] - pred[i][1]];
            let dg = [gt[i + n][0] - gt[i][0], gt[i + n][1] - gt[i][1]];
            dist(dp, dg).powi(2)
        })
        .sum();
    let raw = (ss / count as f64).sqrt();
    let measured = n as f64 * dt;
    Ok(Rte {
        value: if scaled { raw * interval_s / measured } else { raw },
        interval_s: measured,
        scaled,
    })
}

/// Sum of ground-truth segment lengths.
pub fn path_length(gt: &[Xy]) -> f64 {
    gt.windows(2).map(|w| dist(w[0], w[1])).sum()
}

/// Final position error over ground-truth path length.
pub fn pde(pred: &[Xy], gt: &[Xy]) -> Result<f64> {
    same_len(pred, gt)?;
    let len = path_length(gt);
    if !(len > 0.0) {
        return Err(Error::contract("ground-truth path has zero length"));
    }
    Ok(dist(pred[pred.len() - 1], gt[gt.len() - 1]) / len)
}

/// Window geometry used to turn predictions into a trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    pub window_size: usize,
    pub stride: usize,
    pub gravity: GravityPolicy,
    pub rte_interval_s: f64,
}

impl EvalConfig {
    pub fn new(window_size: usize, stride: usize) -> Self {
        Self {
            window_size,
            stride,
            gravity: GravityPolicy::RequireRemoved,
            rte_interval_s: RTE_INTERVAL_S,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryReport {
    pub t: Vec<f64>,
    pub pred_xy: Vec<Xy>,
    pub gt_xy: Vec<Xy>,
    pub ate: f64,
    pub rte: Rte,
    pub pde: f64,
    /// Per-point position errors, ascending.
    pub cdf_samples: Vec<f64>,
    pub traj_length: f64,
}

impl TrajectoryReport {
    /// Writes `metrics.csv`, `traj.csv`, `cdf.csv` and `report.txt`.
    pub fn write_bundle(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut m = fs::File::create(dir.join("metrics.csv"))?;
        writeln!(m, "ate,rte,pde,traj_len_m")?;
        writeln!(m, "{:?},{:?},{:?},{:?}", self.ate, self.rte.value, self.pde, self.traj_length)?;

        let mut t = std::io::BufWriter::new(fs::File::create(dir.join("traj.csv"))?);
        writeln!(t, "t,pred_x,pred_y,gt_x,gt_y")?;
        for ((ti, p), g) in self.t.iter().zip(&self.pred_xy).zip(&self.gt_xy) {
            writeln!(t, "{ti:?},{:?},{:?},{:?},{:?}", p[0], p[1], g[0], g[1])?;
        }
        t.flush()?;

        let mut c = std::io::BufWriter::new(fs::File::create(dir.join("cdf.csv"))?);
        writeln!(c, "error_m,fraction")?;
        let n = self.cdf_samples.len() as f64;
        for (i, e) in self.cdf_samples.iter().enumerate() {
            writeln!(c, "{e:?},{:?}", (i + 1) as f64 / n)?;
        }
        c.flush()?;

        let mut r = fs::File::create(dir.join("report.txt"))?;
        writeln!(r, "points = {}", self.t.len())?;
        writeln!(r, "rte_interval_s = {:?}", self.rte.interval_s)?;
        writeln!(r, "rte_scaled_to_60s = {}", self.rte.scaled)?;
        Ok(())
    }
}

/// Integrates per-window velocities over `seq` and scores the result.
pub fn evaluate_predictions(seq: &ImuSequence, velocities: &[Xy], cfg: &EvalConfig) -> Result<TrajectoryReport> {
    let (w, s) = (cfg.window_size, cfg.stride);
    if velocities.is_empty() || s == 0 || w < 2 {
        return Err(Error::contract("evaluation needs predictions, a stride and a window"));
    }
    let rate = seq.sample_rate_hz;
    let dt = s as f64 / rate;
    let first_knot = (w - 1) as f64 / 2.0 - s as f64 / 2.0;
    let knots: Vec<f64> = (0..=velocities.len()).map(|k| first_knot + (k * s) as f64).collect();
    let gt_xy: Vec<Xy> = knots.iter().map(|&i| seq.gt_xy_at(i)).collect();
    let pred_xy = integrate_velocity(velocities, dt, gt_xy[0])?;
    let t = knots.iter().map(|&i| seq.t[0] + i / rate).collect();
    let mut cdf_samples: Vec<f64> = pred_xy.iter().zip(&gt_xy).map(|(&p, &g)| dist(p, g)).collect();
    cdf_samples.sort_by(f64::total_cmp);
    Ok(TrajectoryReport {
        ate: ate(&pred_xy, &gt_xy)?,
        rte: rte(&pred_xy, &gt_xy, cfg.rte_interval_s, dt)?,
        pde: pde(&pred_xy, &gt_xy)?,
        traj_length: path_length(&gt_xy),
        cdf_samples,
        t,
        pred_xy,
        gt_xy,
    })
}

/// Slides the model over `seq`, integrates its velocities and scores them.
pub fn evaluate_sequence(
    model: &ResKacNet,
    seq: &ImuSequence,
    cfg: &EvalConfig,
    threads: usize,
) -> Result<TrajectoryReport> {
    let windows = make_windows(seq, cfg.window_size, cfg.stride, cfg.gravity)?;
    let v = predict_batch(model, &windows, threads)?;
    evaluate_predictions(seq, &v, cfg)
}

/// The same trajectory scored with zero velocity everywhere.
pub fn zero_velocity_report(seq: &ImuSequence, cfg: &EvalConfig) -> Result<TrajectoryReport> {
    let n = crate::data::window_count(seq.len(), cfg.window_size, cfg.stride);
    evaluate_predictions(seq, &vec![[0.0, 0.0]; n], cfg)
}
