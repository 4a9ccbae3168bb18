//! Finite-difference verification of every backward rule.
//!
//! Each case reduces its output to a scalar with a fixed random weighting,
//! `loss = Σ out ∘ R`, then compares tape gradients against central
//! differences on up to `max_coords` sampled coordinates per tensor. A plain
//! sum would not do: outputs that pass through a standardization sum to a
//! constant and would have zero gradient everywhere.

use std::io::Write;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::ResBlock;
use crate::chebykan::{ChebyKanConfig, ChebyKanLayer};
use crate::eksa::{EksaConfig, EksaLayer};
use crate::error::Result;
use crate::nn::{join, Module};
use crate::tensor::{ConvSpec, Op, Tape, Tensor, Var};
use crate::training::Head;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckConfig {
    /// Central-difference step.
    pub step: f64,
    pub tolerance: f64,
    pub max_coords: usize,
    pub seed: u64,
    /// Op whose backward rule is deliberately corrupted.
    pub fault: Option<String>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            max_coords: 64,
            seed: 0,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckRow {
    pub family: String,
    pub tensor: String,
    pub coords: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub rows: Vec<GradcheckRow>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed)
    }

    /// Families with at least one failing tensor, in report order.
    pub fn failing_families(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in self.rows.iter().filter(|r| !r.passed) {
            if !out.contains(&r.family) {
                out.push(r.family.clone());
            }
        }
        out
    }

    /// Names of single-op cases that failed.
    pub fn failing_ops(&self) -> Vec<String> {
        self.failing_families()
            .into_iter()
            .filter_map(|f| f.strip_prefix("op:").map(str::to_string))
            .collect()
    }

    pub fn write_table(&self, out: &mut impl Write) -> Result<()> {
        writeln!(out, "family,tensor,coords,max_rel_error,status")?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{:.3e},{}",
                r.family,
                r.tensor,
                r.coords,
                r.max_rel_error,
                if r.passed { "pass" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

/// `max |a − n| / max(max |a|, max |n|, 1e-6)` over the sampled coordinates.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
    let scale = analytic.iter().chain(numeric).map(|v| v.abs()).fold(1e-6, f64::max);
    diff / scale
}

type Forward<M> = dyn Fn(&M, &mut Tape, Option<Var>) -> Result<Var>;

struct Checker<'a> {
    cfg: &'a GradcheckConfig,
    rng: ChaCha8Rng,
    rows: Vec<GradcheckRow>,
}

impl Checker<'_> {
    fn weighted_loss<M: Module>(
        &self,
        module: &M,
        input: Option<&Tensor>,
        weights: &Tensor,
        fwd: &Forward<M>,
    ) -> Result<f64> {
        let mut tape = Tape::no_grad();
        let x = input.map(|t| tape.constant(t));
        let y = fwd(module, &mut tape, x)?;
        Ok(tape.value(y).iter().zip(weights.data()).map(|(a, b)| a * b).sum())
    }

    fn coords(&mut self, n: usize) -> Vec<usize> {
        if n <= self.cfg.max_coords {
            (0..n).collect()
        } else {
            let mut idx = sample(&mut self.rng, n, self.cfg.max_coords).into_vec();
            idx.sort_unstable();
            idx
        }
    }

    fn run<M: Module>(
        &mut self,
        family: &str,
        module: &mut M,
        input: Option<&Tensor>,
        fwd: &Forward<M>,
    ) -> Result<()> {
        let shape = {
            let mut tape = Tape::no_grad();
            let x = input.map(|t| tape.constant(t));
            let y = fwd(module, &mut tape, x)?;
            tape.shape(y).to_vec()
        };
        let weights = Tensor::from_fn(&shape, |_| self.rng.random_range(-1.0..1.0));

        let mut tape = Tape::new();
        if let Some(op) = &self.cfg.fault {
            tape.inject_fault(op);
        }
        let x = input.map(|t| tape.leaf(&t.clone().requiring_grad()));
        let y = fwd(module, &mut tape, x)?;
        let r = tape.constant(&weights);
        let weighted = tape.mul(y, r)?;
        let loss = tape.sum_all(weighted)?;
        tape.backward(loss)?;

        let mut analytic: Vec<(String, Vec<f64>)> = Vec::new();
        if let (Some(x), Some(t)) = (x, input) {
            let g = tape.grad(x).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec);
            analytic.push(("input".into(), g));
        }
        module.visit("", &mut |name, t| {
            let g = tape.param_grad(t).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec);
            analytic.push((name.to_string(), g));
        });

        let h = self.cfg.step;
        let offset = usize::from(input.is_some());
        for (slot, (name, grad)) in analytic.iter().enumerate() {
            let coords = self.coords(grad.len());
            let mut numeric = Vec::with_capacity(coords.len());
            for &j in &coords {
                let mut eval_at = |delta: f64| -> Result<f64> {
                    if slot < offset {
                        let mut xp = input.expect("input slot").clone();
                        xp.data_mut()[j] += delta;
                        self.weighted_loss(module, Some(&xp), &weights, fwd)
                    } else {
                        let old = set_coord(module, slot - offset, j, |v| v + delta);
                        let v = self.weighted_loss(module, input, &weights, fwd);
                        set_coord(module, slot - offset, j, |_| old);
                        v
                    }
                };
                numeric.push((eval_at(h)? - eval_at(-h)?) / (2.0 * h));
            }
            let picked: Vec<f64> = coords.iter().map(|&j| grad[j]).collect();
            let worst = relative_error(&picked, &numeric);
            self.rows.push(GradcheckRow {
                family: family.to_string(),
                tensor: name.clone(),
                coords: coords.len(),
                max_rel_error: worst,
                passed: worst < self.cfg.tolerance,
            });
        }
        Ok(())
    }
}

/// Rewrites coordinate `j` of the `k`-th visited tensor, returning the old value.
fn set_coord<M: Module>(module: &mut M, k: usize, j: usize, f: impl Fn(f64) -> f64) -> f64 {
    let mut i = 0;
    let mut old = 0.0;
    module.visit_mut("", &mut |_, t| {
        if i == k {
            old = t.data()[j];
            t.data_mut()[j] = f(old);
        }
        i += 1;
    });
    old
}

/// Free-standing named leaves, used by the single-op cases.
struct Leaves(Vec<(String, Tensor)>);

impl Module for Leaves {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for (n, t) in &self.0 {
            f(&join(prefix, n), t);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (n, t) in &mut self.0 {
            f(&join(prefix, n), t);
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi)).requiring_grad()
}

/// Values in `±[lo, hi]` with random sign, away from kinks at zero.
fn signed(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let v = rng.random_range(lo..hi);
        if rng.random_bool(0.5) {
            v
        } else {
            -v
        }
    })
    .requiring_grad()
}

type OpFn = fn(&mut Tape, &[Var]) -> Result<Var>;

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Vec<Tensor>, OpFn)> {
    let s = [3, 5];
    let mut u = |lo, hi| uniform(rng, &s, lo, hi);
    let mut cases: Vec<(&'static str, Vec<Tensor>, OpFn)> = vec![
        ("tanh", vec![u(-2.0, 2.0)], |t, v| t.tanh(v[0])),
        ("arccos", vec![u(-0.8, 0.8)], |t, v| t.acos(v[0])),
        ("cos", vec![u(-3.0, 3.0)], |t, v| t.cos(v[0])),
        ("exp", vec![u(-1.0, 1.0)], |t, v| t.exp(v[0])),
        ("square", vec![u(-2.0, 2.0)], |t, v| t.square(v[0])),
        ("sqrt", vec![u(0.5, 2.0)], |t, v| t.sqrt(v[0])),
        ("powi", vec![u(-1.5, 1.5)], |t, v| t.powi(v[0], 3)),
        ("scale", vec![u(-1.0, 1.0)], |t, v| t.scale(v[0], 1.7)),
        ("add_scalar", vec![u(-1.0, 1.0)], |t, v| t.add_scalar(v[0], 0.3)),
        ("add", vec![u(-1.0, 1.0), u(-1.0, 1.0)], |t, v| t.add(v[0], v[1])),
        ("sub", vec![u(-1.0, 1.0), u(-1.0, 1.0)], |t, v| t.sub(v[0], v[1])),
        ("mul", vec![u(-1.0, 1.0), u(-1.0, 1.0)], |t, v| t.mul(v[0], v[1])),
        ("div", vec![u(-1.0, 1.0), u(0.5, 2.0)], |t, v| t.div(v[0], v[1])),
        ("sum", vec![u(-1.0, 1.0)], |t, v| t.sum(v[0], 1)),
        ("mean", vec![u(-1.0, 1.0)], |t, v| t.mean(v[0], 0)),
        ("l2norm", vec![u(-1.0, 1.0)], |t, v| t.l2norm(v[0], 1)),
        ("reshape", vec![u(-1.0, 1.0)], |t, v| t.reshape(v[0], &[5, 3])),
        ("transpose", vec![u(-1.0, 1.0)], |t, v| t.transpose(v[0])),
        ("concat", vec![u(-1.0, 1.0), u(-1.0, 1.0)], |t, v| t.concat(&[v[0], v[1]], 1)),
        ("slice", vec![u(-1.0, 1.0)], |t, v| t.slice(v[0], 1, 1, 3)),
        ("interleave", vec![u(-1.0, 1.0), u(-1.0, 1.0)], |t, v| t.interleave(&[v[0], v[1]])),
        ("softmax_rows", vec![u(-2.0, 2.0)], |t, v| t.softmax_rows(v[0])),
    ];
    cases.push(("relu", vec![signed(rng, &s, 0.1, 1.0)], |t, v| t.relu(v[0])));
    cases.push(("clamp", vec![signed(rng, &s, 0.05, 0.4)], |t, v| t.clamp(v[0], -0.3, 0.3)));
    cases.push(("expand", vec![uniform(rng, &[3, 1], -1.0, 1.0)], |t, v| t.expand(v[0], 1, 4)));
    cases.push((
        "matmul",
        vec![uniform(rng, &[3, 4], -1.0, 1.0), uniform(rng, &[4, 2], -1.0, 1.0)],
        |t, v| t.matmul(v[0], v[1]),
    ));
    cases.push((
        "conv1d",
        vec![uniform(rng, &[4, 11], -1.0, 1.0), uniform(rng, &[6, 2, 3], -1.0, 1.0)],
        |t, v| t.conv1d(v[0], v[1], ConvSpec::new(2, 1, 2)),
    ));
    cases
}

/// Runs every layer family and every single-op case.
pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut checker = Checker {
        cfg,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9),
        rows: Vec::new(),
    };

    let mut unit_cfg = ChebyKanConfig::new(6, 4, 3);
    unit_cfg.groups = 2;
    let mut unit = ChebyKanLayer::new(unit_cfg, &mut rng)?;
    randomize_affine(&mut unit, &mut rng);
    let x = uniform(&mut rng, &[6, 32], -2.0, 2.0);
    checker.run("chebykan", &mut unit, Some(&x), &|m: &ChebyKanLayer, t, x| {
        m.forward(t, x.expect("input"))
    })?;

    let down = ChebyKanConfig {
        stride: 2,
        ..ChebyKanConfig::new(4, 8, 3)
    };
    let mut block = ResBlock::new(down, ChebyKanConfig::new(8, 8, 3), &mut rng)?;
    randomize_affine(&mut block, &mut rng);
    let x = uniform(&mut rng, &[4, 16], -2.0, 2.0);
    checker.run("resblock", &mut block, Some(&x), &|m: &ResBlock, t, x| {
        m.forward(t, x.expect("input"))
    })?;

    let same = ChebyKanConfig::new(4, 4, 2);
    let mut block = ResBlock::new(same, same, &mut rng)?;
    randomize_affine(&mut block, &mut rng);
    let x = uniform(&mut rng, &[4, 12], -2.0, 2.0);
    checker.run("resblock_identity", &mut block, Some(&x), &|m: &ResBlock, t, x| {
        m.forward(t, x.expect("input"))
    })?;

    for normalize in [true, false] {
        let mut ecfg = EksaConfig::new(6, 8);
        ecfg.normalize_output = normalize;
        let mut layer = EksaLayer::new(ecfg, &mut rng)?;
        let x = uniform(&mut rng, &[6, 8], -1.0, 1.0);
        let family = if normalize { "eksa_normalized" } else { "eksa_unnormalized" };
        checker.run(family, &mut layer, Some(&x), &|m: &EksaLayer, t, x| {
            m.forward(t, x.expect("input"))
        })?;
    }

    let mut head = Head::new(10, [8, 6, 2], &mut rng);
    head.visit_mut("", &mut |_, t| {
        for v in t.data_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
    });
    let x = uniform(&mut rng, &[1, 10], -1.0, 1.0);
    checker.run("head", &mut head, Some(&x), &|m: &Head, t, x| {
        m.forward(t, x.expect("input"))
    })?;

    for (name, tensors, f) in op_cases(&mut rng) {
        debug_assert!(Op::NAMES.contains(&name));
        let mut leaves = Leaves(
            tensors
                .into_iter()
                .enumerate()
                .map(|(i, t)| (["x", "y"][i].to_string(), t))
                .collect(),
        );
        let fwd = move |m: &Leaves, t: &mut Tape, _: Option<Var>| -> Result<Var> {
            let vars: Vec<Var> = m.0.iter().map(|(_, x)| t.param(x)).collect();
            f(t, &vars)
        };
        checker.run(&format!("op:{name}"), &mut leaves, None, &fwd)?;
    }
    Ok(GradcheckReport { rows: checker.rows })
}

/// Moves normalization scales and biases off their initial values so their
/// gradients are exercised in a generic state.
fn randomize_affine<M: Module>(module: &mut M, rng: &mut ChaCha8Rng) {
    module.visit_mut("", &mut |name, t| {
        if name.ends_with("norm.scale") || name.ends_with("norm.bias") {
            for v in t.data_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
        assert!((relative_error(&[1.0, 0.5], &[1.1, 0.5]) - 0.1 / 1.1).abs() < 1e-15);
        assert!(relative_error(&[1e-9], &[2e-9]) < 1e-2);
        assert!(relative_error(&[2.0, 1e-8], &[2.0, 2e-8]) < 1e-8);
    }

    #[test]
    fn every_op_has_a_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let names: Vec<&str> = op_cases(&mut rng).iter().map(|c| c.0).collect();
        for op in Op::NAMES {
            assert!(names.contains(op), "no gradcheck case for {op}");
        }
    }

    #[test]
    fn clean_run_passes_and_fault_is_named() {
        let report = run_gradcheck(&GradcheckConfig::default()).unwrap();
        let mut table = Vec::new();
        report.write_table(&mut table).unwrap();
        assert!(report.passed(), "{}", String::from_utf8_lossy(&table));
        for op in ["conv1d", "arccos"] {
            let cfg = GradcheckConfig {
                fault: Some(op.into()),
                ..GradcheckConfig::default()
            };
            let report = run_gradcheck(&cfg).unwrap();
            assert!(!report.passed());
            assert_eq!(report.failing_ops(), [op]);
        }
    }
}
