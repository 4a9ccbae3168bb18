use std::collections::HashMap;

use super::kernels::{gemm, ConvGeometry};
use super::{numel, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Stride, padding and grouping of a 1-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    /// Requires `groups == in_channels == out_channels`.
    pub depthwise: bool,
}

impl ConvSpec {
    pub fn new(stride: usize, padding: usize, groups: usize) -> Self {
        Self {
            stride,
            padding,
            groups,
            depthwise: false,
        }
    }

    pub fn depthwise(channels: usize, padding: usize) -> Self {
        Self {
            stride: 1,
            padding,
            groups: channels,
            depthwise: true,
        }
    }
}

/// A recorded operation. Indices refer to earlier nodes on the same tape.
#[derive(Debug, Clone)]
pub enum Op {
    Leaf,
    Tanh(usize),
    Acos(usize),
    Cos(usize),
    Exp(usize),
    Square(usize),
    Sqrt(usize),
    Relu(usize),
    Powi(usize, i32),
    Scale(usize, f64),
    AddScalar(usize, f64),
    Clamp(usize, f64, f64),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    MatMul(usize, usize),
    Conv1d(usize, usize, ConvGeometry),
    Sum(usize, usize),
    Mean(usize, usize),
    L2Norm(usize, usize),
    Expand(usize, usize),
    Reshape(usize),
    Transpose(usize),
    Concat(Vec<usize>, usize),
    Slice(usize, usize, usize),
    Interleave(Vec<usize>),
    SoftmaxRows(usize),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Tanh(_) => "tanh",
            Op::Acos(_) => "arccos",
            Op::Cos(_) => "cos",
            Op::Exp(_) => "exp",
            Op::Square(_) => "square",
            Op::Sqrt(_) => "sqrt",
            Op::Relu(_) => "relu",
            Op::Powi(..) => "powi",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Clamp(..) => "clamp",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::MatMul(..) => "matmul",
            Op::Conv1d(..) => "conv1d",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::L2Norm(..) => "l2norm",
            Op::Expand(..) => "expand",
            Op::Reshape(_) => "reshape",
            Op::Transpose(_) => "transpose",
            Op::Concat(..) => "concat",
            Op::Slice(..) => "slice",
            Op::Interleave(_) => "interleave",
            Op::SoftmaxRows(_) => "softmax_rows",
        }
    }

    /// Every op name a fault can be injected into.
    pub const NAMES: &'static [&'static str] = &[
        "tanh",
        "arccos",
        "cos",
        "exp",
        "square",
        "sqrt",
        "relu",
        "powi",
        "scale",
        "add_scalar",
        "clamp",
        "add",
        "sub",
        "mul",
        "div",
        "matmul",
        "conv1d",
        "sum",
        "mean",
        "l2norm",
        "expand",
        "reshape",
        "transpose",
        "concat",
        "slice",
        "interleave",
        "softmax_rows",
    ];

    pub fn parents(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Tanh(x)
            | Op::Acos(x)
            | Op::Cos(x)
            | Op::Exp(x)
            | Op::Square(x)
            | Op::Sqrt(x)
            | Op::Relu(x)
            | Op::Powi(x, _)
            | Op::Scale(x, _)
            | Op::AddScalar(x, _)
            | Op::Clamp(x, ..)
            | Op::Sum(x, _)
            | Op::Mean(x, _)
            | Op::L2Norm(x, _)
            | Op::Expand(x, _)
            | Op::Reshape(x)
            | Op::Transpose(x)
            | Op::Slice(x, ..)
            | Op::SoftmaxRows(x) => vec![*x],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::MatMul(a, b)
            | Op::Conv1d(a, b, _) => vec![*a, *b],
            Op::Concat(parts, _) | Op::Interleave(parts) => parts.clone(),
        }
    }
}

struct Node {
    value: Vec<f64>,
    shape: Vec<usize>,
    op: Op,
    requires_grad: bool,
}

/// Splits `shape` around `axis` into (outer, axis length, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

fn add_into(dst: &mut Option<Vec<f64>>, src: Vec<f64>) {
    match dst {
        Some(buf) => buf.iter_mut().zip(&src).for_each(|(d, s)| *d += s),
        None => *dst = Some(src),
    }
}

/// Append-only record of a forward computation.
///
/// Operations are stored in execution order, so the tape is topologically
/// sorted by construction. [`Tape::backward`] walks it in reverse and
/// accumulates gradients into every leaf that requires them; calling it twice
/// without [`Tape::zero_grad`] adds the second pass on top of the first.
pub struct Tape {
    nodes: Vec<Node>,
    leaf_grads: HashMap<usize, Vec<f64>>,
    params: HashMap<u64, Var>,
    grad_enabled: bool,
    fault: Option<String>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaf_grads: HashMap::new(),
            params: HashMap::new(),
            grad_enabled: true,
            fault: None,
        }
    }

    /// A tape that records values only; nothing on it requires a gradient.
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    /// Deliberately corrupts the backward rule of the named op (its gradient
    /// is scaled by 1.1). Only useful for exercising the gradient checker.
    pub fn inject_fault(&mut self, op_name: &str) {
        self.fault = Some(op_name.to_string());
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn op(&self, v: Var) -> &Op {
        &self.nodes[v.0].op
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copies a recorded value out as a fresh tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("recorded shapes are valid")
    }

    /// Records a tensor as a leaf. It requires a gradient iff the tensor does
    /// and the tape is not in no-grad mode.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let rg = t.requires_grad() && self.grad_enabled;
        self.nodes.push(Node {
            value: t.data().to_vec(),
            shape: t.shape().to_vec(),
            op: Op::Leaf,
            requires_grad: rg,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf that never requires a gradient.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.nodes.push(Node {
            value: t.data().to_vec(),
            shape: t.shape().to_vec(),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a parameter; binding the same tensor again returns the same var.
    pub fn param(&mut self, t: &Tensor) -> Var {
        if let Some(&v) = self.params.get(&t.id()) {
            return v;
        }
        let v = self.leaf(t);
        self.params.insert(t.id(), v);
        v
    }

    /// Accumulated gradient of a leaf, if any reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads.get(&v.0).map(Vec::as_slice)
    }

    pub fn param_grad(&self, t: &Tensor) -> Option<&[f64]> {
        self.params.get(&t.id()).and_then(|&v| self.grad(v))
    }

    /// Adds this tape's gradient for `t` into `t`'s own gradient buffer.
    pub fn write_grad(&self, t: &mut Tensor) -> Result<()> {
        match self.param_grad(t) {
            Some(g) => {
                let g = g.to_vec();
                t.accumulate_grad(&g)
            }
            None => Ok(()),
        }
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.clear();
    }

    fn push(&mut self, value: Vec<f64>, shape: Vec<usize>, op: Op) -> Result<Var> {
        debug_assert_eq!(value.len(), numel(&shape));
        let parents = op.parents();
        let requires_grad =
            self.grad_enabled && parents.iter().any(|&p| self.nodes[p].requires_grad);
        if cfg!(debug_assertions)
            && !value.iter().all(|v| v.is_finite())
            && parents
                .iter()
                .all(|&p| self.nodes[p].value.iter().all(|v| v.is_finite()))
        {
            return Err(Error::Numerical(format!(
                "{} produced non-finite values from finite inputs",
                op.name()
            )));
        }
        self.nodes.push(Node {
            value,
            shape,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let n = &self.nodes[x.0];
        let value = n.value.iter().map(|&v| f(v)).collect();
        let shape = n.shape.clone();
        self.push(value, shape, op)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Tanh(x.0), f64::tanh)
    }

    /// Errors with a domain error if any input lies outside `[-1, 1]`.
    pub fn acos(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.nodes[x.0].value.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::Domain(format!("arccos input {bad} outside [-1, 1]")));
        }
        self.unary(x, Op::Acos(x.0), f64::acos)
    }

    pub fn cos(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Cos(x.0), f64::cos)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Exp(x.0), f64::exp)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Square(x.0), |v| v * v)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.nodes[x.0].value.iter().find(|v| **v < 0.0) {
            return Err(Error::Domain(format!("sqrt of negative value {bad}")));
        }
        self.unary(x, Op::Sqrt(x.0), f64::sqrt)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Relu(x.0), |v| if v < 0.0 { 0.0 } else { v })
    }

    pub fn powi(&mut self, x: Var, n: i32) -> Result<Var> {
        self.unary(x, Op::Powi(x.0, n), |v| v.powi(n))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, Op::Scale(x.0, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, Op::AddScalar(x.0, c), |v| v + c)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(Error::Domain(format!("clamp bounds {lo} > {hi}")));
        }
        self.unary(x, Op::Clamp(x.0, lo, hi), |v| v.clamp(lo, hi))
    }

    /// Shared shape rule of the binary elementwise ops: the right operand
    /// has the same shape as the left, or holds a single broadcast value.
    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        let value: Vec<f64> = if na.shape == nb.shape {
            na.value.iter().zip(&nb.value).map(|(&x, &y)| f(x, y)).collect()
        } else if nb.value.len() == 1 {
            let y = nb.value[0];
            na.value.iter().map(|&x| f(x, y)).collect()
        } else {
            return Err(Error::shape(format!(
                "{}: operand shapes {:?} and {:?} differ",
                op.name(),
                na.shape,
                nb.shape
            )));
        };
        let shape = na.shape.clone();
        self.push(value, shape, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a.0, b.0), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a.0, b.0), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a.0, b.0), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.nodes[b.0].value.iter().any(|&v| v == 0.0) {
            return Err(Error::Domain("division by zero".into()));
        }
        self.binary(a, b, Op::Div(a.0, b.0), |x, y| x / y)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(format!("matmul of {sa:?} by {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            &self.nodes[a.0].value,
            false,
            &self.nodes[b.0].value,
            false,
            &mut out,
            false,
        );
        self.push(out, vec![m, n], Op::MatMul(a.0, b.0))
    }

    /// Grouped cross-correlation of `x: [Cin×L]` with `w: [Cout×(Cin/groups)×K]`.
    pub fn conv1d(&mut self, x: Var, w: Var, spec: ConvSpec) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 2 || sw.len() != 3 {
            return Err(Error::shape(format!(
                "conv1d expects x [C×L] and w [Cout×Cin/g×K], got {sx:?} and {sw:?}"
            )));
        }
        let (cin, len) = (sx[0], sx[1]);
        let (cout, cin_g, k) = (sw[0], sw[1], sw[2]);
        let g = spec.groups;
        if spec.stride == 0 || g == 0 {
            return Err(Error::shape("conv1d stride and groups must be positive"));
        }
        if cin % g != 0 || cout % g != 0 || cin / g != cin_g {
            return Err(Error::shape(format!(
                "conv1d: {cin} input / {cout} output channels incompatible with {g} groups \
                 and weight {sw:?}"
            )));
        }
        if spec.depthwise && (g != cin || cout != cin) {
            return Err(Error::shape(format!(
                "depthwise conv1d needs groups == in == out channels, got {g}, {cin}, {cout}"
            )));
        }
        if len + 2 * spec.padding < k {
            return Err(Error::shape(format!(
                "conv1d: kernel {k} longer than padded input {}",
                len + 2 * spec.padding
            )));
        }
        let geo = ConvGeometry {
            in_channels: cin,
            out_channels: cout,
            length: len,
            kernel: k,
            stride: spec.stride,
            padding: spec.padding,
            groups: g,
        };
        let out = geo.forward(&self.nodes[x.0].value, &self.nodes[w.0].value);
        self.push(out, vec![cout, geo.out_length()], Op::Conv1d(x.0, w.0, geo))
    }

    fn reduce(&mut self, x: Var, axis: usize, op: Op) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(format!("axis {axis} invalid for shape {shape:?}")));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let xs = &self.nodes[x.0].value;
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..n {
                let base = (o * n + a) * inner;
                for i in 0..inner {
                    let v = xs[base + i];
                    out[o * inner + i] += if matches!(op, Op::L2Norm(..)) { v * v } else { v };
                }
            }
        }
        match op {
            Op::Mean(..) => out.iter_mut().for_each(|v| *v /= n as f64),
            Op::L2Norm(..) => out.iter_mut().for_each(|v| *v = v.sqrt()),
            _ => {}
        }
        let mut oshape = shape;
        oshape[axis] = 1;
        self.push(out, oshape, op)
    }

    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, axis, Op::Sum(x.0, axis))
    }

    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, axis, Op::Mean(x.0, axis))
    }

    pub fn l2norm(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, axis, Op::L2Norm(x.0, axis))
    }

    /// Sum of every element, as a `[1]` tensor.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let n = self.nodes[x.0].value.len();
        let flat = self.reshape(x, &[n])?;
        self.sum(flat, 0)
    }

    /// Mean of every element, as a `[1]` tensor.
    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.nodes[x.0].value.len();
        let flat = self.reshape(x, &[n])?;
        self.mean(flat, 0)
    }

    /// Repeats a size-1 axis `size` times.
    pub fn expand(&mut self, x: Var, axis: usize, size: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape[axis] != 1 || size == 0 {
            return Err(Error::shape(format!(
                "cannot expand axis {axis} of {shape:?} to {size}"
            )));
        }
        let (outer, _, inner) = split_axis(&shape, axis);
        let xs = &self.nodes[x.0].value;
        let mut out = Vec::with_capacity(outer * size * inner);
        for o in 0..outer {
            let chunk = &xs[o * inner..(o + 1) * inner];
            for _ in 0..size {
                out.extend_from_slice(chunk);
            }
        }
        let mut oshape = shape;
        oshape[axis] = size;
        self.push(out, oshape, Op::Expand(x.0, axis))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.nodes[x.0].value.len() || shape.contains(&0) {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape(x)
            )));
        }
        let value = self.nodes[x.0].value.clone();
        self.push(value, shape.to_vec(), Op::Reshape(x.0))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(Error::shape(format!("transpose needs 2-D input, got {shape:?}")));
        }
        let value = transpose(&self.nodes[x.0].value, shape[0], shape[1]);
        self.push(value, vec![shape[1], shape[0]], Op::Transpose(x.0))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape(format!("axis {axis} invalid for shape {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape(format!(
                    "concat along {axis}: {s:?} incompatible with {base:?}"
                )));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let n = self.nodes[p.0].shape[axis];
                out.extend_from_slice(&self.nodes[p.0].value[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut oshape = base;
        oshape[axis] = total;
        self.push(out, oshape, Op::Concat(parts.iter().map(|v| v.0).collect(), axis))
    }

    /// `len` consecutive entries of `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape(format!(
                "slice {start}..{} of axis {axis} out of range for {shape:?}",
                start + len
            )));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let xs = &self.nodes[x.0].value;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&xs[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        self.push(out, oshape, Op::Slice(x.0, axis, start))
    }

    /// Interleaves `k` tensors of shape `[C×L]` row by row into `[(C·k)×L]`:
    /// output row `c·k + j` is row `c` of part `j`.
    pub fn interleave(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("interleave of zero tensors"))?;
        let shape = self.shape(*first).to_vec();
        if shape.len() != 2 || parts.iter().any(|&p| self.shape(p) != shape.as_slice()) {
            return Err(Error::shape("interleave needs equal 2-D parts"));
        }
        let (c, l, k) = (shape[0], shape[1], parts.len());
        let mut out = Vec::with_capacity(c * k * l);
        for row in 0..c {
            for &p in parts {
                out.extend_from_slice(&self.nodes[p.0].value[row * l..(row + 1) * l]);
            }
        }
        self.push(out, vec![c * k, l], Op::Interleave(parts.iter().map(|v| v.0).collect()))
    }

    /// Row-wise softmax of a 2-D tensor.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(Error::shape(format!("softmax_rows needs 2-D input, got {shape:?}")));
        }
        let cols = shape[1];
        let mut out = self.nodes[x.0].value.clone();
        for row in out.chunks_mut(cols) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        self.push(out, shape, Op::SoftmaxRows(x.0))
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut pending: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        pending[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(mut g) = pending[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                add_into_map(&mut self.leaf_grads, i, g);
                continue;
            }
            if self.fault.as_deref() == Some(node.op.name()) {
                g.iter_mut().for_each(|v| *v *= 1.1);
            }
            for (parent, contrib) in self.vjp(i, &g) {
                if self.nodes[parent].requires_grad {
                    add_into(&mut pending[parent], contrib);
                }
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `i` for upstream gradient `g`.
    fn vjp(&self, i: usize, g: &[f64]) -> Vec<(usize, Vec<f64>)> {
        let node = &self.nodes[i];
        let y = &node.value;
        let val = |p: usize| &self.nodes[p].value;
        let map1 = |x: usize, f: &dyn Fn(usize) -> f64| -> Vec<(usize, Vec<f64>)> {
            vec![(x, (0..g.len()).map(f).collect())]
        };
        match node.op {
            Op::Leaf => vec![],
            Op::Tanh(x) => map1(x, &|j| g[j] * (1.0 - y[j] * y[j])),
            Op::Acos(x) => {
                let xs = val(x);
                map1(x, &|j| -g[j] / (1.0 - xs[j] * xs[j]).sqrt())
            }
            Op::Cos(x) => {
                let xs = val(x);
                map1(x, &|j| -g[j] * xs[j].sin())
            }
            Op::Exp(x) => map1(x, &|j| g[j] * y[j]),
            Op::Square(x) => {
                let xs = val(x);
                map1(x, &|j| 2.0 * g[j] * xs[j])
            }
            Op::Sqrt(x) => map1(x, &|j| g[j] / (2.0 * y[j])),
            Op::Relu(x) => {
                let xs = val(x);
                map1(x, &|j| if xs[j] > 0.0 { g[j] } else { 0.0 })
            }
            Op::Powi(x, n) => {
                let xs = val(x);
                map1(x, &|j| g[j] * f64::from(n) * xs[j].powi(n - 1))
            }
            Op::Scale(x, c) => map1(x, &|j| g[j] * c),
            Op::AddScalar(x, _) => vec![(x, g.to_vec())],
            Op::Clamp(x, lo, hi) => {
                let xs = val(x);
                map1(x, &|j| if xs[j] >= lo && xs[j] <= hi { g[j] } else { 0.0 })
            }
            Op::Add(a, b) => vec![(a, g.to_vec()), (b, self.fold_rhs(b, g.to_vec()))],
            Op::Sub(a, b) => vec![
                (a, g.to_vec()),
                (b, self.fold_rhs(b, g.iter().map(|v| -v).collect())),
            ],
            Op::Mul(a, b) => {
                let (av, bv) = (val(a), val(b));
                let bj = |j: usize| if bv.len() == 1 { bv[0] } else { bv[j] };
                let da = (0..g.len()).map(|j| g[j] * bj(j)).collect();
                let db = (0..g.len()).map(|j| g[j] * av[j]).collect();
                vec![(a, da), (b, self.fold_rhs(b, db))]
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(a), val(b));
                let bj = |j: usize| if bv.len() == 1 { bv[0] } else { bv[j] };
                let da = (0..g.len()).map(|j| g[j] / bj(j)).collect();
                let db = (0..g.len())
                    .map(|j| -g[j] * av[j] / (bj(j) * bj(j)))
                    .collect();
                vec![(a, da), (b, self.fold_rhs(b, db))]
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (&self.nodes[a].shape, &self.nodes[b].shape);
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let mut da = vec![0.0; m * k];
                let mut db = vec![0.0; k * n];
                gemm(m, n, k, g, false, val(b), true, &mut da, false);
                gemm(k, m, n, val(a), true, g, false, &mut db, false);
                vec![(a, da), (b, db)]
            }
            Op::Conv1d(x, w, geo) => {
                let (dx, dw) = geo.backward(val(x), val(w), g);
                vec![(x, dx), (w, dw)]
            }
            Op::Sum(x, axis) | Op::Mean(x, axis) | Op::L2Norm(x, axis) => {
                let shape = &self.nodes[x].shape;
                let (outer, n, inner) = split_axis(shape, axis);
                let xs = val(x);
                let mut dx = vec![0.0; xs.len()];
                for o in 0..outer {
                    for a in 0..n {
                        for k in 0..inner {
                            let src = o * inner + k;
                            let dst = (o * n + a) * inner + k;
                            dx[dst] = match node.op {
                                Op::Sum(..) => g[src],
                                Op::Mean(..) => g[src] / n as f64,
                                _ if y[src] > 0.0 => g[src] * xs[dst] / y[src],
                                _ => 0.0,
                            };
                        }
                    }
                }
                vec![(x, dx)]
            }
            Op::Expand(x, axis) => {
                let (outer, size, inner) = split_axis(&node.shape, axis);
                let mut dx = vec![0.0; outer * inner];
                for o in 0..outer {
                    for a in 0..size {
                        for k in 0..inner {
                            dx[o * inner + k] += g[(o * size + a) * inner + k];
                        }
                    }
                }
                vec![(x, dx)]
            }
            Op::Reshape(x) => vec![(x, g.to_vec())],
            Op::Transpose(x) => {
                let s = &node.shape;
                vec![(x, transpose(g, s[0], s[1]))]
            }
            Op::Concat(ref parts, axis) => {
                let (outer, total, inner) = split_axis(&node.shape, axis);
                let mut offset = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let n = self.nodes[p].shape[axis];
                        let mut dp = Vec::with_capacity(outer * n * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            dp.extend_from_slice(&g[base..base + n * inner]);
                        }
                        offset += n;
                        (p, dp)
                    })
                    .collect()
            }
            Op::Slice(x, axis, start) => {
                let shape = &self.nodes[x].shape;
                let (outer, n, inner) = split_axis(shape, axis);
                let len = node.shape[axis];
                let mut dx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    dx[dst..dst + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![(x, dx)]
            }
            Op::Interleave(ref parts) => {
                let k = parts.len();
                let (c, l) = (node.shape[0] / k, node.shape[1]);
                parts
                    .iter()
                    .enumerate()
                    .map(|(j, &p)| {
                        let mut dp = Vec::with_capacity(c * l);
                        for row in 0..c {
                            let src = (row * k + j) * l;
                            dp.extend_from_slice(&g[src..src + l]);
                        }
                        (p, dp)
                    })
                    .collect()
            }
            Op::SoftmaxRows(x) => {
                let cols = node.shape[1];
                let mut dx = vec![0.0; g.len()];
                for ((drow, grow), yrow) in dx
                    .chunks_mut(cols)
                    .zip(g.chunks(cols))
                    .zip(y.chunks(cols))
                {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        drow[j] = yrow[j] * (grow[j] - dot);
                    }
                }
                vec![(x, dx)]
            }
        }
    }

    /// Sums a right-operand gradient down to one element when that operand
    /// was a broadcast scalar.
    fn fold_rhs(&self, b: usize, db: Vec<f64>) -> Vec<f64> {
        if self.nodes[b].value.len() == 1 && db.len() != 1 {
            vec![db.iter().sum()]
        } else {
            db
        }
    }
}

fn add_into_map(map: &mut HashMap<usize, Vec<f64>>, key: usize, g: Vec<f64>) {
    match map.get_mut(&key) {
        Some(buf) => buf.iter_mut().zip(&g).for_each(|(d, s)| *d += s),
        None => {
            map.insert(key, g);
        }
    }
}

fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}
