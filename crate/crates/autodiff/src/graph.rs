//! Tape of tensor operations and the reverse sweep over it.
//!
//! Nodes are appended in creation order, which is a valid topological order
//! because every op only references nodes that already exist. `backward`
//! walks the tape from the loss node down to index 0 and visits each node at
//! most once.

use crate::error::{mismatch, AutodiffError, Result};
use crate::tensor::{broadcast_shape, for_each_broadcast, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    Atan2,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum UnaryOp {
    Neg,
    Relu,
    Abs,
    Square,
    Sqrt,
    Log,
    Exp,
    Softplus,
    Sin,
    Cos,
    Scale(f64),
    Offset(f64),
    Clamp(f64, f64),
    SincSqrt,
    CoscSqrt,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Binary(BinaryOp, Var, Var),
    Unary(UnaryOp, Var),
    MatMul(Var, Var),
    Conv2d { input: Var, weight: Var, stride: usize, pad: usize },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    Reshape(Var),
    SumAxis { input: Var, axis: usize },
    SumAll(Var),
    MeanAll(Var),
    GatherRows { input: Var, indices: Vec<usize> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Binary(BinaryOp::Add, ..) => "add",
            Op::Binary(BinaryOp::Sub, ..) => "sub",
            Op::Binary(BinaryOp::Mul, ..) => "mul",
            Op::Binary(BinaryOp::Div, ..) => "div",
            Op::Binary(BinaryOp::Atan2, ..) => "atan2",
            Op::Unary(..) => "unary",
            Op::MatMul(..) => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape(..) => "reshape",
            Op::SumAxis { .. } => "sum_axis",
            Op::SumAll(..) => "sum",
            Op::MeanAll(..) => "mean",
            Op::GatherRows { .. } => "gather_rows",
        }
    }
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    op: Op,
    requires_grad: bool,
}

/// A single-owner computation graph.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: f64) -> Var {
        self.input(Tensor::scalar(value))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// Gradient of the last backward pass with respect to `v`; exactly zero
    /// when `v` did not influence the loss.
    pub fn grad(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        match &node.grad {
            Some(g) => Tensor::new(node.value.shape(), g.clone()).expect("grad shape"),
            None => Tensor::zeros(node.value.shape()),
        }
    }

    /// Clears all gradient buffers so `backward` may run again.
    pub fn reset_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ---------------------------------------------------------------------
    // elementwise

    fn binary(&mut self, kind: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(&sa, &sb).ok_or_else(|| {
            mismatch(
                match kind {
                    BinaryOp::Add => "add",
                    BinaryOp::Sub => "sub",
                    BinaryOp::Mul => "mul",
                    BinaryOp::Div => "div",
                    BinaryOp::Atan2 => "atan2",
                },
                &sa,
                &sb,
            )
        })?;
        let n: usize = out_shape.iter().product();
        let mut out = vec![0.0; n];
        {
            let (da, db) = (self.value(a).data(), self.value(b).data());
            for_each_broadcast(&out_shape, &sa, &sb, |o, ia, ib| {
                let (x, y) = (da[ia], db[ib]);
                out[o] = match kind {
                    BinaryOp::Add => x + y,
                    BinaryOp::Sub => x - y,
                    BinaryOp::Mul => x * y,
                    BinaryOp::Div => x / y,
                    BinaryOp::Atan2 => x.atan2(y),
                };
            });
        }
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(&out_shape, out)?, Op::Binary(kind, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    /// Elementwise `atan2(y, x)` with broadcasting.
    pub fn atan2(&mut self, y: Var, x: Var) -> Result<Var> {
        self.binary(BinaryOp::Atan2, y, x)
    }

    fn unary(&mut self, kind: UnaryOp, a: Var) -> Var {
        let x = self.value(a);
        let data = x.data().iter().map(|&v| unary_forward(kind, v)).collect();
        let t = Tensor::new(x.shape(), data).expect("unary shape");
        let rg = self.needs(a);
        self.push(t, Op::Unary(kind, a), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Neg, a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Relu, a)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Abs, a)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Square, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Sqrt, a)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Log, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Exp, a)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Softplus, a)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Sin, a)
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Cos, a)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(UnaryOp::Scale(c), a)
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        self.unary(UnaryOp::Offset(c), a)
    }

    /// Clamp to `[lo, hi]`; gradient is zero outside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(UnaryOp::Clamp(lo, hi), a)
    }

    /// `sin(√x)/√x` for `x ≥ 0`, smooth through zero.
    pub fn sinc_sqrt(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::SincSqrt, a)
    }

    /// `(1 − cos√x)/x` for `x ≥ 0`, smooth through zero.
    pub fn cosc_sqrt(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::CoscSqrt, a)
    }

    // ---------------------------------------------------------------------
    // linear algebra

    /// Matrix product over the last two axes. Leading (batch) axes must
    /// match, or one operand may be rank 2 and is then shared across the
    /// batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let dims = MatMulDims::new(&sa, &sb)?;
        let mut out = vec![0.0; dims.batch * dims.m * dims.n];
        matmul_forward(&dims, self.value(a).data(), self.value(b).data(), &mut out);
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(&dims.out_shape, out)?, Op::MatMul(a, b), rg))
    }

    /// 2-D convolution with "same" padding (`k/2`) over `[N, C, H, W]`
    /// inputs and `[O, C, k, k]` weights, odd `k`.
    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(input).to_vec(), self.shape(weight).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || sw[2] != sw[3] || sw[2] % 2 == 0 {
            return Err(mismatch("conv2d", &sx, &sw));
        }
        if stride == 0 {
            return Err(AutodiffError::InvalidArgument {
                op: "conv2d",
                msg: "stride must be positive".into(),
            });
        }
        let geo = ConvGeom::new(&sx, &sw, stride, sw[2] / 2);
        let mut out = vec![0.0; geo.n * geo.o * geo.ho * geo.wo];
        conv_forward(&geo, self.value(input).data(), self.value(weight).data(), &mut out);
        let rg = self.needs(input) || self.needs(weight);
        let shape = [geo.n, geo.o, geo.ho, geo.wo];
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Conv2d {
                input,
                weight,
                stride,
                pad: geo.pad,
            },
            rg,
        ))
    }

    // ---------------------------------------------------------------------
    // shape manipulation and reductions

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| AutodiffError::InvalidArgument {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(AutodiffError::InvalidArgument {
                op: "concat",
                msg: format!("axis {axis} out of range for shape {base:?}"),
            });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(mismatch("concat", &base, s));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = inputs.iter().any(|&v| self.needs(v));
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, input: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if axis >= s.len() || start >= end || end > s[axis] {
            return Err(AutodiffError::InvalidArgument {
                op: "slice",
                msg: format!("range {start}..{end} on axis {axis} of shape {s:?}"),
            });
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let src = self.value(input).data();
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            out.extend_from_slice(&src[base..base + (end - start) * inner]);
        }
        let mut shape = s;
        shape[axis] = end - start;
        let rg = self.needs(input);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Slice { input, axis, start }, rg))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(input);
        if shape.iter().product::<usize>() != t.numel() {
            return Err(mismatch("reshape", t.shape(), shape));
        }
        let t = t.reshaped(shape)?;
        let rg = self.needs(input);
        Ok(self.push(t, Op::Reshape(input), rg))
    }

    /// Sum over one axis, removing it.
    pub fn sum_axis(&mut self, input: Var, axis: usize) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if axis >= s.len() {
            return Err(AutodiffError::InvalidArgument {
                op: "sum_axis",
                msg: format!("axis {axis} out of range for shape {s:?}"),
            });
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let src = self.value(input).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..s[axis] {
                let base = (o * s[axis] + k) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let mut shape = s;
        shape.remove(axis);
        let rg = self.needs(input);
        Ok(self.push(Tensor::new(&shape, out)?, Op::SumAxis { input, axis }, rg))
    }

    /// Mean over one axis, removing it.
    pub fn mean_axis(&mut self, input: Var, axis: usize) -> Result<Var> {
        let len = *self.shape(input).get(axis).unwrap_or(&1) as f64;
        let s = self.sum_axis(input, axis)?;
        Ok(self.scale(s, 1.0 / len))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let total: f64 = self.value(input).data().iter().sum();
        let rg = self.needs(input);
        self.push(Tensor::scalar(total), Op::SumAll(input), rg)
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let t = self.value(input);
        let total = t.data().iter().sum::<f64>() / t.numel().max(1) as f64;
        let rg = self.needs(input);
        self.push(Tensor::scalar(total), Op::MeanAll(input), rg)
    }

    /// Selects entries along axis 0; indices may repeat.
    pub fn gather_rows(&mut self, input: Var, indices: &[usize]) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.is_empty() || indices.iter().any(|&i| i >= s[0]) || indices.is_empty() {
            return Err(AutodiffError::InvalidArgument {
                op: "gather_rows",
                msg: format!("indices {indices:?} for shape {s:?}"),
            });
        }
        let row: usize = s[1..].iter().product();
        let src = self.value(input).data();
        let mut out = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            out.extend_from_slice(&src[i * row..(i + 1) * row]);
        }
        let mut shape = s;
        shape[0] = indices.len();
        let rg = self.needs(input);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::GatherRows {
                input,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    // ---------------------------------------------------------------------
    // reverse sweep

    /// Populates gradients of `loss` with respect to every node that
    /// requires one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(AutodiffError::DoubleBackward);
        }
        let loss_shape = self.shape(loss);
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(AutodiffError::NonScalarLoss(loss_shape.to_vec()));
        }
        self.backward_done = true;
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.node_backward(i, &g);
            self.nodes[i].grad = Some(g);
            for (v, dv) in contributions {
                let slot = &mut self.nodes[v.0].grad;
                match slot {
                    Some(acc) => acc.iter_mut().zip(&dv).for_each(|(a, d)| *a += d),
                    None => *slot = Some(dv),
                }
            }
        }
        Ok(())
    }

    fn node_backward(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (na, nb) = (self.needs(*a), self.needs(*b));
                let mut ga = if na { vec![0.0; va.numel()] } else { Vec::new() };
                let mut gb = if nb { vec![0.0; vb.numel()] } else { Vec::new() };
                let (da, db) = (va.data(), vb.data());
                for_each_broadcast(node.value.shape(), va.shape(), vb.shape(), |o, ia, ib| {
                    let (x, y, go) = (da[ia], db[ib], g[o]);
                    let (dx, dy) = match kind {
                        BinaryOp::Add => (go, go),
                        BinaryOp::Sub => (go, -go),
                        BinaryOp::Mul => (go * y, go * x),
                        BinaryOp::Div => (go / y, -go * x / (y * y)),
                        BinaryOp::Atan2 => {
                            let r2 = x * x + y * y;
                            (go * y / r2, -go * x / r2)
                        }
                    };
                    if na {
                        ga[ia] += dx;
                    }
                    if nb {
                        gb[ib] += dy;
                    }
                });
                if na {
                    out.push((*a, ga));
                }
                if nb {
                    out.push((*b, gb));
                }
            }
            Op::Unary(kind, a) => {
                if self.needs(*a) {
                    let x = self.value(*a).data();
                    let y = node.value.data();
                    let ga = (0..x.len())
                        .map(|k| g[k] * unary_derivative(*kind, x[k], y[k]))
                        .collect();
                    out.push((*a, ga));
                }
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let dims = MatMulDims::new(va.shape(), vb.shape()).expect("validated in forward");
                let (ga, gb) = matmul_backward(
                    &dims,
                    va.data(),
                    vb.data(),
                    g,
                    self.needs(*a),
                    self.needs(*b),
                );
                if let Some(ga) = ga {
                    out.push((*a, ga));
                }
                if let Some(gb) = gb {
                    out.push((*b, gb));
                }
            }
            Op::Conv2d {
                input,
                weight,
                stride,
                pad,
            } => {
                let (vx, vw) = (self.value(*input), self.value(*weight));
                let geo = ConvGeom::new(vx.shape(), vw.shape(), *stride, *pad);
                if self.needs(*input) {
                    let mut gx = vec![0.0; vx.numel()];
                    conv_backward_input(&geo, vw.data(), g, &mut gx);
                    out.push((*input, gx));
                }
                if self.needs(*weight) {
                    let mut gw = vec![0.0; vw.numel()];
                    conv_backward_weight(&geo, vx.data(), g, &mut gw);
                    out.push((*weight, gw));
                }
            }
            Op::Concat { inputs, axis } => {
                let s = node.value.shape();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let row = s[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis] * inner;
                    if self.needs(v) {
                        let mut gv = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            gv.extend_from_slice(&g[o * row + offset..o * row + offset + len]);
                        }
                        out.push((v, gv));
                    }
                    offset += len;
                }
            }
            Op::Slice { input, axis, start } => {
                if self.needs(*input) {
                    let s = self.shape(*input);
                    let outer: usize = s[..*axis].iter().product();
                    let inner: usize = s[axis + 1..].iter().product();
                    let len = node.value.shape()[*axis] * inner;
                    let mut gi = vec![0.0; self.value(*input).numel()];
                    for o in 0..outer {
                        let base = (o * s[*axis] + start) * inner;
                        gi[base..base + len].copy_from_slice(&g[o * len..(o + 1) * len]);
                    }
                    out.push((*input, gi));
                }
            }
            Op::Reshape(input) => {
                if self.needs(*input) {
                    out.push((*input, g.to_vec()));
                }
            }
            Op::SumAxis { input, axis } => {
                if self.needs(*input) {
                    let s = self.shape(*input);
                    let outer: usize = s[..*axis].iter().product();
                    let inner: usize = s[axis + 1..].iter().product();
                    let mut gi = vec![0.0; self.value(*input).numel()];
                    for o in 0..outer {
                        for k in 0..s[*axis] {
                            let base = (o * s[*axis] + k) * inner;
                            gi[base..base + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                        }
                    }
                    out.push((*input, gi));
                }
            }
            Op::SumAll(input) => {
                if self.needs(*input) {
                    out.push((*input, vec![g[0]; self.value(*input).numel()]));
                }
            }
            Op::MeanAll(input) => {
                if self.needs(*input) {
                    let n = self.value(*input).numel();
                    out.push((*input, vec![g[0] / n as f64; n]));
                }
            }
            Op::GatherRows { input, indices } => {
                if self.needs(*input) {
                    let vi = self.value(*input);
                    let row: usize = vi.shape()[1..].iter().product();
                    let mut gi = vec![0.0; vi.numel()];
                    for (k, &r) in indices.iter().enumerate() {
                        for j in 0..row {
                            gi[r * row + j] += g[k * row + j];
                        }
                    }
                    out.push((*input, gi));
                }
            }
        }
        out
    }
}

// Series cutoff for the sinc/cosc helpers; six terms keep the truncation
// error below 1e-18 there.
const SERIES_CUTOFF: f64 = 0.1;

fn sinc_sqrt(x: f64) -> f64 {
    if x < SERIES_CUTOFF {
        // sum (-x)^n / (2n+1)!
        let mut term = 1.0;
        let mut acc = 1.0;
        for n in 1..7 {
            term *= -x / ((2 * n) as f64 * (2 * n + 1) as f64);
            acc += term;
        }
        acc
    } else {
        let u = x.sqrt();
        u.sin() / u
    }
}

fn sinc_sqrt_derivative(x: f64) -> f64 {
    if x < SERIES_CUTOFF {
        // d/dx sum (-1)^n x^n / (2n+1)!
        let mut acc = 0.0;
        let mut fact = 1.0; // (2n+1)!
        let mut pow = 1.0; // x^(n-1)
        for n in 1..7 {
            fact *= (2 * n) as f64 * (2 * n + 1) as f64;
            let sign = if n % 2 == 1 { -1.0 } else { 1.0 };
            acc += sign * n as f64 * pow / fact;
            pow *= x;
        }
        acc
    } else {
        let u = x.sqrt();
        (u * u.cos() - u.sin()) / (2.0 * x * u)
    }
}

fn cosc_sqrt(x: f64) -> f64 {
    if x < SERIES_CUTOFF {
        // sum (-x)^n / (2n+2)!
        let mut term = 0.5;
        let mut acc = 0.5;
        for n in 1..7 {
            term *= -x / ((2 * n + 1) as f64 * (2 * n + 2) as f64);
            acc += term;
        }
        acc
    } else {
        (1.0 - x.sqrt().cos()) / x
    }
}

fn cosc_sqrt_derivative(x: f64) -> f64 {
    if x < SERIES_CUTOFF {
        let mut acc = 0.0;
        let mut fact = 2.0; // (2n+2)!
        let mut pow = 1.0;
        for n in 1..7 {
            fact *= (2 * n + 1) as f64 * (2 * n + 2) as f64;
            let sign = if n % 2 == 1 { -1.0 } else { 1.0 };
            acc += sign * n as f64 * pow / fact;
            pow *= x;
        }
        acc
    } else {
        let u = x.sqrt();
        (u * u.sin() - 2.0 * (1.0 - u.cos())) / (2.0 * x * x)
    }
}

fn unary_forward(kind: UnaryOp, x: f64) -> f64 {
    match kind {
        UnaryOp::Neg => -x,
        UnaryOp::Relu => x.max(0.0),
        UnaryOp::Abs => x.abs(),
        UnaryOp::Square => x * x,
        UnaryOp::Sqrt => x.sqrt(),
        UnaryOp::Log => x.ln(),
        UnaryOp::Exp => x.exp(),
        UnaryOp::Softplus => x.max(0.0) + (-x.abs()).exp().ln_1p(),
        UnaryOp::Sin => x.sin(),
        UnaryOp::Cos => x.cos(),
        UnaryOp::Scale(c) => c * x,
        UnaryOp::Offset(c) => x + c,
        UnaryOp::Clamp(lo, hi) => x.clamp(lo, hi),
        UnaryOp::SincSqrt => sinc_sqrt(x),
        UnaryOp::CoscSqrt => cosc_sqrt(x),
    }
}

/// d(out)/d(in) given input `x` and output `y`.
fn unary_derivative(kind: UnaryOp, x: f64, y: f64) -> f64 {
    match kind {
        UnaryOp::Neg => -1.0,
        UnaryOp::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        UnaryOp::Abs => {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        }
        UnaryOp::Square => 2.0 * x,
        UnaryOp::Sqrt => 0.5 / y,
        UnaryOp::Log => 1.0 / x,
        UnaryOp::Exp => y,
        UnaryOp::Softplus => 1.0 / (1.0 + (-x).exp()),
        UnaryOp::Sin => x.cos(),
        UnaryOp::Cos => -x.sin(),
        UnaryOp::Scale(c) => c,
        UnaryOp::Offset(_) => 1.0,
        UnaryOp::Clamp(lo, hi) => {
            if (lo..=hi).contains(&x) {
                1.0
            } else {
                0.0
            }
        }
        UnaryOp::SincSqrt => sinc_sqrt_derivative(x),
        UnaryOp::CoscSqrt => cosc_sqrt_derivative(x),
    }
}

struct MatMulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a_batched: bool,
    b_batched: bool,
    out_shape: Vec<usize>,
}

impl MatMulDims {
    fn new(sa: &[usize], sb: &[usize]) -> Result<Self> {
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch("matmul", sa, sb));
        }
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 || (!ba.is_empty() && !bb.is_empty() && ba != bb) {
            return Err(mismatch("matmul", sa, sb));
        }
        let batch_shape = if ba.is_empty() { bb } else { ba };
        let mut out_shape = batch_shape.to_vec();
        out_shape.extend_from_slice(&[m, n]);
        Ok(Self {
            batch: batch_shape.iter().product(),
            m,
            k,
            n,
            a_batched: !ba.is_empty(),
            b_batched: !bb.is_empty(),
            out_shape,
        })
    }
}

fn matmul_forward(d: &MatMulDims, a: &[f64], b: &[f64], out: &mut [f64]) {
    let (m, k, n) = (d.m, d.k, d.n);
    for bi in 0..d.batch {
        let ao = if d.a_batched { bi * m * k } else { 0 };
        let bo = if d.b_batched { bi * k * n } else { 0 };
        let oo = bi * m * n;
        for i in 0..m {
            let row = &mut out[oo + i * n..oo + (i + 1) * n];
            for p in 0..k {
                let av = a[ao + i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &b[bo + p * n..bo + (p + 1) * n];
                for (r, &bv) in row.iter_mut().zip(brow) {
                    *r += av * bv;
                }
            }
        }
    }
}

fn matmul_backward(
    d: &MatMulDims,
    a: &[f64],
    b: &[f64],
    g: &[f64],
    need_a: bool,
    need_b: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (m, k, n) = (d.m, d.k, d.n);
    let mut ga = need_a.then(|| vec![0.0; a.len()]);
    let mut gb = need_b.then(|| vec![0.0; b.len()]);
    for bi in 0..d.batch {
        let ao = if d.a_batched { bi * m * k } else { 0 };
        let bo = if d.b_batched { bi * k * n } else { 0 };
        let go = bi * m * n;
        if let Some(ga) = ga.as_mut() {
            // dA = dC · Bᵀ
            for i in 0..m {
                let grow = &g[go + i * n..go + (i + 1) * n];
                for p in 0..k {
                    let brow = &b[bo + p * n..bo + (p + 1) * n];
                    let dot: f64 = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                    ga[ao + i * k + p] += dot;
                }
            }
        }
        if let Some(gb) = gb.as_mut() {
            // dB = Aᵀ · dC
            for i in 0..m {
                let grow = &g[go + i * n..go + (i + 1) * n];
                for p in 0..k {
                    let av = a[ao + i * k + p];
                    if av == 0.0 {
                        continue;
                    }
                    let brow = &mut gb[bo + p * n..bo + (p + 1) * n];
                    for (r, &gv) in brow.iter_mut().zip(grow) {
                        *r += av * gv;
                    }
                }
            }
        }
    }
    (ga, gb)
}

struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(sx: &[usize], sw: &[usize], stride: usize, pad: usize) -> Self {
        let (h, w, k) = (sx[2], sx[3], sw[2]);
        Self {
            n: sx[0],
            c: sx[1],
            h,
            w,
            o: sw[0],
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (w + 2 * pad - k) / stride + 1,
        }
    }

    /// Output index range along one axis whose input tap `o*stride + t - pad`
    /// falls inside `[0, len)`.
    fn valid_range(&self, t: usize, len: usize, out_len: usize) -> (usize, usize) {
        let lo = if self.pad > t {
            (self.pad - t).div_ceil(self.stride)
        } else {
            0
        };
        let hi = if len + self.pad > t {
            ((len - 1 + self.pad - t) / self.stride + 1).min(out_len)
        } else {
            0
        };
        (lo, hi.max(lo))
    }
}

fn conv_forward(geo: &ConvGeom, x: &[f64], w: &[f64], out: &mut [f64]) {
    let ConvGeom {
        n, c, h, w: wd, o, k, stride, pad, ho, wo,
    } = *geo;
    for ni in 0..n {
        for oc in 0..o {
            let out_plane = &mut out[(ni * o + oc) * ho * wo..(ni * o + oc + 1) * ho * wo];
            for ic in 0..c {
                let in_plane = &x[(ni * c + ic) * h * wd..(ni * c + ic + 1) * h * wd];
                for ky in 0..k {
                    let (oy_lo, oy_hi) = geo.valid_range(ky, h, ho);
                    for kx in 0..k {
                        let wv = w[((oc * c + ic) * k + ky) * k + kx];
                        let (ox_lo, ox_hi) = geo.valid_range(kx, wd, wo);
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - pad;
                            let in_row = &in_plane[iy * wd..(iy + 1) * wd];
                            let out_row = &mut out_plane[oy * wo..(oy + 1) * wo];
                            if stride == 1 {
                                let shift = ox_lo + kx - pad;
                                for (r, &xv) in out_row[ox_lo..ox_hi]
                                    .iter_mut()
                                    .zip(&in_row[shift..shift + ox_hi - ox_lo])
                                {
                                    *r += wv * xv;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    out_row[ox] += wv * in_row[ox * stride + kx - pad];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_backward_input(geo: &ConvGeom, w: &[f64], g: &[f64], gx: &mut [f64]) {
    let ConvGeom {
        n, c, h, w: wd, o, k, stride, pad, ho, wo,
    } = *geo;
    for ni in 0..n {
        for oc in 0..o {
            let g_plane = &g[(ni * o + oc) * ho * wo..(ni * o + oc + 1) * ho * wo];
            for ic in 0..c {
                let gx_plane = &mut gx[(ni * c + ic) * h * wd..(ni * c + ic + 1) * h * wd];
                for ky in 0..k {
                    let (oy_lo, oy_hi) = geo.valid_range(ky, h, ho);
                    for kx in 0..k {
                        let wv = w[((oc * c + ic) * k + ky) * k + kx];
                        let (ox_lo, ox_hi) = geo.valid_range(kx, wd, wo);
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - pad;
                            let g_row = &g_plane[oy * wo..(oy + 1) * wo];
                            let gx_row = &mut gx_plane[iy * wd..(iy + 1) * wd];
                            for ox in ox_lo..ox_hi {
                                gx_row[ox * stride + kx - pad] += wv * g_row[ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_backward_weight(geo: &ConvGeom, x: &[f64], g: &[f64], gw: &mut [f64]) {
    let ConvGeom {
        n, c, h, w: wd, o, k, stride, pad, ho, wo,
    } = *geo;
    for ni in 0..n {
        for oc in 0..o {
            let g_plane = &g[(ni * o + oc) * ho * wo..(ni * o + oc + 1) * ho * wo];
            for ic in 0..c {
                let in_plane = &x[(ni * c + ic) * h * wd..(ni * c + ic + 1) * h * wd];
                for ky in 0..k {
                    let (oy_lo, oy_hi) = geo.valid_range(ky, h, ho);
                    for kx in 0..k {
                        let (ox_lo, ox_hi) = geo.valid_range(kx, wd, wo);
                        let mut acc = 0.0;
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - pad;
                            let g_row = &g_plane[oy * wo..(oy + 1) * wo];
                            let in_row = &in_plane[iy * wd..(iy + 1) * wd];
                            if stride == 1 {
                                let shift = ox_lo + kx - pad;
                                acc += g_row[ox_lo..ox_hi]
                                    .iter()
                                    .zip(&in_row[shift..shift + ox_hi - ox_lo])
                                    .map(|(a, b)| a * b)
                                    .sum::<f64>();
                            } else {
                                for ox in ox_lo..ox_hi {
                                    acc += g_row[ox] * in_row[ox * stride + kx - pad];
                                }
                            }
                        }
                        gw[((oc * c + ic) * k + ky) * k + kx] += acc;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_values() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(&[-1.0, 0.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn identity_kernel_conv_is_noop() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..2 * 3 * 5 * 4).map(|i| (i as f64 * 0.37).sin()).collect();
        let x = g.input(Tensor::new(&[2, 3, 5, 4], data.clone()).unwrap());
        let mut kernel = vec![0.0; 9];
        for c in 0..3 {
            kernel[c * 3 + c] = 1.0;
        }
        let w = g.input(Tensor::new(&[3, 3, 1, 1], kernel).unwrap());
        let y = g.conv2d(x, w, 1).unwrap();
        assert_eq!(g.value(y).data(), data.as_slice());
    }

    #[test]
    fn strided_conv_output_shape() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[1, 2, 32, 32]));
        let w = g.input(Tensor::zeros(&[4, 2, 3, 3]));
        let y = g.conv2d(x, w, 2).unwrap();
        assert_eq!(g.shape(y), &[1, 4, 16, 16]);
        let w1 = g.input(Tensor::zeros(&[4, 2, 1, 1]));
        let y1 = g.conv2d(x, w1, 2).unwrap();
        assert_eq!(g.shape(y1), &[1, 4, 16, 16]);
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(&[3, 4]));
        let b = g.input(Tensor::zeros(&[3, 2]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[3, 4]") && msg.contains("[3, 2]"), "{msg}");
        let err = g.add(a, b).unwrap_err().to_string();
        assert!(err.contains("[3, 4]") && err.contains("[3, 2]"), "{err}");
    }

    #[test]
    fn mean_square_gradient_closed_form() {
        let xs = [0.3, -1.2, 2.5, 0.01, -0.7];
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(&xs));
        let sq = g.square(x);
        let loss = g.mean(sq);
        g.backward(loss).unwrap();
        let grad = g.grad(x);
        for (gv, xv) in grad.data().iter().zip(xs) {
            assert!((gv - 2.0 * xv / xs.len() as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn double_backward_is_rejected_until_reset() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(&[1.0, 2.0]));
        let loss = g.sum(x);
        g.backward(loss).unwrap();
        assert_eq!(g.backward(loss), Err(AutodiffError::DoubleBackward));
        g.reset_grads();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).data(), &[1.0, 1.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(&[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(AutodiffError::NonScalarLoss(_))));
    }

    #[test]
    fn disconnected_param_has_zero_grad() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(&[1.0, 2.0]));
        let unused = g.param(Tensor::vector(&[3.0, 4.0, 5.0]));
        let loss = g.sum(x);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(unused).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn series_branches_are_continuous() {
        for f in [sinc_sqrt, cosc_sqrt, sinc_sqrt_derivative, cosc_sqrt_derivative] {
            let below = f(SERIES_CUTOFF * (1.0 - 1e-12));
            let above = f(SERIES_CUTOFF * (1.0 + 1e-12));
            assert!((below - above).abs() < 1e-12, "{below} vs {above}");
        }
        assert_eq!(sinc_sqrt(0.0), 1.0);
        assert_eq!(cosc_sqrt(0.0), 0.5);
    }
}
