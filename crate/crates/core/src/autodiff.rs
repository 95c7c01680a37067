//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] owns every value produced during a forward pass. Operations
//! append nodes after their inputs, so the node list is already in
//! topological order and [`Tape::backward`] is a single reverse sweep.
//! The tape is meant to be rebuilt for each forward pass.
//!
//! ```
//! use akd_core::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::new([1], vec![3.0]).unwrap());
//! let y = tape.square(x).unwrap();
//! tape.backward(y).unwrap();
//! assert_eq!(tape.grad(x).unwrap().values(), &[6.0]);
//! ```

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::{self, CollapseMap, ConvGeometry, Shape, Tensor};
use crate::{Error, Result};

/// Smallest divisor magnitude accepted by [`Tape::div`].
pub const MIN_DIVISOR: f64 = 1e-300;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryOp {
    Neg,
    Relu,
    Exp,
    Log,
    Square,
    Sqrt,
    /// `max(x, floor)`; zero gradient where clamped.
    ClampMin(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    /// Population variance (divisor N).
    VarPopulation,
}

enum Op {
    Leaf,
    Binary {
        op: BinaryOp,
        a: Var,
        b: Var,
        map_a: Option<CollapseMap>,
        map_b: Option<CollapseMap>,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    Offset {
        x: Var,
    },
    Unary {
        op: UnaryOp,
        x: Var,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    Conv2d {
        input: Var,
        kernel: Var,
        geometry: ConvGeometry,
    },
    Reduce {
        op: ReduceOp,
        x: Var,
        map: CollapseMap,
        count: usize,
    },
    Softmax {
        x: Var,
        map: CollapseMap,
    },
    LogSoftmax {
        x: Var,
        map: CollapseMap,
    },
    Reshape {
        x: Var,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match *self {
            Op::Leaf => Vec::new(),
            Op::Binary { a, b, .. } | Op::MatMul { a, b } => vec![a, b],
            Op::Conv2d { input, kernel, .. } => vec![input, kernel],
            Op::Scale { x, .. }
            | Op::Offset { x }
            | Op::Unary { x, .. }
            | Op::Reduce { x, .. }
            | Op::Softmax { x, .. }
            | Op::LogSoftmax { x, .. }
            | Op::Reshape { x } => vec![x],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last [`Tape::backward`], if the node took
    /// part in it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Clears gradients so that `backward` may run again.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 >= self.nodes.len() {
            return Err(Error::usage(format!(
                "variable {} does not belong to this tape ({} nodes)",
                v.0,
                self.nodes.len()
            )));
        }
        Ok(())
    }

    fn record(&mut self, op_name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::domain(op_name, "non-finite result"));
        }
        let requires_grad = op.inputs().iter().any(|&i| self.nodes[i.0].requires_grad);
        Ok(self.push(value, op, requires_grad))
    }

    // ---- elementwise -------------------------------------------------------

    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let name = match op {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::Div => "div",
        };
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (shape, map_a, map_b) = tensor::broadcast(name, va.shape(), vb.shape())?;
        if op == BinaryOp::Div {
            if let Some(i) = vb.values().iter().position(|v| v.abs() < MIN_DIVISOR) {
                return Err(Error::domain(
                    "div",
                    format!("divisor element {i} has magnitude below {MIN_DIVISOR:e}"),
                ));
            }
        }
        let (xa, xb) = (va.values(), vb.values());
        let n = shape.numel();
        let mut out = Vec::with_capacity(n);
        let f = |x: f64, y: f64| match op {
            BinaryOp::Add => x + y,
            BinaryOp::Sub => x - y,
            BinaryOp::Mul => x * y,
            BinaryOp::Div => x / y,
        };
        match (&map_a, &map_b) {
            (None, None) => out.extend(xa.iter().zip(xb).map(|(&x, &y)| f(x, y))),
            (None, Some(mb)) => out.extend(xa.iter().zip(mb.iter()).map(|(&x, j)| f(x, xb[j]))),
            (Some(ma), None) => out.extend(ma.iter().zip(xb).map(|(i, &y)| f(xa[i], y))),
            (Some(ma), Some(mb)) => out.extend(ma.iter().zip(mb.iter()).map(|(i, j)| f(xa[i], xb[j]))),
        }
        let value = Tensor::from_shape(shape, out)?;
        self.record(
            name,
            value,
            Op::Binary {
                op,
                a,
                b,
                map_a,
                map_b,
            },
        )
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

    /// Multiplies by a constant scalar.
    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.check(x)?;
        let value = self.nodes[x.0].value.map(|v| v * factor);
        self.record("scale", value, Op::Scale { x, factor })
    }

    /// Adds a constant scalar.
    pub fn offset(&mut self, x: Var, shift: f64) -> Result<Var> {
        self.check(x)?;
        let value = self.nodes[x.0].value.map(|v| v + shift);
        self.record("offset", value, Op::Offset { x })
    }

    pub fn unary(&mut self, op: UnaryOp, x: Var) -> Result<Var> {
        self.check(x)?;
        let input = &self.nodes[x.0].value;
        let name = match op {
            UnaryOp::Neg => "neg",
            UnaryOp::Relu => "relu",
            UnaryOp::Exp => "exp",
            UnaryOp::Log => "log",
            UnaryOp::Square => "square",
            UnaryOp::Sqrt => "sqrt",
            UnaryOp::ClampMin(_) => "clamp_min",
        };
        match op {
            UnaryOp::Log if input.values().iter().any(|&v| v <= 0.0) => {
                return Err(Error::domain("log", "non-positive argument"));
            }
            UnaryOp::Sqrt if input.values().iter().any(|&v| v < 0.0) => {
                return Err(Error::domain("sqrt", "negative argument"));
            }
            _ => {}
        }
        let value = input.map(|v| match op {
            UnaryOp::Neg => -v,
            UnaryOp::Relu => v.max(0.0),
            UnaryOp::Exp => libm::exp(v),
            UnaryOp::Log => libm::log(v),
            UnaryOp::Square => v * v,
            UnaryOp::Sqrt => libm::sqrt(v),
            UnaryOp::ClampMin(floor) => v.max(floor),
        });
        self.record(name, value, Op::Unary { op, x })
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Neg, x)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Relu, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Log, x)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Square, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Sqrt, x)
    }

    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Result<Var> {
        self.unary(UnaryOp::ClampMin(floor), x)
    }

    // ---- linear algebra ----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let value = tensor::matmul(&self.nodes[a.0].value, &self.nodes[b.0].value)?;
        self.record("matmul", value, Op::MatMul { a, b })
    }

    /// Stride-1 cross-correlation of `input[B×Cin×H×W]` with
    /// `kernel[Cout×Cin×k×k]`, `k ∈ {1, 3}`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        self.check(input)?;
        self.check(kernel)?;
        let (vi, vk) = (&self.nodes[input.0].value, &self.nodes[kernel.0].value);
        let geometry = ConvGeometry::new(vi.shape(), vk.shape(), stride, padding)?;
        let out = tensor::conv2d_forward(&geometry, vi.values(), vk.values());
        let value = Tensor::new(geometry.out_dims(), out)?;
        self.record(
            "conv2d",
            value,
            Op::Conv2d {
                input,
                kernel,
                geometry,
            },
        )
    }

    // ---- reductions --------------------------------------------------------

    /// Reduces over `axes`, keeping them as extent-1 dimensions.
    pub fn reduce(&mut self, op: ReduceOp, x: Var, axes: &[usize]) -> Result<Var> {
        self.check(x)?;
        let input = &self.nodes[x.0].value;
        let axes = input.shape().check_axes(axes)?;
        let out_shape = input.shape().reduced(&axes);
        let map = CollapseMap::new(input.shape(), &out_shape);
        let count = input.numel() / out_shape.numel();
        let value = reduce_values(op, input.values(), &map, out_shape.numel(), count);
        let value = Tensor::from_shape(out_shape, value)?;
        self.record("reduce", value, Op::Reduce { op, x, map, count })
    }

    pub fn sum(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(ReduceOp::Sum, x, axes)
    }

    pub fn mean(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(ReduceOp::Mean, x, axes)
    }

    pub fn var_population(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(ReduceOp::VarPopulation, x, axes)
    }

    /// Sum over every axis.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.value(x).shape().rank()).collect();
        self.sum(x, &axes)
    }

    /// Mean over every axis.
    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.value(x).shape().rank()).collect();
        self.mean(x, &axes)
    }

    /// Softmax over the flattened product of `axes`.
    pub fn softmax(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.check(x)?;
        let (value, map) = softmax_with_map(&self.nodes[x.0].value, axes, false)?;
        self.record("softmax", value, Op::Softmax { x, map })
    }

    pub fn log_softmax(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.check(x)?;
        let (value, map) = softmax_with_map(&self.nodes[x.0].value, axes, true)?;
        self.record("log_softmax", value, Op::LogSoftmax { x, map })
    }

    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        self.check(x)?;
        let value = self.nodes[x.0].value.clone().reshape(dims.to_vec())?;
        self.record("reshape", value, Op::Reshape { x })
    }

    // ---- backward ----------------------------------------------------------

    /// Accumulates d`loss`/d(node) for every node that requires a gradient.
    ///
    /// Runs once per tape; call [`Tape::reset_grads`] before running again.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check(loss)?;
        if self.backward_done {
            return Err(Error::usage(
                "backward already ran on this tape; reset_grads first",
            ));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(self.nodes[loss.0].value.map(|_| 1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g)?;
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contribution: Vec<f64>) {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => {
                for (d, c) in g.values_mut().iter_mut().zip(contribution) {
                    *d += c;
                }
            }
            slot @ None => {
                // shapes already validated in the forward pass
                *slot = Some(
                    Tensor::from_shape(node.value.shape().clone(), contribution)
                        .expect("gradient shape"),
                );
            }
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&mut self, i: usize, g: &Tensor) -> Result<()> {
        let gv = g.values();
        let node = &self.nodes[i];
        let mut updates: Vec<(Var, Vec<f64>)> = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Binary {
                op,
                a,
                b,
                map_a,
                map_b,
            } => {
                let (xa, xb) = (self.nodes[a.0].value.values(), self.nodes[b.0].value.values());
                if self.wants(*a) {
                    let mut da = vec![0.0; xa.len()];
                    scatter_binary(&mut da, true, gv.len(), map_a, map_b, |k, _, ib| {
                        let gk = gv[k];
                        match op {
                            BinaryOp::Add | BinaryOp::Sub => gk,
                            BinaryOp::Mul => gk * xb[ib],
                            BinaryOp::Div => gk / xb[ib],
                        }
                    });
                    updates.push((*a, da));
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; xb.len()];
                    scatter_binary(&mut db, false, gv.len(), map_a, map_b, |k, ia, ib| {
                        let gk = gv[k];
                        match op {
                            BinaryOp::Add => gk,
                            BinaryOp::Sub => -gk,
                            BinaryOp::Mul => gk * xa[ia],
                            BinaryOp::Div => -gk * xa[ia] / (xb[ib] * xb[ib]),
                        }
                    });
                    updates.push((*b, db));
                }
            }
            Op::Scale { x, factor } => updates.push((*x, gv.iter().map(|&d| d * factor).collect())),
            Op::Offset { x } => updates.push((*x, gv.to_vec())),
            Op::Unary { op, x } => {
                let input = self.nodes[x.0].value.values();
                let out = node.value.values();
                let d: Vec<f64> = gv
                    .iter()
                    .zip(input)
                    .zip(out)
                    .map(|((&gk, &xk), &yk)| match op {
                        UnaryOp::Neg => -gk,
                        UnaryOp::Relu => {
                            if xk > 0.0 {
                                gk
                            } else {
                                0.0
                            }
                        }
                        UnaryOp::Exp => gk * yk,
                        UnaryOp::Log => gk / xk,
                        UnaryOp::Square => 2.0 * xk * gk,
                        UnaryOp::Sqrt => {
                            if yk > 0.0 {
                                gk / (2.0 * yk)
                            } else {
                                0.0
                            }
                        }
                        UnaryOp::ClampMin(floor) => {
                            if xk > *floor {
                                gk
                            } else {
                                0.0
                            }
                        }
                    })
                    .collect();
                updates.push((*x, d));
            }
            Op::MatMul { a, b } => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k, n) = (va.dims()[0], va.dims()[1], vb.dims()[1]);
                if self.wants(*a) {
                    // dA = G · Bᵀ
                    let bt = tensor::transpose2(vb.values(), k, n);
                    let mut da = vec![0.0; m * k];
                    tensor::matmul_into(gv, &bt, &mut da, m, n, k);
                    updates.push((*a, da));
                }
                if self.wants(*b) {
                    // dB = Aᵀ · G
                    let at = tensor::transpose2(va.values(), m, k);
                    let mut db = vec![0.0; k * n];
                    tensor::matmul_into(&at, gv, &mut db, k, m, n);
                    updates.push((*b, db));
                }
            }
            Op::Conv2d {
                input,
                kernel,
                geometry,
            } => {
                let (gi, gk) = tensor::conv2d_backward(
                    geometry,
                    self.nodes[input.0].value.values(),
                    self.nodes[kernel.0].value.values(),
                    gv,
                    self.wants(*input),
                    self.wants(*kernel),
                );
                if let Some(gi) = gi {
                    updates.push((*input, gi));
                }
                if let Some(gk) = gk {
                    updates.push((*kernel, gk));
                }
            }
            Op::Reduce { op, x, map, count } => {
                let input = self.nodes[x.0].value.values();
                let n = *count as f64;
                let d: Vec<f64> = match op {
                    ReduceOp::Sum => map.iter().map(|j| gv[j]).collect(),
                    ReduceOp::Mean => map.iter().map(|j| gv[j] / n).collect(),
                    ReduceOp::VarPopulation => {
                        let means = reduce_values(ReduceOp::Mean, input, map, gv.len(), *count);
                        map.iter()
                            .zip(input)
                            .map(|(j, &xk)| gv[j] * 2.0 * (xk - means[j]) / n)
                            .collect()
                    }
                };
                updates.push((*x, d));
            }
            Op::Softmax { x, map } => {
                // dx = y ⊙ (g − Σ g⊙y)
                let y = node.value.values();
                let mut dot = vec![0.0; map.groups()];
                for ((j, &gk), &yk) in map.iter().zip(gv).zip(y) {
                    dot[j] += gk * yk;
                }
                let d = map
                    .iter()
                    .zip(gv)
                    .zip(y)
                    .map(|((j, &gk), &yk)| yk * (gk - dot[j]))
                    .collect();
                updates.push((*x, d));
            }
            Op::LogSoftmax { x, map } => {
                // dx = g − softmax ⊙ Σ g
                let y = node.value.values();
                let mut total = vec![0.0; map.groups()];
                for (j, &gk) in map.iter().zip(gv) {
                    total[j] += gk;
                }
                let d = map
                    .iter()
                    .zip(gv)
                    .zip(y)
                    .map(|((j, &gk), &yk)| gk - libm::exp(yk) * total[j])
                    .collect();
                updates.push((*x, d));
            }
            Op::Reshape { x } => updates.push((*x, gv.to_vec())),
        }
        for (v, d) in updates {
            self.accumulate(v, d);
        }
        Ok(())
    }
}

/// Accumulates `f(k, ia, ib)` into `dst` at the index of operand `a` (or
/// `b`) for every output element `k`. Each broadcast case gets its own loop.
fn scatter_binary(
    dst: &mut [f64],
    into_a: bool,
    n: usize,
    map_a: &Option<CollapseMap>,
    map_b: &Option<CollapseMap>,
    f: impl Fn(usize, usize, usize) -> f64,
) {
    match (map_a, map_b) {
        (None, None) => {
            for (k, d) in dst.iter_mut().enumerate().take(n) {
                *d += f(k, k, k);
            }
        }
        (None, Some(mb)) => {
            for (k, ib) in mb.iter().enumerate() {
                dst[if into_a { k } else { ib }] += f(k, k, ib);
            }
        }
        (Some(ma), None) => {
            for (k, ia) in ma.iter().enumerate() {
                dst[if into_a { ia } else { k }] += f(k, ia, k);
            }
        }
        (Some(ma), Some(mb)) => {
            for (k, (ia, ib)) in ma.iter().zip(mb.iter()).enumerate() {
                dst[if into_a { ia } else { ib }] += f(k, ia, ib);
            }
        }
    }
}

fn reduce_values(op: ReduceOp, input: &[f64], map: &CollapseMap, groups: usize, count: usize) -> Vec<f64> {
    let n = count as f64;
    let mut sums = vec![0.0; groups];
    for (j, &v) in map.iter().zip(input) {
        sums[j] += v;
    }
    match op {
        ReduceOp::Sum => sums,
        ReduceOp::Mean => sums.into_iter().map(|s| s / n).collect(),
        ReduceOp::VarPopulation => {
            let means: Vec<f64> = sums.into_iter().map(|s| s / n).collect();
            let mut acc = vec![0.0; groups];
            for (j, &v) in map.iter().zip(input) {
                let d = v - means[j];
                acc[j] += d * d;
            }
            acc.into_iter().map(|s| s / n).collect()
        }
    }
}

/// Numerically stable (log-)softmax over the flattened product of `axes`.
/// Also returns the element-to-group map used by the backward pass.
pub(crate) fn softmax_with_map(x: &Tensor, axes: &[usize], log: bool) -> Result<(Tensor, CollapseMap)> {
    if axes.is_empty() {
        return Err(Error::usage("softmax needs at least one axis"));
    }
    let axes = x.shape().check_axes(axes)?;
    let group_shape: Shape = x.shape().reduced(&axes);
    let groups = group_shape.numel();
    let map = CollapseMap::new(x.shape(), &group_shape);
    let mut max = vec![f64::NEG_INFINITY; groups];
    for (j, &v) in map.iter().zip(x.values()) {
        if v > max[j] {
            max[j] = v;
        }
    }
    let mut denom = vec![0.0; groups];
    let shifted: Vec<f64> = map.iter().zip(x.values()).map(|(j, &v)| v - max[j]).collect();
    for (j, &s) in map.iter().zip(&shifted) {
        denom[j] += libm::exp(s);
    }
    let values = if log {
        let log_denom: Vec<f64> = denom.iter().map(|&d| libm::log(d)).collect();
        map.iter().zip(&shifted).map(|(j, &s)| s - log_denom[j]).collect()
    } else {
        map.iter().zip(&shifted).map(|(j, &s)| libm::exp(s) / denom[j]).collect()
    };
    Ok((Tensor::from_shape(x.shape().clone(), values)?, map))
}

/// Plain softmax without recording anything.
pub fn softmax(x: &Tensor, axes: &[usize]) -> Result<Tensor> {
    Ok(softmax_with_map(x, axes, false)?.0)
}

pub fn log_softmax(x: &Tensor, axes: &[usize]) -> Result<Tensor> {
    Ok(softmax_with_map(x, axes, true)?.0)
}
