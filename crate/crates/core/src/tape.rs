//! Define-by-run reverse-mode differentiation over dense tensors.
//!
//! A [`Tape`] records every primitive applied to its [`Var`] handles. Leaves
//! are either trainable (gradients are accumulated for them) or constants.
//! [`Tape::backward`] walks the recorded nodes once, in reverse order, and
//! adds the gradient of a scalar loss into every trainable leaf it reaches.
//! Leaf gradients keep accumulating across calls until [`Tape::clear_grads`].
//!
//! The primitive set is deliberately small: it covers the linear layers,
//! graph attention, memory alignment and loss terms used by the model, plus
//! a few row-gather helpers for message passing.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    /// `a · b`, or `a · bᵀ` when `transpose_rhs` is set.
    MatMul { transpose_rhs: bool },
    /// Elementwise with row/column broadcasting of the second operand.
    Add,
    Sub,
    Mul,
    Scale(f64),
    ConcatRows,
    Sum,
    Mean,
    /// Per-row maximum, `m × n → m × 1`.
    RowMax,
    LeakyRelu(f64),
    Elu,
    Relu,
    Softplus,
    LogSumExp { axis: usize },
    Softmax { axis: usize, temperature: f64 },
    L2Normalize { axis: usize },
    /// Mean squared error between two same-shaped tensors.
    Mse,
    /// Mean over rows of `-log softmax(logits)[target]`.
    SoftmaxCrossEntropy { targets: Arc<[usize]> },
    Detach,
    GatherRows { indices: Arc<[usize]> },
    Reshape { shape: Vec<usize> },
    /// Sums consecutive blocks of `group` rows, `(m·group) × d → m × d`.
    GroupSumRows { group: usize },
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::MatMul { .. } => "matmul",
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "elementwise_mul",
            Primitive::Scale(_) => "scalar_mul",
            Primitive::ConcatRows => "concat_rows",
            Primitive::Sum => "sum",
            Primitive::Mean => "mean",
            Primitive::RowMax => "row_max",
            Primitive::LeakyRelu(_) => "leaky_relu",
            Primitive::Elu => "elu",
            Primitive::Relu => "relu",
            Primitive::Softplus => "softplus",
            Primitive::LogSumExp { .. } => "logsumexp",
            Primitive::Softmax { .. } => "softmax",
            Primitive::L2Normalize { .. } => "l2_normalize",
            Primitive::Mse => "mse",
            Primitive::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy_with_logits",
            Primitive::Detach => "detach",
            Primitive::GatherRows { .. } => "gather_rows",
            Primitive::Reshape { .. } => "reshape",
            Primitive::GroupSumRows { .. } => "group_sum_rows",
        }
    }
}

struct Node {
    value: Tensor,
    op: Option<(Primitive, Vec<Var>)>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    // Accumulated gradients of trainable leaves, indexed by node id.
    leaf_grads: Vec<Option<Vec<f64>>>,
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

    fn push(&mut self, value: Tensor, op: Option<(Primitive, Vec<Var>)>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Records a trainable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, None, true)
    }

    /// Records a constant leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, None, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a trainable leaf; `None` if nothing reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads[v.0].as_deref()
    }

    /// Accumulated gradient, with zeros for leaves no loss has reached.
    pub fn grad_or_zeros(&self, v: Var) -> Vec<f64> {
        self.grad(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; self.value(v).len()])
    }

    pub fn clear_grads(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    pub fn apply(&mut self, prim: Primitive, inputs: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let out = forward(&prim, &values)?;
        let requires_grad =
            !matches!(prim, Primitive::Detach) && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = requires_grad.then(|| (prim, inputs.to_vec()));
        Ok(self.push(out, op, requires_grad))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::MatMul { transpose_rhs: false }, &[a, b])
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::MatMul { transpose_rhs: true }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Mul, &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.apply(Primitive::Scale(s), &[a])
    }

    /// `a + c` for a constant scalar `c`.
    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = self.constant(Tensor::row(vec![c]));
        self.add(a, c)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        self.apply(Primitive::ConcatRows, parts)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Sum, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Mean, &[a])
    }

    pub fn row_max(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::RowMax, &[a])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        self.apply(Primitive::LeakyRelu(slope), &[a])
    }

    pub fn elu(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Elu, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Relu, &[a])
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Softplus, &[a])
    }

    pub fn logsumexp(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(Primitive::LogSumExp { axis }, &[a])
    }

    pub fn softmax(&mut self, a: Var, axis: usize, temperature: f64) -> Result<Var> {
        self.apply(Primitive::Softmax { axis, temperature }, &[a])
    }

    pub fn l2_normalize(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(Primitive::L2Normalize { axis }, &[a])
    }

    pub fn mse(&mut self, prediction: Var, target: Var) -> Result<Var> {
        self.apply(Primitive::Mse, &[prediction, target])
    }

    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        self.apply(
            Primitive::SoftmaxCrossEntropy {
                targets: targets.into(),
            },
            &[logits],
        )
    }

    pub fn detach(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Detach, &[a])
    }

    pub fn gather_rows(&mut self, a: Var, indices: Arc<[usize]>) -> Result<Var> {
        self.apply(Primitive::GatherRows { indices }, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.apply(
            Primitive::Reshape {
                shape: shape.to_vec(),
            },
            &[a],
        )
    }

    pub fn group_sum_rows(&mut self, a: Var, group: usize) -> Result<Var> {
        self.apply(Primitive::GroupSumRows { group }, &[a])
    }

    /// Adds `∂loss/∂leaf` into every trainable leaf reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.nodes[loss.0].value.shape()),
            ));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                None => {
                    if node.requires_grad {
                        accumulate(&mut self.leaf_grads[id], g);
                    }
                }
                Some((prim, inputs)) => {
                    let values: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                    let wanted: Vec<bool> = inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
                    let input_grads = backward_rule(prim, &values, &node.value, &g, &wanted);
                    for (input, ig) in inputs.iter().zip(input_grads) {
                        if let Some(ig) = ig {
                            accumulate(&mut grads[input.0], ig);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

fn expect_inputs(prim: &Primitive, inputs: &[&Tensor], n: usize) -> Result<()> {
    if inputs.len() != n {
        return Err(Error::shape(
            prim.name(),
            format!("expected {n} inputs, got {}", inputs.len()),
        ));
    }
    Ok(())
}

fn check_axis(prim: &Primitive, axis: usize) -> Result<()> {
    if axis > 1 {
        return Err(Error::shape(prim.name(), format!("axis {axis} out of range")));
    }
    Ok(())
}

/// A strided run of elements reduced together along an axis.
#[derive(Clone, Copy)]
struct Lane {
    start: usize,
    stride: usize,
    len: usize,
}

impl Lane {
    fn indices(self) -> impl Iterator<Item = usize> {
        (0..self.len).map(move |k| self.start + k * self.stride)
    }
}

fn lanes(dims: (usize, usize), axis: usize) -> Vec<Lane> {
    let (m, n) = dims;
    if axis == 1 {
        (0..m).map(|r| Lane { start: r * n, stride: 1, len: n }).collect()
    } else {
        (0..n).map(|c| Lane { start: c, stride: n, len: m }).collect()
    }
}

fn reduced_shape(dims: (usize, usize), axis: usize) -> Vec<usize> {
    if axis == 1 {
        vec![dims.0, 1]
    } else {
        vec![1, dims.1]
    }
}

fn broadcast_ok(a: (usize, usize), b: (usize, usize)) -> bool {
    (b.0 == a.0 || b.0 == 1) && (b.1 == a.1 || b.1 == 1)
}

#[inline]
fn bidx(b: (usize, usize), r: usize, c: usize) -> usize {
    let br = if b.0 == 1 { 0 } else { r };
    let bc = if b.1 == 1 { 0 } else { c };
    br * b.1 + bc
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
        .expect("same shape")
}

/// `a (m×k) · b (k×n)`.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// `a (m×k) · bᵀ` with `b` stored `n×k`.
pub(crate) fn matmul_t_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = crate::tensor::dot(arow, brow);
        }
    }
    out
}

/// `aᵀ (k×m)ᵀ · b (m×n)` with `a` stored `m×k`, giving `k×n`.
fn matmul_tl_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

fn forward(prim: &Primitive, inputs: &[&Tensor]) -> Result<Tensor> {
    let name = prim.name();
    match prim {
        Primitive::MatMul { transpose_rhs } => {
            expect_inputs(prim, inputs, 2)?;
            let (m, k) = inputs[0].dims2();
            let (br, bc) = inputs[1].dims2();
            let (kb, n) = if *transpose_rhs { (bc, br) } else { (br, bc) };
            if k != kb {
                return Err(Error::shape(
                    name,
                    format!(
                        "lhs {:?} incompatible with rhs {:?} (transpose_rhs={transpose_rhs})",
                        inputs[0].shape(),
                        inputs[1].shape()
                    ),
                ));
            }
            let data = if *transpose_rhs {
                matmul_t_raw(inputs[0].data(), inputs[1].data(), m, k, n)
            } else {
                matmul_raw(inputs[0].data(), inputs[1].data(), m, k, n)
            };
            Tensor::matrix(m, n, data)
        }
        Primitive::Add | Primitive::Sub | Primitive::Mul => {
            expect_inputs(prim, inputs, 2)?;
            let (a, b) = (inputs[0], inputs[1]);
            let (ad, bd) = (a.dims2(), b.dims2());
            if !broadcast_ok(ad, bd) {
                return Err(Error::shape(
                    name,
                    format!("cannot broadcast {:?} onto {:?}", b.shape(), a.shape()),
                ));
            }
            let mut out = Vec::with_capacity(a.len());
            for r in 0..ad.0 {
                for c in 0..ad.1 {
                    let x = a.data()[r * ad.1 + c];
                    let y = b.data()[bidx(bd, r, c)];
                    out.push(match prim {
                        Primitive::Add => x + y,
                        Primitive::Sub => x - y,
                        _ => x * y,
                    });
                }
            }
            Tensor::new(a.shape().to_vec(), out)
        }
        Primitive::Scale(s) => {
            expect_inputs(prim, inputs, 1)?;
            Ok(map(inputs[0], |x| s * x))
        }
        Primitive::ConcatRows => {
            if inputs.is_empty() {
                return Err(Error::shape(name, "no inputs"));
            }
            let n = inputs[0].cols();
            let mut data = Vec::new();
            let mut rows = 0;
            for t in inputs {
                if t.cols() != n {
                    return Err(Error::shape(
                        name,
                        format!("column count {} differs from {n} (shape {:?})", t.cols(), t.shape()),
                    ));
                }
                rows += t.rows();
                data.extend_from_slice(t.data());
            }
            Tensor::matrix(rows, n, data)
        }
        Primitive::Sum => {
            expect_inputs(prim, inputs, 1)?;
            Ok(Tensor::scalar(inputs[0].data().iter().sum()))
        }
        Primitive::Mean => {
            expect_inputs(prim, inputs, 1)?;
            let t = inputs[0];
            if t.is_empty() {
                return Err(Error::shape(name, "mean of empty tensor"));
            }
            Ok(Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64))
        }
        Primitive::RowMax => {
            expect_inputs(prim, inputs, 1)?;
            let (m, n) = inputs[0].dims2();
            if n == 0 {
                return Err(Error::shape(name, "row_max over zero columns"));
            }
            let data = (0..m)
                .map(|r| inputs[0].row_slice(r)[argmax(inputs[0].row_slice(r))])
                .collect();
            Tensor::matrix(m, 1, data)
        }
        Primitive::LeakyRelu(slope) => {
            expect_inputs(prim, inputs, 1)?;
            Ok(map(inputs[0], |x| if x > 0.0 { x } else { slope * x }))
        }
        Primitive::Elu => {
            expect_inputs(prim, inputs, 1)?;
            Ok(map(inputs[0], |x| if x > 0.0 { x } else { x.exp_m1() }))
        }
        Primitive::Relu => {
            expect_inputs(prim, inputs, 1)?;
            Ok(map(inputs[0], |x| x.max(0.0)))
        }
        Primitive::Softplus => {
            expect_inputs(prim, inputs, 1)?;
            Ok(map(inputs[0], softplus))
        }
        Primitive::LogSumExp { axis } => {
            expect_inputs(prim, inputs, 1)?;
            check_axis(prim, *axis)?;
            let t = inputs[0];
            let dims = t.dims2();
            let data = lanes(dims, *axis)
                .into_iter()
                .map(|lane| {
                    let mx = lane.indices().map(|i| t.data()[i]).fold(f64::NEG_INFINITY, f64::max);
                    let s: f64 = lane.indices().map(|i| (t.data()[i] - mx).exp()).sum();
                    mx + s.ln()
                })
                .collect();
            Tensor::new(reduced_shape(dims, *axis), data)
        }
        Primitive::Softmax { axis, temperature } => {
            expect_inputs(prim, inputs, 1)?;
            check_axis(prim, *axis)?;
            if *temperature <= 0.0 {
                return Err(Error::shape(name, format!("temperature {temperature} must be positive")));
            }
            let t = inputs[0];
            let mut out = vec![0.0; t.len()];
            for lane in lanes(t.dims2(), *axis) {
                let mx = lane.indices().map(|i| t.data()[i]).fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for i in lane.indices() {
                    let e = ((t.data()[i] - mx) / temperature).exp();
                    out[i] = e;
                    s += e;
                }
                lane.indices().for_each(|i| out[i] /= s);
            }
            Tensor::new(t.shape().to_vec(), out)
        }
        Primitive::L2Normalize { axis } => {
            expect_inputs(prim, inputs, 1)?;
            check_axis(prim, *axis)?;
            let t = inputs[0];
            let mut out = vec![0.0; t.len()];
            for lane in lanes(t.dims2(), *axis) {
                let nrm = lane.indices().map(|i| t.data()[i] * t.data()[i]).sum::<f64>().sqrt();
                if nrm > 0.0 {
                    lane.indices().for_each(|i| out[i] = t.data()[i] / nrm);
                }
            }
            Tensor::new(t.shape().to_vec(), out)
        }
        Primitive::Mse => {
            expect_inputs(prim, inputs, 2)?;
            let (a, b) = (inputs[0], inputs[1]);
            if a.len() != b.len() || a.is_empty() {
                return Err(Error::shape(
                    name,
                    format!("operands {:?} and {:?}", a.shape(), b.shape()),
                ));
            }
            let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
            Ok(Tensor::scalar(s / a.len() as f64))
        }
        Primitive::SoftmaxCrossEntropy { targets } => {
            expect_inputs(prim, inputs, 1)?;
            let t = inputs[0];
            let (m, c) = t.dims2();
            if targets.len() != m || targets.iter().any(|&k| k >= c) {
                return Err(Error::shape(
                    name,
                    format!("logits {:?} with targets {:?}", t.shape(), targets),
                ));
            }
            let mut total = 0.0;
            for (r, &k) in targets.iter().enumerate() {
                let row = t.row_slice(r);
                let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
                total += lse - row[k];
            }
            Ok(Tensor::scalar(total / m as f64))
        }
        Primitive::Detach => {
            expect_inputs(prim, inputs, 1)?;
            Ok(inputs[0].clone())
        }
        Primitive::GatherRows { indices } => {
            expect_inputs(prim, inputs, 1)?;
            let t = inputs[0];
            let (m, n) = t.dims2();
            let mut data = Vec::with_capacity(indices.len() * n);
            for &i in indices.iter() {
                if i >= m {
                    return Err(Error::shape(name, format!("row index {i} out of {m} rows")));
                }
                data.extend_from_slice(t.row_slice(i));
            }
            Tensor::matrix(indices.len(), n, data)
        }
        Primitive::Reshape { shape } => {
            expect_inputs(prim, inputs, 1)?;
            if shape.iter().product::<usize>() != inputs[0].len() {
                return Err(Error::shape(
                    name,
                    format!("cannot reshape {:?} to {shape:?}", inputs[0].shape()),
                ));
            }
            Ok(inputs[0].clone().reshaped(shape.clone()))
        }
        Primitive::GroupSumRows { group } => {
            expect_inputs(prim, inputs, 1)?;
            let t = inputs[0];
            let (rows, n) = t.dims2();
            if *group == 0 || rows % group != 0 {
                return Err(Error::shape(
                    name,
                    format!("{rows} rows not divisible into groups of {group}"),
                ));
            }
            let m = rows / group;
            let mut data = vec![0.0; m * n];
            for r in 0..rows {
                let dst = &mut data[(r / group) * n..(r / group + 1) * n];
                dst.iter_mut().zip(t.row_slice(r)).for_each(|(d, s)| *d += s);
            }
            Tensor::matrix(m, n, data)
        }
    }
}

/// Index of the first maximum.
pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn reduce_to(b: (usize, usize), a: (usize, usize), full: &[f64]) -> Vec<f64> {
    if b == a {
        return full.to_vec();
    }
    let mut out = vec![0.0; b.0 * b.1];
    for r in 0..a.0 {
        for c in 0..a.1 {
            out[bidx(b, r, c)] += full[r * a.1 + c];
        }
    }
    out
}

fn backward_rule(
    prim: &Primitive,
    inputs: &[&Tensor],
    out: &Tensor,
    g: &[f64],
    wanted: &[bool],
) -> Vec<Option<Vec<f64>>> {
    let elementwise = |f: &dyn Fn(f64, f64) -> f64| -> Vec<Option<Vec<f64>>> {
        vec![Some(inputs[0].data().iter().zip(g).map(|(&x, &gi)| f(x, gi)).collect())]
    };
    match prim {
        Primitive::MatMul { transpose_rhs } => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k) = a.dims2();
            let n = out.cols();
            let ga = wanted[0].then(|| {
                if *transpose_rhs {
                    // b is n×k: dA = G · b
                    matmul_raw(g, b.data(), m, n, k)
                } else {
                    // b is k×n: dA = G · bᵀ
                    matmul_t_raw(g, b.data(), m, n, k)
                }
            });
            let gb = wanted[1].then(|| {
                if *transpose_rhs {
                    // dB (n×k) = Gᵀ · a
                    matmul_tl_raw(g, a.data(), m, n, k)
                } else {
                    // dB (k×n) = aᵀ · G
                    matmul_tl_raw(a.data(), g, m, k, n)
                }
            });
            vec![ga, gb]
        }
        Primitive::Add | Primitive::Sub => {
            let (ad, bd) = (inputs[0].dims2(), inputs[1].dims2());
            let ga = wanted[0].then(|| g.to_vec());
            let gb = wanted[1].then(|| {
                let mut r = reduce_to(bd, ad, g);
                if matches!(prim, Primitive::Sub) {
                    r.iter_mut().for_each(|v| *v = -*v);
                }
                r
            });
            vec![ga, gb]
        }
        Primitive::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (ad, bd) = (a.dims2(), b.dims2());
            let ga = wanted[0].then(|| {
                let mut r = Vec::with_capacity(a.len());
                for i in 0..ad.0 {
                    for j in 0..ad.1 {
                        r.push(g[i * ad.1 + j] * b.data()[bidx(bd, i, j)]);
                    }
                }
                r
            });
            let gb = wanted[1].then(|| {
                let full: Vec<f64> = g.iter().zip(a.data()).map(|(gi, x)| gi * x).collect();
                reduce_to(bd, ad, &full)
            });
            vec![ga, gb]
        }
        Primitive::Scale(s) => vec![Some(g.iter().map(|gi| s * gi).collect())],
        Primitive::ConcatRows => {
            let mut offset = 0;
            inputs
                .iter()
                .zip(wanted)
                .map(|(t, &w)| {
                    let part = &g[offset..offset + t.len()];
                    offset += t.len();
                    w.then(|| part.to_vec())
                })
                .collect()
        }
        Primitive::Sum => vec![Some(vec![g[0]; inputs[0].len()])],
        Primitive::Mean => vec![Some(vec![g[0] / inputs[0].len() as f64; inputs[0].len()])],
        Primitive::RowMax => {
            let t = inputs[0];
            let (m, n) = t.dims2();
            let mut r = vec![0.0; t.len()];
            for row in 0..m {
                r[row * n + argmax(t.row_slice(row))] = g[row];
            }
            vec![Some(r)]
        }
        Primitive::LeakyRelu(slope) => elementwise(&|x, gi| if x > 0.0 { gi } else { slope * gi }),
        Primitive::Elu => elementwise(&|x, gi| if x > 0.0 { gi } else { x.exp() * gi }),
        Primitive::Relu => elementwise(&|x, gi| if x > 0.0 { gi } else { 0.0 }),
        Primitive::Softplus => elementwise(&|x, gi| sigmoid(x) * gi),
        Primitive::LogSumExp { axis } => {
            let t = inputs[0];
            let mut r = vec![0.0; t.len()];
            for (li, lane) in lanes(t.dims2(), *axis).into_iter().enumerate() {
                let lse = out.data()[li];
                for i in lane.indices() {
                    r[i] = g[li] * (t.data()[i] - lse).exp();
                }
            }
            vec![Some(r)]
        }
        Primitive::Softmax { axis, temperature } => {
            let y = out.data();
            let mut r = vec![0.0; y.len()];
            for lane in lanes(out.dims2(), *axis) {
                let s: f64 = lane.indices().map(|i| g[i] * y[i]).sum();
                for i in lane.indices() {
                    r[i] = y[i] * (g[i] - s) / temperature;
                }
            }
            vec![Some(r)]
        }
        Primitive::L2Normalize { axis } => {
            let t = inputs[0];
            let y = out.data();
            let mut r = vec![0.0; y.len()];
            for lane in lanes(t.dims2(), *axis) {
                let nrm = lane.indices().map(|i| t.data()[i] * t.data()[i]).sum::<f64>().sqrt();
                if nrm == 0.0 {
                    continue;
                }
                let yg: f64 = lane.indices().map(|i| y[i] * g[i]).sum();
                for i in lane.indices() {
                    r[i] = (g[i] - y[i] * yg) / nrm;
                }
            }
            vec![Some(r)]
        }
        Primitive::Mse => {
            let (a, b) = (inputs[0], inputs[1]);
            let scale = 2.0 * g[0] / a.len() as f64;
            let d: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| scale * (x - y)).collect();
            let gb = wanted[1].then(|| d.iter().map(|v| -v).collect());
            vec![wanted[0].then_some(d), gb]
        }
        Primitive::SoftmaxCrossEntropy { targets } => {
            let t = inputs[0];
            let (m, c) = t.dims2();
            let mut r = vec![0.0; t.len()];
            let scale = g[0] / m as f64;
            for (row, &k) in targets.iter().enumerate() {
                let x = t.row_slice(row);
                let mx = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = x.iter().map(|v| (v - mx).exp()).sum();
                for j in 0..c {
                    let p = (x[j] - mx).exp() / s;
                    r[row * c + j] = scale * (p - if j == k { 1.0 } else { 0.0 });
                }
            }
            vec![Some(r)]
        }
        Primitive::Detach => vec![None],
        Primitive::GatherRows { indices } => {
            let t = inputs[0];
            let n = t.cols();
            let mut r = vec![0.0; t.len()];
            for (k, &i) in indices.iter().enumerate() {
                let dst = &mut r[i * n..(i + 1) * n];
                dst.iter_mut().zip(&g[k * n..(k + 1) * n]).for_each(|(d, s)| *d += s);
            }
            vec![Some(r)]
        }
        Primitive::Reshape { .. } => vec![Some(g.to_vec())],
        Primitive::GroupSumRows { group } => {
            let t = inputs[0];
            let (rows, n) = t.dims2();
            let mut r = vec![0.0; t.len()];
            for row in 0..rows {
                let src = &g[(row / group) * n..(row / group + 1) * n];
                r[row * n..(row + 1) * n].copy_from_slice(src);
            }
            vec![Some(r)]
        }
    }
}
