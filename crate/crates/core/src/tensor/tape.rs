//! Reverse-mode differentiation over a linear tape.
//!
//! Every primitive appends one node holding its forward value and whatever
//! the backward rule needs. Parents always precede their children, so a
//! single reverse sweep visits nodes in a valid order.

use super::kernels::{self, ConvGeom};
use super::{conv_output_dim, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive kinds; one backward rule per variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Scale,
    AddScalar,
    AddRow,
    MatMul,
    Conv2d,
    MaxPool2d,
    Relu,
    Reshape,
    Sum,
    Mean,
    MeanRows,
    Log,
    Exp,
    ClampMin,
    Softmax,
    LogSoftmax,
    Pick,
    SelectRows,
    SqDist,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f32),
    AddScalar(Var),
    AddRow(Var, Var),
    MatMul(Var, Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<u32>,
    },
    Relu(Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    Log(Var),
    Exp(Var),
    ClampMin(Var, f32),
    Softmax {
        input: Var,
        tau: f32,
    },
    LogSoftmax {
        input: Var,
        tau: f32,
    },
    Pick {
        input: Var,
        index: Vec<usize>,
    },
    SelectRows {
        input: Var,
        index: Vec<usize>,
    },
    SqDist(Var, Var),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Div(..) => OpKind::Div,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::AddRow(..) => OpKind::AddRow,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::MaxPool2d { .. } => OpKind::MaxPool2d,
            Op::Relu(..) => OpKind::Relu,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::MeanRows(..) => OpKind::MeanRows,
            Op::Log(..) => OpKind::Log,
            Op::Exp(..) => OpKind::Exp,
            Op::ClampMin(..) => OpKind::ClampMin,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::LogSoftmax { .. } => OpKind::LogSoftmax,
            Op::Pick { .. } => OpKind::Pick,
            Op::SelectRows { .. } => OpKind::SelectRows,
            Op::SqDist(..) => OpKind::SqDist,
        }
    }

    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::AddRow(a, b)
            | Op::MatMul(a, b)
            | Op::SqDist(a, b) => vec![*a, *b],
            Op::Conv2d {
                input,
                weight,
                bias,
                ..
            } => vec![*input, *weight, *bias],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Relu(a)
            | Op::Reshape(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::MeanRows(a)
            | Op::Log(a)
            | Op::Exp(a)
            | Op::ClampMin(a, _) => vec![*a],
            Op::MaxPool2d { input, .. }
            | Op::Softmax { input, .. }
            | Op::LogSoftmax { input, .. }
            | Op::Pick { input, .. }
            | Op::SelectRows { input, .. } => vec![*input],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of one scalar root with respect to the tape's leaves.
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    /// Raw gradient of a leaf, `None` if it did not influence the root.
    pub fn get(&self, var: Var) -> Option<&[f32]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Gradient of a leaf shaped like its value; zeros when the leaf did not
    /// participate.
    pub fn wrt(&self, tape: &Tape, var: Var) -> Tensor {
        let shape = tape.value(var).shape().to_vec();
        match self.get(var) {
            Some(g) => Tensor::from_parts(shape, g.to_vec()),
            None => Tensor::zeros(&shape),
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, lhs: &Tensor, rhs: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: lhs.shape().to_vec(),
        rhs: rhs.shape().to_vec(),
    }
}

fn rank_err(op: &'static str, t: &Tensor, want: &str) -> Error {
    Error::invalid(format!("{op}: expected {want}, got shape {:?}", t.shape()))
}

/// Rows and row length of a tensor viewed as a matrix over its last axis.
fn as_rows(t: &Tensor) -> (usize, usize) {
    let cols = *t.shape().last().unwrap();
    (t.len() / cols, cols)
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn kind(&self, var: Var) -> OpKind {
        self.nodes[var.0].op.kind()
    }

    /// Kinds of all recorded nodes, in recording order.
    pub fn kinds(&self) -> Vec<OpKind> {
        self.nodes.iter().map(|n| n.op.kind()).collect()
    }

    pub fn parents(&self, var: Var) -> Vec<Var> {
        self.nodes[var.0].op.parents()
    }

    /// A differentiable leaf (parameter).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// A leaf no gradient is requested for (input data).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op
            .parents()
            .iter()
            .any(|p| self.nodes[p.0].requires_grad);
        self.push_raw(value, op, requires_grad)
    }

    fn check_binary(&self, op: &'static str, a: Var, b: Var) -> Result<bool> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() == vb.shape() {
            Ok(false)
        } else if vb.len() == 1 {
            Ok(true)
        } else {
            Err(shape_err(op, va, vb))
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f32, f32) -> f32,
        op: Op,
    ) -> Result<Var> {
        let broadcast = self.check_binary(name, a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data: Vec<f32> = if broadcast {
            let s = vb.data()[0];
            va.data().iter().map(|&x| f(x, s)).collect()
        } else {
            va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect()
        };
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        Ok(self.push(out, op))
    }

    /// Elementwise `a + b`; `b` may be a one-element tensor broadcast over `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f32) -> Var {
        let v = self.value(a);
        let out = Tensor::from_parts(
            v.shape().to_vec(),
            v.data().iter().map(|x| x * factor).collect(),
        );
        self.push(out, Op::Scale(a, factor))
    }

    pub fn add_scalar(&mut self, a: Var, offset: f32) -> Var {
        let v = self.value(a);
        let out = Tensor::from_parts(
            v.shape().to_vec(),
            v.data().iter().map(|x| x + offset).collect(),
        );
        self.push(out, Op::AddScalar(a))
    }

    /// `a (n, m) + b (m)` with `b` broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() != 2 || vb.rank() != 1 || va.shape()[1] != vb.shape()[0] {
            return Err(shape_err("add_row", va, vb));
        }
        let m = vb.len();
        let mut data = va.data().to_vec();
        for row in data.chunks_mut(m) {
            for (x, b) in row.iter_mut().zip(vb.data()) {
                *x += *b;
            }
        }
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        Ok(self.push(out, Op::AddRow(a, b)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() != 2 || vb.rank() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(shape_err("matmul", va, vb));
        }
        let (n, k, m) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
        let mut data = vec![0.0; n * m];
        kernels::gemm(n, k, m, va.data(), false, vb.data(), false, &mut data, false);
        let out = Tensor::from_parts(vec![n, m], data);
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// Valid-padding 2-D convolution. `input` is (batch, channels, rows,
    /// cols), `weight` is (out, channels, k_rows, k_cols), `bias` is (out).
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize) -> Result<Var> {
        let (vx, vw, vb) = (self.value(input), self.value(weight), self.value(bias));
        if vx.rank() != 4 || vw.rank() != 4 || vx.shape()[1] != vw.shape()[1] {
            return Err(shape_err("conv2d", vx, vw));
        }
        if vb.rank() != 1 || vb.shape()[0] != vw.shape()[0] {
            return Err(shape_err("conv2d bias", vw, vb));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d: stride must be positive"));
        }
        let (batch, channels, rows, cols) =
            (vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]);
        let (out_ch, kr, kc) = (vw.shape()[0], vw.shape()[2], vw.shape()[3]);
        let (Some(out_rows), Some(out_cols)) = (
            conv_output_dim(rows, kr, stride),
            conv_output_dim(cols, kc, stride),
        ) else {
            return Err(shape_err("conv2d", vx, vw));
        };
        let geom = ConvGeom {
            channels,
            rows,
            cols,
            kernel_rows: kr,
            kernel_cols: kc,
            stride,
            out_rows,
            out_cols,
        };
        let (plen, olen, ilen) = (geom.patch_len(), geom.out_len(), geom.in_len());
        let mut out = vec![0.0; batch * out_ch * olen];
        let mut buf = vec![0.0; plen * olen];
        for n in 0..batch {
            kernels::im2col(&vx.data()[n * ilen..(n + 1) * ilen], &geom, &mut buf);
            let dst = &mut out[n * out_ch * olen..(n + 1) * out_ch * olen];
            kernels::gemm(out_ch, plen, olen, vw.data(), false, &buf, false, dst, false);
            for (o, plane) in dst.chunks_mut(olen).enumerate() {
                let b = vb.data()[o];
                plane.iter_mut().for_each(|v| *v += b);
            }
        }
        let out = Tensor::from_parts(vec![batch, out_ch, out_rows, out_cols], out);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
        ))
    }

    /// Non-overlapping `size × size` max-pool on (batch, channels, rows,
    /// cols); trailing rows/cols that do not fill a window are dropped.
    pub fn max_pool2d(&mut self, input: Var, size: usize) -> Result<Var> {
        let vx = self.value(input);
        if vx.rank() != 4 || size == 0 || vx.shape()[2] < size || vx.shape()[3] < size {
            return Err(rank_err("max_pool2d", vx, "(batch, channels, rows, cols) >= window"));
        }
        let s = vx.shape();
        let (out, argmax) = kernels::max_pool(vx.data(), s[0] * s[1], s[2], s[3], size);
        let out = Tensor::from_parts(vec![s[0], s[1], s[2] / size, s[3] / size], out);
        Ok(self.push(out, Op::MaxPool2d { input, argmax }))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = Tensor::from_parts(
            v.shape().to_vec(),
            v.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect(),
        );
        self.push(out, Op::Relu(a))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(a).reshaped(shape)?;
        Ok(self.push(out, Op::Reshape(a)))
    }

    /// Collapse all axes after the first: (n, ...) → (n, rest).
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let n = v.shape()[0];
        let rest = v.len() / n;
        self.reshape(a, vec![n, rest])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f32 = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s: f32 = v.data().iter().sum::<f32>() / v.len() as f32;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    /// Mean over the first axis: (n, m) → (m).
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.rank() != 2 {
            return Err(rank_err("mean_rows", v, "rank 2"));
        }
        let (n, m) = (v.shape()[0], v.shape()[1]);
        let mut acc = vec![0.0f32; m];
        for row in v.data().chunks(m) {
            for (a, x) in acc.iter_mut().zip(row) {
                *a += *x;
            }
        }
        acc.iter_mut().for_each(|a| *a /= n as f32);
        Ok(self.push(Tensor::from_parts(vec![m], acc), Op::MeanRows(a)))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|x| x.ln()).collect());
        self.push(out, Op::Log(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|x| x.exp()).collect());
        self.push(out, Op::Exp(a))
    }

    /// `max(a, floor)` elementwise; gradient passes only where `a >= floor`.
    pub fn clamp_min(&mut self, a: Var, floor: f32) -> Var {
        let v = self.value(a);
        let out = Tensor::from_parts(
            v.shape().to_vec(),
            v.data().iter().map(|&x| x.max(floor)).collect(),
        );
        self.push(out, Op::ClampMin(a, floor))
    }

    /// Row-wise `softmax(logits / tau)` over the last axis, computed with
    /// max subtraction.
    pub fn softmax(&mut self, a: Var, tau: f32) -> Result<Var> {
        check_tau(tau)?;
        let v = self.value(a);
        let (_, m) = as_rows(v);
        let mut data = v.data().to_vec();
        for row in data.chunks_mut(m) {
            softmax_row(row, tau);
        }
        let out = Tensor::from_parts(v.shape().to_vec(), data);
        Ok(self.push(out, Op::Softmax { input: a, tau }))
    }

    /// Row-wise `log softmax(logits / tau)` over the last axis.
    pub fn log_softmax(&mut self, a: Var, tau: f32) -> Result<Var> {
        check_tau(tau)?;
        let v = self.value(a);
        let (_, m) = as_rows(v);
        let mut data = v.data().to_vec();
        for row in data.chunks_mut(m) {
            let max = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
            let mut z = 0.0f32;
            for x in row.iter_mut() {
                *x = (*x - max) / tau;
                z += x.exp();
            }
            let lz = z.ln();
            row.iter_mut().for_each(|x| *x -= lz);
        }
        let out = Tensor::from_parts(v.shape().to_vec(), data);
        Ok(self.push(out, Op::LogSoftmax { input: a, tau }))
    }

    /// `out[i] = a[i, index[i]]` for a rank-2 `a`.
    pub fn pick(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let v = self.value(a);
        if v.rank() != 2 || v.shape()[0] != index.len() {
            return Err(rank_err("pick", v, &format!("({}, classes)", index.len())));
        }
        let m = v.shape()[1];
        if let Some(bad) = index.iter().find(|&&i| i >= m) {
            return Err(Error::invalid(format!("pick: index {bad} out of range {m}")));
        }
        let data = index
            .iter()
            .enumerate()
            .map(|(r, &c)| v.data()[r * m + c])
            .collect();
        let out = Tensor::from_parts(vec![index.len()], data);
        Ok(self.push(
            out,
            Op::Pick {
                input: a,
                index: index.to_vec(),
            },
        ))
    }

    /// Gather entries along the first axis.
    pub fn select_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let v = self.value(a);
        let n = v.shape()[0];
        if index.is_empty() {
            return Err(Error::invalid("select_rows: empty index"));
        }
        if let Some(bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::invalid(format!(
                "select_rows: index {bad} out of range {n}"
            )));
        }
        let stride = v.len() / n;
        let mut data = Vec::with_capacity(index.len() * stride);
        for &i in index {
            data.extend_from_slice(&v.data()[i * stride..(i + 1) * stride]);
        }
        let mut shape = v.shape().to_vec();
        shape[0] = index.len();
        let out = Tensor::from_parts(shape, data);
        Ok(self.push(
            out,
            Op::SelectRows {
                input: a,
                index: index.to_vec(),
            },
        ))
    }

    /// Row-wise squared Euclidean distance: (n, d), (n, d) → (n).
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() || va.rank() != 2 {
            return Err(shape_err("sq_dist", va, vb));
        }
        let d = va.shape()[1];
        let data = va
            .data()
            .chunks(d)
            .zip(vb.data().chunks(d))
            .map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum())
            .collect();
        let out = Tensor::from_parts(vec![va.shape()[0]], data);
        Ok(self.push(out, Op::SqDist(a, b)))
    }

    /// Gradients of the scalar `loss` with respect to every differentiable
    /// leaf that influences it.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::invalid(format!(
                "backward: loss must be scalar, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.backward_node(node, &dy, &mut grads);
        }
        Ok(Gradients { grads })
    }

    /// Convenience form returning one gradient per target, zeros for targets
    /// the loss does not depend on.
    pub fn gradients(&self, loss: Var, targets: &[Var]) -> Result<Vec<Tensor>> {
        let g = self.backward(loss)?;
        Ok(targets.iter().map(|&t| g.wrt(self, t)).collect())
    }

    fn backward_node(&self, node: &Node, dy: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |g| add_into(g, dy));
                self.accumulate_broadcast(grads, *b, dy.len(), |g, broadcast| {
                    if broadcast {
                        g[0] += dy.iter().sum::<f32>();
                    } else {
                        add_into(g, dy);
                    }
                });
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |g| add_into(g, dy));
                self.accumulate_broadcast(grads, *b, dy.len(), |g, broadcast| {
                    if broadcast {
                        g[0] -= dy.iter().sum::<f32>();
                    } else {
                        g.iter_mut().zip(dy).for_each(|(g, d)| *g -= d);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let bcast = vb.len() == 1 && va.len() != 1;
                self.accumulate(grads, *a, |g| {
                    for (i, gi) in g.iter_mut().enumerate() {
                        *gi += dy[i] * if bcast { vb[0] } else { vb[i] };
                    }
                });
                self.accumulate_broadcast(grads, *b, dy.len(), |g, broadcast| {
                    if broadcast {
                        g[0] += dy.iter().zip(va).map(|(d, x)| d * x).sum::<f32>();
                    } else {
                        g.iter_mut().zip(dy.iter().zip(va)).for_each(|(g, (d, x))| *g += d * x);
                    }
                });
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let bcast = vb.len() == 1 && va.len() != 1;
                self.accumulate(grads, *a, |g| {
                    for (i, gi) in g.iter_mut().enumerate() {
                        *gi += dy[i] / if bcast { vb[0] } else { vb[i] };
                    }
                });
                self.accumulate_broadcast(grads, *b, dy.len(), |g, broadcast| {
                    if broadcast {
                        let s = vb[0];
                        g[0] -= dy.iter().zip(va).map(|(d, x)| d * x).sum::<f32>() / (s * s);
                    } else {
                        for i in 0..g.len() {
                            g[i] -= dy[i] * va[i] / (vb[i] * vb[i]);
                        }
                    }
                });
            }
            Op::Scale(a, f) => {
                self.accumulate(grads, *a, |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += d * f));
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                self.accumulate(grads, *a, |g| add_into(g, dy));
            }
            Op::AddRow(a, b) => {
                self.accumulate(grads, *a, |g| add_into(g, dy));
                let m = self.value(*b).len();
                self.accumulate(grads, *b, |g| {
                    for row in dy.chunks(m) {
                        add_into(g, row);
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (n, k, m) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                self.accumulate(grads, *a, |g| {
                    kernels::gemm(n, m, k, dy, false, vb.data(), true, g, true);
                });
                self.accumulate(grads, *b, |g| {
                    kernels::gemm(k, n, m, va.data(), true, dy, false, g, true);
                });
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => self.conv_backward(*input, *weight, *bias, geom, dy, grads),
            Op::MaxPool2d { input, argmax } => {
                self.accumulate(grads, *input, |g| {
                    for (d, &idx) in dy.iter().zip(argmax) {
                        g[idx as usize] += d;
                    }
                });
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                self.accumulate(grads, *a, |g| {
                    for i in 0..g.len() {
                        if x[i] > 0.0 {
                            g[i] += dy[i];
                        }
                    }
                });
            }
            Op::Sum(a) => {
                self.accumulate(grads, *a, |g| g.iter_mut().for_each(|g| *g += dy[0]));
            }
            Op::Mean(a) => {
                let n = self.value(*a).len() as f32;
                self.accumulate(grads, *a, |g| g.iter_mut().for_each(|g| *g += dy[0] / n));
            }
            Op::MeanRows(a) => {
                let v = self.value(*a);
                let (n, m) = (v.shape()[0], v.shape()[1]);
                self.accumulate(grads, *a, |g| {
                    for row in g.chunks_mut(m) {
                        row.iter_mut().zip(dy).for_each(|(g, d)| *g += d / n as f32);
                    }
                });
            }
            Op::Log(a) => {
                let x = self.value(*a).data();
                self.accumulate(grads, *a, |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] / x[i];
                    }
                });
            }
            Op::Exp(a) => {
                self.accumulate(grads, *a, |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * y.data()[i];
                    }
                });
            }
            Op::ClampMin(a, floor) => {
                let x = self.value(*a).data();
                self.accumulate(grads, *a, |g| {
                    for i in 0..g.len() {
                        if x[i] >= *floor {
                            g[i] += dy[i];
                        }
                    }
                });
            }
            Op::Softmax { input, tau } => {
                let (_, m) = as_rows(y);
                self.accumulate(grads, *input, |g| {
                    for ((g, p), d) in g.chunks_mut(m).zip(y.data().chunks(m)).zip(dy.chunks(m)) {
                        let dot: f32 = p.iter().zip(d).map(|(p, d)| p * d).sum();
                        for j in 0..m {
                            g[j] += p[j] * (d[j] - dot) / tau;
                        }
                    }
                });
            }
            Op::LogSoftmax { input, tau } => {
                let (_, m) = as_rows(y);
                self.accumulate(grads, *input, |g| {
                    for ((g, ly), d) in g.chunks_mut(m).zip(y.data().chunks(m)).zip(dy.chunks(m)) {
                        let total: f32 = d.iter().sum();
                        for j in 0..m {
                            g[j] += (d[j] - ly[j].exp() * total) / tau;
                        }
                    }
                });
            }
            Op::Pick { input, index } => {
                let m = self.value(*input).shape()[1];
                self.accumulate(grads, *input, |g| {
                    for (r, &c) in index.iter().enumerate() {
                        g[r * m + c] += dy[r];
                    }
                });
            }
            Op::SelectRows { input, index } => {
                let v = self.value(*input);
                let stride = v.len() / v.shape()[0];
                self.accumulate(grads, *input, |g| {
                    for (k, &i) in index.iter().enumerate() {
                        add_into(
                            &mut g[i * stride..(i + 1) * stride],
                            &dy[k * stride..(k + 1) * stride],
                        );
                    }
                });
            }
            Op::SqDist(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let d = self.value(*a).shape()[1];
                self.accumulate(grads, *a, |g| {
                    for i in 0..g.len() {
                        g[i] += 2.0 * (va[i] - vb[i]) * dy[i / d];
                    }
                });
                self.accumulate(grads, *b, |g| {
                    for i in 0..g.len() {
                        g[i] -= 2.0 * (va[i] - vb[i]) * dy[i / d];
                    }
                });
            }
        }
    }

    fn conv_backward(
        &self,
        input: Var,
        weight: Var,
        bias: Var,
        geom: &ConvGeom,
        dy: &[f32],
        grads: &mut [Option<Vec<f32>>],
    ) {
        let vx = self.value(input);
        let vw = self.value(weight);
        let out_ch = vw.shape()[0];
        let batch = vx.shape()[0];
        let (plen, olen, ilen) = (geom.patch_len(), geom.out_len(), geom.in_len());
        let mut buf = vec![0.0; plen * olen];

        self.accumulate(grads, bias, |g| {
            for n in 0..batch {
                for (o, plane) in dy[n * out_ch * olen..(n + 1) * out_ch * olen]
                    .chunks(olen)
                    .enumerate()
                {
                    g[o] += plane.iter().sum::<f32>();
                }
            }
        });
        self.accumulate(grads, weight, |g| {
            for n in 0..batch {
                kernels::im2col(&vx.data()[n * ilen..(n + 1) * ilen], geom, &mut buf);
                let d = &dy[n * out_ch * olen..(n + 1) * out_ch * olen];
                kernels::gemm(out_ch, olen, plen, d, false, &buf, true, g, true);
            }
        });
        self.accumulate(grads, input, |g| {
            for n in 0..batch {
                let d = &dy[n * out_ch * olen..(n + 1) * out_ch * olen];
                kernels::gemm(plen, out_ch, olen, vw.data(), true, d, false, &mut buf, false);
                kernels::col2im(&buf, geom, &mut g[n * ilen..(n + 1) * ilen]);
            }
        });
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f32>>], var: Var, f: impl FnOnce(&mut [f32])) {
        let node = &self.nodes[var.0];
        if !node.requires_grad {
            return;
        }
        let g = grads[var.0].get_or_insert_with(|| vec![0.0; node.value.len()]);
        f(g);
    }

    fn accumulate_broadcast(
        &self,
        grads: &mut [Option<Vec<f32>>],
        var: Var,
        out_len: usize,
        f: impl FnOnce(&mut [f32], bool),
    ) {
        let broadcast = self.nodes[var.0].value.len() == 1 && out_len != 1;
        self.accumulate(grads, var, |g| f(g, broadcast));
    }
}

fn check_tau(tau: f32) -> Result<()> {
    if tau.is_finite() && tau > 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("softmax temperature must be > 0, got {tau}")))
    }
}

fn softmax_row(row: &mut [f32], tau: f32) {
    let max = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
    let mut z = 0.0f32;
    for x in row.iter_mut() {
        *x = ((*x - max) / tau).exp();
        z += *x;
    }
    row.iter_mut().for_each(|x| *x /= z);
}

fn add_into(g: &mut [f32], d: &[f32]) {
    g.iter_mut().zip(d).for_each(|(g, d)| *g += d);
}

/// Temperature softmax of a plain tensor (rows over the last axis).
pub fn softmax_with_temperature(logits: &Tensor, tau: f32) -> Result<Tensor> {
    check_tau(tau)?;
    let (_, m) = as_rows(logits);
    let mut data = logits.data().to_vec();
    for row in data.chunks_mut(m) {
        softmax_row(row, tau);
    }
    Ok(Tensor::from_parts(logits.shape().to_vec(), data))
}
