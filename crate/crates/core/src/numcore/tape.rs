//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends one node whose inputs already exist on the tape, so node
//! order is a topological order and [`Tape::backward`] is a single reverse
//! sweep that visits each node once.

use super::kernels::{self, ConvGeom};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBias(Var, Var),
    AddChannelBias(Var, Var),
    ScaleChannels(Var, Var),
    Affine(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    SoftmaxRows(Var, f64),
    LogSoftmaxRows(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    GlobalAvgPool(Var),
    Reshape(Var),
    Concat(Vec<Var>),
    SumAll(Var),
    MeanAll(Var),
    SumRows(Var),
    BceWithLogits(Var, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Recorded computation graph. Single-owner: one tape per training step.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn rows_cols(t: &Tensor) -> (usize, usize) {
    match t.shape() {
        [n] => (1, *n),
        [m, n] => (*m, *n),
        _ => unreachable!("callers check rank"),
    }
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

    /// Records an input tensor. Parameters are leaves with `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last [`backward`](Self::backward), if the
    /// node received any.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Gradient as a tensor, zero-filled when the node received none.
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let value = &self.nodes[v.0].value;
        match &self.nodes[v.0].grad {
            Some(g) => Tensor::new(value.shape().to_vec(), g.clone()).expect("grad shape"),
            None => Tensor::zeros(value.shape()),
        }
    }

    fn push(&mut self, value: Tensor, inputs: &[Var], op: Op) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let src = &self.nodes[x.0].value;
        let data = src.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        self.push(value, &[x], op)
    }

    fn zip(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(dim_err(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, &[a, b], op))
    }

    /// `[m,k] · [k,n] → [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, k, k2, n) = match (ta.shape(), tb.shape()) {
            ([m, k], [k2, n]) => (*m, *k, *k2, *n),
            _ => return Err(dim_err("matmul", ta, tb)),
        };
        if k != k2 {
            return Err(dim_err("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, 0.0);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, &[a, b], Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let [m, n] = *t.shape() else {
            return Err(Error::Shape {
                op: "transpose",
                shape: t.shape().to_vec(),
                reason: "expected a 2-D tensor".into(),
            });
        };
        let src = t.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let value = Tensor::new(vec![n, m], out)?;
        Ok(self.push(value, &[x], Op::Transpose(x)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// `x[i][j] + bias[j]` for `x: [m,n]`, `bias: [n]`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (&self.nodes[x.0].value, &self.nodes[bias.0].value);
        let ([_, n], [nb]) = (tx.shape(), tb.shape()) else {
            return Err(dim_err("add_row_bias", tx, tb));
        };
        if n != nb {
            return Err(dim_err("add_row_bias", tx, tb));
        }
        let n = *n;
        let b = tb.data();
        let data = tx.data().iter().enumerate().map(|(i, &v)| v + b[i % n]).collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(value, &[x, bias], Op::AddRowBias(x, bias)))
    }

    /// `x[c, ...] + bias[c]` broadcast over trailing dims.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (&self.nodes[x.0].value, &self.nodes[bias.0].value);
        if tb.ndim() != 1 || tx.ndim() < 2 || tx.shape()[0] != tb.shape()[0] {
            return Err(dim_err("add_channel_bias", tx, tb));
        }
        let per = tx.numel() / tx.shape()[0];
        let b = tb.data();
        let data = tx.data().iter().enumerate().map(|(i, &v)| v + b[i / per]).collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(value, &[x, bias], Op::AddChannelBias(x, bias)))
    }

    /// `x[c, ...] · gate[c]` broadcast over trailing dims.
    pub fn scale_channels(&mut self, x: Var, gate: Var) -> Result<Var> {
        let (tx, tg) = (&self.nodes[x.0].value, &self.nodes[gate.0].value);
        if tg.ndim() != 1 || tx.ndim() < 2 || tx.shape()[0] != tg.shape()[0] {
            return Err(dim_err("scale_channels", tx, tg));
        }
        let per = tx.numel() / tx.shape()[0];
        let g = tg.data();
        let data = tx.data().iter().enumerate().map(|(i, &v)| v * g[i / per]).collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(value, &[x, gate], Op::ScaleChannels(x, gate)))
    }

    /// `scale · x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        self.unary(x, |v| scale * v + shift, Op::Affine(x, scale))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    /// Smallest `|x|` over the inputs of every recorded `relu`, or infinity
    /// when there is none. Finite differences are unreliable near zero.
    pub fn min_relu_margin(&self) -> f64 {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => Some(self.nodes[x.0].value.data().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()))),
                _ => None,
            })
            .fold(f64::INFINITY, f64::min)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, kernels::sigmoid, Op::Sigmoid(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, kernels::softplus, Op::Softplus(x))
    }

    /// Row-wise `softmax(x / scale)` with row-max subtraction. 1-D inputs are
    /// treated as a single row.
    pub fn softmax_rows(&mut self, x: Var, scale: f64) -> Result<Var> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Contract(format!("softmax scale must be positive, got {scale}")));
        }
        let t = &self.nodes[x.0].value;
        if t.ndim() > 2 {
            return Err(Error::Shape {
                op: "softmax_rows",
                shape: t.shape().to_vec(),
                reason: "expected a 1-D or 2-D tensor".into(),
            });
        }
        if !t.is_finite() {
            return Err(Error::Numeric("softmax_rows input".into()));
        }
        let (_, n) = rows_cols(t);
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = ((*v - max) / scale).exp();
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(value, &[x], Op::SoftmaxRows(x, scale)))
    }

    /// Row-wise log-softmax (1-D inputs are a single row).
    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if t.ndim() > 2 {
            return Err(Error::Shape {
                op: "log_softmax_rows",
                shape: t.shape().to_vec(),
                reason: "expected a 1-D or 2-D tensor".into(),
            });
        }
        if !t.is_finite() {
            return Err(Error::Numeric("log_softmax_rows input".into()));
        }
        let (_, n) = rows_cols(t);
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(value, &[x], Op::LogSoftmaxRows(x)))
    }

    /// Cross-correlation of `input: [c_in,h,w]` with `kernel: [c_out,c_in,k,k]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (ti, tk) = (&self.nodes[input.0].value, &self.nodes[kernel.0].value);
        let (&[c_in, h, w], &[c_out, kc, k, k2]) = (ti.shape(), tk.shape()) else {
            return Err(dim_err("conv2d", ti, tk));
        };
        if c_in != kc || k != k2 {
            return Err(dim_err("conv2d", ti, tk));
        }
        if stride == 0 {
            return Err(Error::Geometry {
                op: "conv2d",
                detail: "stride must be positive".into(),
            });
        }
        let (span_h, span_w) = (h + 2 * padding, w + 2 * padding);
        if span_h < k || span_w < k {
            return Err(Error::Geometry {
                op: "conv2d",
                detail: format!("kernel {k} exceeds padded input {span_h}x{span_w}"),
            });
        }
        if (span_h - k) % stride != 0 || (span_w - k) % stride != 0 {
            return Err(Error::Geometry {
                op: "conv2d",
                detail: format!(
                    "({h}+2*{padding}-{k})/{stride}+1 = {:.2} and ({w}+2*{padding}-{k})/{stride}+1 = {:.2} must both be integers",
                    (span_h - k) as f64 / stride as f64 + 1.0,
                    (span_w - k) as f64 / stride as f64 + 1.0,
                ),
            });
        }
        let geom = ConvGeom {
            c_in,
            h,
            w,
            k,
            stride,
            pad: padding,
            h_out: (span_h - k) / stride + 1,
            w_out: (span_w - k) / stride + 1,
        };
        let mut cols = vec![0.0; geom.patch_len() * geom.out_len()];
        kernels::im2col(ti.data(), &geom, &mut cols);
        let mut out = vec![0.0; c_out * geom.out_len()];
        kernels::gemm(
            c_out,
            geom.patch_len(),
            geom.out_len(),
            tk.data(),
            false,
            &cols,
            false,
            &mut out,
            0.0,
        );
        let value = Tensor::new(vec![c_out, geom.h_out, geom.w_out], out)?;
        Ok(self.push(
            value,
            &[input, kernel],
            Op::Conv2d {
                input,
                kernel,
                geom,
                cols,
            },
        ))
    }

    /// Mean over the spatial grid: `[c,h,w] → [c]`.
    pub fn global_average_pool(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let &[c, h, w] = t.shape() else {
            return Err(Error::Shape {
                op: "global_average_pool",
                shape: t.shape().to_vec(),
                reason: "expected [c,h,w]".into(),
            });
        };
        let per = h * w;
        let data = t
            .data()
            .chunks(per)
            .map(|plane| plane.iter().sum::<f64>() / per as f64)
            .collect();
        let value = Tensor::new(vec![c], data)?;
        Ok(self.push(value, &[x], Op::GlobalAvgPool(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes[x.0].value.reshaped(shape)?;
        Ok(self.push(value, &[x], Op::Reshape(x)))
    }

    /// Concatenation along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let tail = self.nodes[first.0].value.shape()[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for p in parts {
            let t = &self.nodes[p.0].value;
            if t.shape()[1..] != tail[..] {
                return Err(dim_err("concat", &self.nodes[first.0].value, t));
            }
            lead += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, parts, Op::Concat(parts.to_vec())))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.data().iter().sum();
        self.push(Tensor::scalar(s), &[x], Op::SumAll(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = &self.nodes[x.0].value;
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(s), &[x], Op::MeanAll(x))
    }

    /// `[m,n] → [m]`, summing each row.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let &[_, n] = t.shape() else {
            return Err(Error::Shape {
                op: "sum_rows",
                shape: t.shape().to_vec(),
                reason: "expected a 2-D tensor".into(),
            });
        };
        let data = t.data().chunks(n).map(|r| r.iter().sum()).collect();
        Ok(self.push(Tensor::vector(data), &[x], Op::SumRows(x)))
    }

    /// Mean binary cross-entropy between `sigmoid(logits)` and fixed targets,
    /// evaluated in the stable `softplus(z) - y·z` form.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let t = &self.nodes[logits.0].value;
        if t.numel() != targets.len() {
            return Err(Error::Dimension {
                op: "bce_with_logits",
                lhs: t.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let n = targets.len() as f64;
        let loss = t
            .data()
            .iter()
            .zip(targets)
            .map(|(&z, &y)| kernels::softplus(z) - y * z)
            .sum::<f64>()
            / n;
        Ok(self.push(
            Tensor::scalar(loss),
            &[logits],
            Op::BceWithLogits(logits, targets.to_vec()),
        ))
    }

    /// Reverse sweep from a scalar `loss`, populating `grad` on every node
    /// that requires it. Fan-out contributions are summed.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let numel = self.nodes[loss.0].value.numel();
        if numel != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[id].grad.take() else {
                continue;
            };
            for (target, contrib) in self.vjp(id, &g) {
                self.accumulate(target, contrib);
            }
            self.nodes[id].grad = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, target: Var, contrib: Vec<f64>) {
        let node = &mut self.nodes[target.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => g.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
            None => node.grad = Some(contrib),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Vector-Jacobian products of node `id` for upstream gradient `g`.
    fn vjp(&self, id: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[id];
        let val = |v: Var| &self.nodes[v.0].value;
        let mut out = Vec::with_capacity(2);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    kernels::gemm(m, n, k, g, false, tb.data(), true, &mut da, 0.0);
                    out.push((*a, da));
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k * n];
                    kernels::gemm(k, m, n, ta.data(), true, g, false, &mut db, 0.0);
                    out.push((*b, db));
                }
            }
            Op::Transpose(x) => {
                let (m, n) = (val(*x).shape()[0], val(*x).shape()[1]);
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        dx[i * n + j] = g[j * m + i];
                    }
                }
                out.push((*x, dx));
            }
            Op::Add(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.iter().map(|v| -v).collect()));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                if self.wants(*a) {
                    out.push((*a, g.iter().zip(tb.data()).map(|(x, y)| x * y).collect()));
                }
                if self.wants(*b) {
                    out.push((*b, g.iter().zip(ta.data()).map(|(x, y)| x * y).collect()));
                }
            }
            Op::AddRowBias(x, b) => {
                out.push((*x, g.to_vec()));
                if self.wants(*b) {
                    let n = val(*b).numel();
                    let mut db = vec![0.0; n];
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    out.push((*b, db));
                }
            }
            Op::AddChannelBias(x, b) => {
                out.push((*x, g.to_vec()));
                if self.wants(*b) {
                    let per = g.len() / val(*b).numel();
                    out.push((*b, g.chunks(per).map(|c| c.iter().sum()).collect()));
                }
            }
            Op::ScaleChannels(x, gate) => {
                let (tx, tg) = (val(*x), val(*gate));
                let per = tx.numel() / tg.numel();
                if self.wants(*x) {
                    let dx = g
                        .iter()
                        .enumerate()
                        .map(|(i, v)| v * tg.data()[i / per])
                        .collect();
                    out.push((*x, dx));
                }
                if self.wants(*gate) {
                    let dg = g
                        .chunks(per)
                        .zip(tx.data().chunks(per))
                        .map(|(gc, xc)| gc.iter().zip(xc).map(|(a, b)| a * b).sum())
                        .collect();
                    out.push((*gate, dg));
                }
            }
            Op::Affine(x, s) => out.push((*x, g.iter().map(|v| v * s).collect())),
            Op::Relu(x) => {
                let dx = g
                    .iter()
                    .zip(val(*x).data())
                    .map(|(d, &v)| if v > 0.0 { *d } else { 0.0 })
                    .collect();
                out.push((*x, dx));
            }
            Op::Sigmoid(x) => {
                let dx = g
                    .iter()
                    .zip(node.value.data())
                    .map(|(d, y)| d * y * (1.0 - y))
                    .collect();
                out.push((*x, dx));
            }
            Op::Softplus(x) => {
                let dx = g
                    .iter()
                    .zip(val(*x).data())
                    .map(|(d, &v)| d * kernels::sigmoid(v))
                    .collect();
                out.push((*x, dx));
            }
            Op::SoftmaxRows(x, scale) => {
                let (_, n) = rows_cols(&node.value);
                let mut dx = vec![0.0; g.len()];
                for ((dr, gr), yr) in dx.chunks_mut(n).zip(g.chunks(n)).zip(node.value.data().chunks(n)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dr[j] = yr[j] * (gr[j] - dot) / scale;
                    }
                }
                out.push((*x, dx));
            }
            Op::LogSoftmaxRows(x) => {
                let (_, n) = rows_cols(&node.value);
                let mut dx = vec![0.0; g.len()];
                for ((dr, gr), yr) in dx.chunks_mut(n).zip(g.chunks(n)).zip(node.value.data().chunks(n)) {
                    let total: f64 = gr.iter().sum();
                    for j in 0..n {
                        dr[j] = gr[j] - yr[j].exp() * total;
                    }
                }
                out.push((*x, dx));
            }
            Op::Conv2d {
                input,
                kernel,
                geom,
                cols,
            } => {
                let tk = val(*kernel);
                let c_out = tk.shape()[0];
                let (p, n) = (geom.patch_len(), geom.out_len());
                if self.wants(*kernel) {
                    let mut dk = vec![0.0; c_out * p];
                    kernels::gemm(c_out, n, p, g, false, cols, true, &mut dk, 0.0);
                    out.push((*kernel, dk));
                }
                if self.wants(*input) {
                    let mut dcols = vec![0.0; p * n];
                    kernels::gemm(p, c_out, n, tk.data(), true, g, false, &mut dcols, 0.0);
                    let mut dx = vec![0.0; val(*input).numel()];
                    kernels::col2im(&dcols, geom, &mut dx);
                    out.push((*input, dx));
                }
            }
            Op::GlobalAvgPool(x) => {
                let tx = val(*x);
                let per = tx.numel() / g.len();
                let dx = (0..tx.numel()).map(|i| g[i / per] / per as f64).collect();
                out.push((*x, dx));
            }
            Op::Reshape(x) => out.push((*x, g.to_vec())),
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = val(*p).numel();
                    out.push((*p, g[offset..offset + len].to_vec()));
                    offset += len;
                }
            }
            Op::SumAll(x) => out.push((*x, vec![g[0]; val(*x).numel()])),
            Op::MeanAll(x) => {
                let n = val(*x).numel();
                out.push((*x, vec![g[0] / n as f64; n]));
            }
            Op::SumRows(x) => {
                let n = val(*x).shape()[1];
                let dx = (0..val(*x).numel()).map(|i| g[i / n]).collect();
                out.push((*x, dx));
            }
            Op::BceWithLogits(z, targets) => {
                let n = targets.len() as f64;
                let dz = val(*z)
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&zv, &y)| g[0] * (kernels::sigmoid(zv) - y) / n)
                    .collect();
                out.push((*z, dz));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]), true);
        let y = tape.relu(x);
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::scalar(2.0));
        let x = tape.leaf(Tensor::scalar(5.0), true);
        let y = tape.mul(c, x).unwrap();
        tape.backward(y).unwrap();
        assert!(tape.grad(c).is_none());
        assert_eq!(tape.grad(x).unwrap(), &[2.0]);
    }

    #[test]
    fn matmul_dimension_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let msg = tape.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![0.0, f64::NAN]));
        assert!(matches!(tape.softmax_rows(x, 1.0), Err(Error::Numeric(_))));
    }

    #[test]
    fn conv_geometry_error_reports_output_size() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 64, 64]));
        let k = tape.constant(Tensor::zeros(&[1, 1, 3, 3]));
        let msg = tape.conv2d(x, k, 2, 1).unwrap_err().to_string();
        assert!(msg.contains("32.50"), "{msg}");
    }

    #[test]
    fn gap_needs_three_dims() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[4, 4]));
        assert!(matches!(tape.global_average_pool(x), Err(Error::Shape { .. })));
    }
}
