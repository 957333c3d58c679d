//! Reverse-mode differentiation over a linear tape.
//!
//! A [`Graph`] records every operation as a node holding its value. Calling
//! [`Graph::backward`] walks the tape in reverse and returns the gradient of a
//! scalar with respect to every node that depends on a trainable leaf.
//!
//! Binary elementwise ops accept a right operand whose shape is a suffix of
//! the left operand's shape (or a single element); it is repeated over the
//! leading axes and its gradient is summed back.

use std::collections::BTreeMap;

use super::kernels::{col2im, gemm, im2col, sum_f64, ConvGeometry, MatRef};
use super::{ParameterSet, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f32),
    Exp(Var),
    Log(Var),
    Square(Var),
    Abs(Var),
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    SumLast(Var),
    Mean(Var),
    Reshape(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Narrow {
        input: Var,
        axis: usize,
        start: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        g: ConvGeometry,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        g: ConvGeometry,
    },
    BceWithLogits {
        logits: Var,
        target: Tensor,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddScalar(..) => "add_scalar",
            Op::MulScalar(..) => "mul_scalar",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Square(..) => "square",
            Op::Abs(..) => "abs",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::Sum(..) => "sum",
            Op::SumLast(..) => "sum_last",
            Op::Mean(..) => "mean",
            Op::Reshape(..) => "reshape",
            Op::Concat { .. } => "concat",
            Op::Narrow { .. } => "narrow",
            Op::Linear { .. } => "linear",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::BceWithLogits { .. } => "bce_with_logits",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
}

fn broadcast_ok(lhs: &[usize], rhs: &[usize]) -> bool {
    let n: usize = rhs.iter().product();
    n == 1 || (rhs.len() <= lhs.len() && lhs[lhs.len() - rhs.len()..] == *rhs)
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let needs_grad = match &op {
            Op::Leaf => false,
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => self.needs(*a) || self.needs(*b),
            Op::AddScalar(a)
            | Op::MulScalar(a, _)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Square(a)
            | Op::Abs(a)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::Sum(a)
            | Op::SumLast(a)
            | Op::Mean(a)
            | Op::Reshape(a) => self.needs(*a),
            Op::Concat { inputs, .. } => inputs.iter().any(|v| self.needs(*v)),
            Op::Narrow { input, .. } => self.needs(*input),
            Op::Linear { x, w, b } | Op::Conv2d { x, w, b, .. } | Op::ConvTranspose2d { x, w, b, .. } => {
                self.needs(*x) || self.needs(*w) || b.is_some_and(|b| self.needs(b))
            }
            Op::BceWithLogits { logits, .. } => self.needs(*logits),
        };
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a named parameter as a trainable leaf; repeated calls return the same node.
    pub fn param(&mut self, params: &ParameterSet, name: &str) -> Result<Var> {
        if let Some(v) = self.params.get(name) {
            return Ok(*v);
        }
        let value = params.value(name)?.clone();
        let v = self.variable(value);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    // ---------------------------------------------------------------- elementwise

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        let (x, y) = (self.value(a), self.value(b));
        if !broadcast_ok(x.shape(), y.shape()) {
            return Err(Error::shape(name, format!("{:?} vs {:?}", x.shape(), y.shape())));
        }
        let m = y.len();
        let yd = y.data();
        let data = x.data().iter().enumerate().map(|(i, &v)| f(v, yd[i % m])).collect();
        Tensor::new(x.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        self.push(t, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        self.push(t, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        self.push(t, Op::Mul(a, b))
    }

    fn unary(&self, a: Var, f: impl Fn(f32) -> f32) -> Tensor {
        let x = self.value(a);
        Tensor::new(x.shape(), x.data().iter().map(|&v| f(v)).collect()).unwrap()
    }

    pub fn add_scalar(&mut self, a: Var, c: f32) -> Result<Var> {
        let t = self.unary(a, |v| v + c);
        self.push(t, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: Var, c: f32) -> Result<Var> {
        let t = self.unary(a, |v| v * c);
        self.push(t, Op::MulScalar(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.mul_scalar(a, -1.0)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let t = self.unary(a, f32::exp);
        self.push(t, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let t = self.unary(a, f32::ln);
        self.push(t, Op::Log(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let t = self.unary(a, |v| v * v);
        self.push(t, Op::Square(a))
    }

    /// `|x|`; the gradient at exactly zero is taken as zero.
    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let t = self.unary(a, f32::abs);
        self.push(t, Op::Abs(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let t = self.unary(a, |v| v.max(0.0));
        self.push(t, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let t = self.unary(a, sigmoid);
        self.push(t, Op::Sigmoid(a))
    }

    fn last_axis(&self, a: Var, op: &'static str) -> Result<(usize, usize)> {
        let shape = self.shape(a);
        match shape.last() {
            Some(&w) if w > 0 => Ok((self.value(a).len() / w, w)),
            _ => Err(Error::shape(op, format!("needs a non-empty last axis, got {shape:?}"))),
        }
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (rows, w) = self.last_axis(a, "softmax")?;
        let x = self.value(a);
        let mut out = vec![0.0f32; x.len()];
        for r in 0..rows {
            softmax_row(&x.data()[r * w..(r + 1) * w], &mut out[r * w..(r + 1) * w]);
        }
        let t = Tensor::new(x.shape(), out)?;
        self.push(t, Op::Softmax(a))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let (rows, w) = self.last_axis(a, "log_softmax")?;
        let x = self.value(a);
        let mut out = vec![0.0f32; x.len()];
        for r in 0..rows {
            let row = &x.data()[r * w..(r + 1) * w];
            let lse = log_sum_exp(row);
            for (o, &v) in out[r * w..(r + 1) * w].iter_mut().zip(row) {
                *o = (v as f64 - lse) as f32;
            }
        }
        let t = Tensor::new(x.shape(), out)?;
        self.push(t, Op::LogSoftmax(a))
    }

    /// Elementwise Bernoulli negative log-likelihood of `target` under
    /// `sigmoid(logits)`, in the overflow-free form
    /// `max(z, 0) - z t + ln(1 + exp(-|z|))`.
    pub fn bce_with_logits(&mut self, logits: Var, target: &Tensor) -> Result<Var> {
        let z = self.value(logits);
        if z.shape() != target.shape() {
            return Err(Error::shape(
                "bce_with_logits",
                format!("logits {:?} vs target {:?}", z.shape(), target.shape()),
            ));
        }
        let data = z
            .data()
            .iter()
            .zip(target.data())
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .collect();
        let t = Tensor::new(z.shape(), data)?;
        self.push(
            t,
            Op::BceWithLogits {
                logits,
                target: target.clone(),
            },
        )
    }

    // ---------------------------------------------------------------- reductions

    /// Sum of all elements as a rank-0 tensor (accumulated in f64).
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = sum_f64(self.value(a).data()) as f32;
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.is_empty() {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let s = (sum_f64(x.data()) / x.len() as f64) as f32;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    /// Sums out the last axis.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() {
            return Err(Error::shape("sum_last", "rank-0 input"));
        }
        let w = *shape.last().unwrap();
        let rows = shape[..shape.len() - 1].iter().product::<usize>();
        let x = self.value(a).data();
        let data = (0..rows)
            .map(|r| {
                if w == 0 {
                    0.0
                } else {
                    sum_f64(&x[r * w..(r + 1) * w]) as f32
                }
            })
            .collect();
        let t = Tensor::new(&shape[..shape.len() - 1], data)?;
        self.push(t, Op::SumLast(a))
    }

    // ---------------------------------------------------------------- structure

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        self.push(t, Op::Reshape(a))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = match inputs.first() {
            Some(v) => self.shape(*v).to_vec(),
            None => return Err(Error::shape("concat", "no inputs")),
        };
        if axis >= first.len() {
            return Err(Error::shape(
                "concat",
                format!("axis {axis} out of range for {first:?}"),
            ));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            let same_rank = s.len() == first.len();
            if !same_rank || s.iter().zip(&first).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                return Err(Error::shape(
                    "concat",
                    format!("{s:?} does not match {first:?} outside axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let x = self.value(*v);
                let chunk = x.shape()[axis] * inner;
                out.extend_from_slice(&x.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let t = Tensor::new(&shape, out)?;
        self.push(
            t,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        )
    }

    /// Slice `start..start + len` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape(
                "narrow",
                format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            out.extend_from_slice(&x[base..base + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let t = Tensor::new(&new_shape, out)?;
        self.push(t, Op::Narrow { input: a, axis, start })
    }

    // ---------------------------------------------------------------- layers

    /// `x w^T + b` for `x: [batch, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::shape("linear", format!("input {xs:?} vs weight {ws:?}")));
        }
        let (batch, fan_in, fan_out) = (xs[0], xs[1], ws[0]);
        if let Some(b) = b {
            if self.shape(b) != [fan_out] {
                return Err(Error::shape(
                    "linear",
                    format!("bias {:?} vs {fan_out} outputs", self.shape(b)),
                ));
            }
        }
        let mut out = vec![0.0f32; batch * fan_out];
        gemm(
            MatRef::new(self.value(x).data(), batch, fan_in),
            MatRef::transposed(self.value(w).data(), fan_out, fan_in),
            &mut out,
            0.0,
        );
        if let Some(b) = b {
            let bd = self.value(b).data();
            for row in out.chunks_mut(fan_out.max(1)) {
                row.iter_mut().zip(bd).for_each(|(o, b)| *o += b);
            }
        }
        let t = Tensor::new(&[batch, fan_out], out)?;
        self.push(t, Op::Linear { x, w, b })
    }

    fn conv_check(
        &self,
        op: &'static str,
        x: Var,
        w: Var,
        b: Option<Var>,
        transposed: bool,
    ) -> Result<(usize, usize, usize, usize, usize, usize)> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 4 || ws.len() != 4 || ws[2] != ws[3] {
            return Err(Error::shape(op, format!("input {xs:?}, weight {ws:?}")));
        }
        // conv: [out, in, k, k]; transposed: [in, out, k, k]
        let (cin, cout) = if transposed { (ws[0], ws[1]) } else { (ws[1], ws[0]) };
        if xs[1] != cin {
            return Err(Error::shape(
                op,
                format!("input has {} channels, weight {ws:?} expects {cin}", xs[1]),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::shape(op, format!("bias {:?} vs {cout} channels", self.shape(b))));
            }
        }
        Ok((xs[0], cin, xs[2], xs[3], cout, ws[2]))
    }

    /// Cross-correlation of `x: [N, C, H, W]` with `w: [O, C, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (n, cin, h, wd, cout, k) = self.conv_check("conv2d", x, w, b, false)?;
        let (oh, ow) = match (
            ConvGeometry::conv_extent(h, k, stride, pad),
            ConvGeometry::conv_extent(wd, k, stride, pad),
        ) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::shape(
                    "conv2d",
                    format!("kernel {k} stride {stride} pad {pad} does not fit {h}x{wd}"),
                ))
            }
        };
        let g = ConvGeometry {
            channels: cin,
            height: h,
            width: wd,
            kernel: k,
            stride,
            pad,
            out_height: oh,
            out_width: ow,
        };
        let (plen, pos) = (g.patch_len(), g.positions());
        let mut col = vec![0.0f32; plen * pos];
        let mut out = vec![0.0f32; n * cout * pos];
        let xd = self.value(x).data();
        let wdata = self.value(w).data();
        let in_len = cin * h * wd;
        for i in 0..n {
            im2col(&xd[i * in_len..(i + 1) * in_len], &g, &mut col);
            gemm(
                MatRef::new(wdata, cout, plen),
                MatRef::new(&col, plen, pos),
                &mut out[i * cout * pos..(i + 1) * cout * pos],
                0.0,
            );
        }
        if let Some(b) = b {
            add_channel_bias(&mut out, self.value(b).data(), pos);
        }
        let t = Tensor::new(&[n, cout, oh, ow], out)?;
        self.push(t, Op::Conv2d { x, w, b, g })
    }

    /// Transposed cross-correlation (the adjoint of [`Graph::conv2d`]) of
    /// `x: [N, Ci, H, W]` with `w: [Ci, Co, k, k]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (n, cin, h, wd, cout, k) = self.conv_check("conv_transpose2d", x, w, b, true)?;
        let (oh, ow) = match (
            ConvGeometry::transpose_extent(h, k, stride, pad),
            ConvGeometry::transpose_extent(wd, k, stride, pad),
        ) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::shape(
                    "conv_transpose2d",
                    format!("kernel {k} stride {stride} pad {pad} gives an empty output for {h}x{wd}"),
                ))
            }
        };
        // Geometry of the forward correlation this op is the adjoint of:
        // it maps the [Co, oh, ow] output back onto [h, wd] positions.
        let g = ConvGeometry {
            channels: cout,
            height: oh,
            width: ow,
            kernel: k,
            stride,
            pad,
            out_height: h,
            out_width: wd,
        };
        if ConvGeometry::conv_extent(oh, k, stride, pad) != Some(h)
            || ConvGeometry::conv_extent(ow, k, stride, pad) != Some(wd)
        {
            return Err(Error::shape("conv_transpose2d", "geometry is not invertible"));
        }
        let (plen, pos) = (g.patch_len(), g.positions());
        let mut col = vec![0.0f32; plen * pos];
        let out_len = cout * oh * ow;
        let mut out = vec![0.0f32; n * out_len];
        let xd = self.value(x).data();
        let wdata = self.value(w).data();
        for i in 0..n {
            gemm(
                MatRef::transposed(wdata, cin, plen),
                MatRef::new(&xd[i * cin * pos..(i + 1) * cin * pos], cin, pos),
                &mut col,
                0.0,
            );
            col2im(&col, &g, &mut out[i * out_len..(i + 1) * out_len]);
        }
        if let Some(b) = b {
            add_channel_bias(&mut out, self.value(b).data(), oh * ow);
        }
        let t = Tensor::new(&[n, cout, oh, ow], out)?;
        self.push(t, Op::ConvTranspose2d { x, w, b, g })
    }

    // ---------------------------------------------------------------- backward

    /// Gradients of the one-element tensor `loss` with respect to every node
    /// that depends on a trainable leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got {:?}", lv.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.needs(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[idx].take() else { continue };
            self.backprop(node, &gy, &mut grads)?;
            grads[idx] = Some(gy);
        }
        Ok(Gradients { grads })
    }

    fn backprop(&self, node: &Node, gy: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let op_name = node.op.name();
        let mut acc = |v: Var, g: Vec<f32>| -> Result<()> {
            if !self.needs(v) {
                return Ok(());
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite { op: op_name });
            }
            let slot = &mut grads[v.0];
            match slot {
                Some(t) => t.data_mut().iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => *slot = Some(Tensor::new(self.shape(v), g)?),
            }
            Ok(())
        };
        let gyd = gy.data();
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, gyd.to_vec())?;
                if self.needs(*b) {
                    acc(*b, reduce_broadcast(gyd, self.value(*b).len()))?;
                }
            }
            Op::Sub(a, b) => {
                acc(*a, gyd.to_vec())?;
                if self.needs(*b) {
                    let mut g = reduce_broadcast(gyd, self.value(*b).len());
                    g.iter_mut().for_each(|v| *v = -*v);
                    acc(*b, g)?;
                }
            }
            Op::Mul(a, b) => {
                let (xa, xb) = (self.value(*a).data(), self.value(*b).data());
                let m = xb.len();
                if self.needs(*a) {
                    acc(*a, gyd.iter().enumerate().map(|(i, g)| g * xb[i % m]).collect())?;
                }
                if self.needs(*b) {
                    let prod: Vec<f32> = gyd.iter().zip(xa).map(|(g, x)| g * x).collect();
                    acc(*b, reduce_broadcast(&prod, m))?;
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => acc(*a, gyd.to_vec())?,
            Op::MulScalar(a, c) => acc(*a, gyd.iter().map(|g| g * c).collect())?,
            Op::Exp(a) => acc(*a, gyd.iter().zip(y.data()).map(|(g, y)| g * y).collect())?,
            Op::Log(a) => {
                let x = self.value(*a).data();
                acc(*a, gyd.iter().zip(x).map(|(g, x)| g / x).collect())?
            }
            Op::Square(a) => {
                let x = self.value(*a).data();
                acc(*a, gyd.iter().zip(x).map(|(g, x)| 2.0 * g * x).collect())?
            }
            Op::Abs(a) => {
                let x = self.value(*a).data();
                let sign = |x: f32| {
                    if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                };
                acc(*a, gyd.iter().zip(x).map(|(g, &x)| g * sign(x)).collect())?
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                acc(
                    *a,
                    gyd.iter()
                        .zip(x)
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect(),
                )?
            }
            Op::Sigmoid(a) => acc(*a, gyd.iter().zip(y.data()).map(|(g, s)| g * s * (1.0 - s)).collect())?,
            Op::Softmax(a) => {
                let w = *y.shape().last().unwrap();
                let mut g = vec![0.0f32; y.len()];
                for ((gr, yr), out) in gyd.chunks(w).zip(y.data().chunks(w)).zip(g.chunks_mut(w)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(g, y)| (*g as f64) * (*y as f64)).sum();
                    for ((o, g), y) in out.iter_mut().zip(gr).zip(yr) {
                        *o = y * (g - dot as f32);
                    }
                }
                acc(*a, g)?
            }
            Op::LogSoftmax(a) => {
                let w = *y.shape().last().unwrap();
                let mut g = vec![0.0f32; y.len()];
                for ((gr, yr), out) in gyd.chunks(w).zip(y.data().chunks(w)).zip(g.chunks_mut(w)) {
                    let total = sum_f64(gr) as f32;
                    for ((o, g), ly) in out.iter_mut().zip(gr).zip(yr) {
                        *o = g - ly.exp() * total;
                    }
                }
                acc(*a, g)?
            }
            Op::BceWithLogits { logits, target } => {
                let z = self.value(*logits).data();
                let g = gyd
                    .iter()
                    .zip(z)
                    .zip(target.data())
                    .map(|((g, &z), t)| g * (sigmoid(z) - t))
                    .collect();
                acc(*logits, g)?
            }
            Op::Sum(a) => acc(*a, vec![gyd[0]; self.value(*a).len()])?,
            Op::Mean(a) => {
                let n = self.value(*a).len();
                acc(*a, vec![gyd[0] / n as f32; n])?
            }
            Op::SumLast(a) => {
                let x = self.value(*a);
                let w = *x.shape().last().unwrap();
                let mut g = vec![0.0f32; x.len()];
                if w > 0 {
                    for (out, gv) in g.chunks_mut(w).zip(gyd) {
                        out.fill(*gv);
                    }
                }
                acc(*a, g)?
            }
            Op::Concat { inputs, axis } => {
                let outer: usize = y.shape()[..*axis].iter().product();
                let inner: usize = y.shape()[axis + 1..].iter().product();
                let total = y.shape()[*axis];
                let mut offset = 0;
                for v in inputs {
                    let ext = self.shape(*v)[*axis];
                    if self.needs(*v) {
                        let mut g = Vec::with_capacity(outer * ext * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            g.extend_from_slice(&gyd[base..base + ext * inner]);
                        }
                        acc(*v, g)?;
                    }
                    offset += ext;
                }
            }
            Op::Narrow { input, axis, start } => {
                let shape = self.shape(*input);
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let len = y.shape()[*axis];
                let mut g = vec![0.0f32; self.value(*input).len()];
                for o in 0..outer {
                    let dst = (o * shape[*axis] + start) * inner;
                    let src = o * len * inner;
                    g[dst..dst + len * inner].copy_from_slice(&gyd[src..src + len * inner]);
                }
                acc(*input, g)?
            }
            Op::Linear { x, w, b } => {
                let (batch, fan_in) = (self.shape(*x)[0], self.shape(*x)[1]);
                let fan_out = self.shape(*w)[0];
                if self.needs(*x) {
                    let mut g = vec![0.0f32; batch * fan_in];
                    gemm(
                        MatRef::new(gyd, batch, fan_out),
                        MatRef::new(self.value(*w).data(), fan_out, fan_in),
                        &mut g,
                        0.0,
                    );
                    acc(*x, g)?;
                }
                if self.needs(*w) {
                    let mut g = vec![0.0f32; fan_out * fan_in];
                    gemm(
                        MatRef::transposed(gyd, batch, fan_out),
                        MatRef::new(self.value(*x).data(), batch, fan_in),
                        &mut g,
                        0.0,
                    );
                    acc(*w, g)?;
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let mut g = vec![0.0f64; fan_out];
                        for row in gyd.chunks(fan_out.max(1)) {
                            g.iter_mut().zip(row).for_each(|(a, v)| *a += *v as f64);
                        }
                        acc(*b, g.into_iter().map(|v| v as f32).collect())?;
                    }
                }
            }
            Op::Conv2d { x, w, b, g } => {
                let n = self.shape(*x)[0];
                let cout = self.shape(*w)[0];
                let (plen, pos) = (g.patch_len(), g.positions());
                let in_len = g.channels * g.height * g.width;
                let xd = self.value(*x).data();
                let wdata = self.value(*w).data();
                let mut col = vec![0.0f32; plen * pos];
                let mut gw = vec![0.0f32; cout * plen];
                let mut gx = vec![0.0f32; if self.needs(*x) { n * in_len } else { 0 }];
                for i in 0..n {
                    let gyi = &gyd[i * cout * pos..(i + 1) * cout * pos];
                    if self.needs(*w) {
                        im2col(&xd[i * in_len..(i + 1) * in_len], g, &mut col);
                        gemm(
                            MatRef::new(gyi, cout, pos),
                            MatRef::transposed(&col, plen, pos),
                            &mut gw,
                            1.0,
                        );
                    }
                    if self.needs(*x) {
                        gemm(
                            MatRef::transposed(wdata, cout, plen),
                            MatRef::new(gyi, cout, pos),
                            &mut col,
                            0.0,
                        );
                        col2im(&col, g, &mut gx[i * in_len..(i + 1) * in_len]);
                    }
                }
                if self.needs(*x) {
                    acc(*x, gx)?;
                }
                if self.needs(*w) {
                    acc(*w, gw)?;
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        acc(*b, channel_bias_grad(gyd, cout, pos))?;
                    }
                }
            }
            Op::ConvTranspose2d { x, w, b, g } => {
                let n = self.shape(*x)[0];
                let cin = self.shape(*w)[0];
                let cout = g.channels;
                let (plen, pos) = (g.patch_len(), g.positions());
                let out_len = cout * g.height * g.width;
                let xd = self.value(*x).data();
                let wdata = self.value(*w).data();
                let mut col = vec![0.0f32; plen * pos];
                let mut gw = vec![0.0f32; cin * plen];
                let mut gx = vec![0.0f32; if self.needs(*x) { n * cin * pos } else { 0 }];
                for i in 0..n {
                    im2col(&gyd[i * out_len..(i + 1) * out_len], g, &mut col);
                    if self.needs(*x) {
                        gemm(
                            MatRef::new(wdata, cin, plen),
                            MatRef::new(&col, plen, pos),
                            &mut gx[i * cin * pos..(i + 1) * cin * pos],
                            0.0,
                        );
                    }
                    if self.needs(*w) {
                        gemm(
                            MatRef::new(&xd[i * cin * pos..(i + 1) * cin * pos], cin, pos),
                            MatRef::transposed(&col, plen, pos),
                            &mut gw,
                            1.0,
                        );
                    }
                }
                if self.needs(*x) {
                    acc(*x, gx)?;
                }
                if self.needs(*w) {
                    acc(*w, gw)?;
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        acc(*b, channel_bias_grad(gyd, cout, g.height * g.width))?;
                    }
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn sigmoid(z: f32) -> f32 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn log_sum_exp(row: &[f32]) -> f64 {
    let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
    let s: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
    max + s.ln()
}

fn softmax_row(row: &[f32], out: &mut [f32]) {
    let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
    let mut total = 0.0f64;
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v as f64 - max).exp();
        *o = e as f32;
        total += e;
    }
    out.iter_mut().for_each(|o| *o = (*o as f64 / total) as f32);
}

fn reduce_broadcast(g: &[f32], m: usize) -> Vec<f32> {
    let mut out = vec![0.0f64; m];
    for (i, v) in g.iter().enumerate() {
        out[i % m] += *v as f64;
    }
    out.into_iter().map(|v| v as f32).collect()
}

fn add_channel_bias(out: &mut [f32], bias: &[f32], plane: usize) {
    let c = bias.len();
    for (i, chunk) in out.chunks_mut(plane).enumerate() {
        let b = bias[i % c];
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn channel_bias_grad(gy: &[f32], channels: usize, plane: usize) -> Vec<f32> {
    let mut g = vec![0.0f64; channels];
    for (i, chunk) in gy.chunks(plane).enumerate() {
        g[i % channels] += sum_f64(chunk);
    }
    g.into_iter().map(|v| v as f32).collect()
}
