//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Tape`] records every op in execution order, so node inputs always
//! precede the node itself and `backward` is a single reverse sweep. Tapes
//! are meant to live for one training step and be dropped afterwards.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Exp,
    Log,
    Sigmoid,
    Square,
    Negate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
}

/// Batch statistics computed by a train-mode batch norm, for running averages.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance estimate (divides by `n - 1`).
    pub var_unbiased: Vec<T>,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Square(Var),
    Neg(Var),
    Scale(Var, T),
    AddScalar(Var, T),
    Reduce {
        input: Var,
        axes: Vec<usize>,
        factor: T,
    },
    Matmul(Var, Var),
    Conv1d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Narrow {
        input: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    CustomUnary {
        input: Var,
        derivative: fn(T, T) -> T,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Matmul(a, b) => vec![*a, *b],
            Op::Exp(a)
            | Op::Log(a)
            | Op::Sigmoid(a)
            | Op::Square(a)
            | Op::Neg(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a, _) => vec![*a],
            Op::Reduce { input, .. }
            | Op::Narrow { input, .. }
            | Op::CustomUnary { input, .. } => vec![*input],
            Op::Conv1d {
                input,
                weight,
                bias,
                ..
            } => {
                let mut v = vec![*input, *weight];
                v.extend(bias.iter().copied());
                v
            }
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::BatchNorm {
                input, gamma, beta, ..
            } => vec![*input, *gamma, *beta],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    consumed: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite<T: Real>(op: &'static str, data: &[T]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
    }
}

/// Splits a shape around `axis` into `(outer, extent, inner)` block sizes.
fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss w.r.t. `v`, if `v` is upstream of
    /// it and requires a gradient.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, op: &'static str, value: Tensor<T>, node_op: Op<T>) -> Result<Var> {
        check_finite(op, value.data())?;
        let requires_grad = node_op
            .inputs()
            .iter()
            .any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op: node_op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn elementwise(&mut self, kind: ElementwiseOp, a: Var, b: Option<Var>) -> Result<Var> {
        let need_b = matches!(kind, ElementwiseOp::Add | ElementwiseOp::Sub | ElementwiseOp::Mul);
        match (need_b, b) {
            (true, Some(b)) => match kind {
                ElementwiseOp::Add => self.add(a, b),
                ElementwiseOp::Sub => self.sub(a, b),
                _ => self.mul(a, b),
            },
            (false, None) => match kind {
                ElementwiseOp::Exp => self.exp(a),
                ElementwiseOp::Log => self.log(a),
                ElementwiseOp::Sigmoid => self.sigmoid(a),
                ElementwiseOp::Square => self.square(a),
                _ => self.neg(a),
            },
            _ => Err(Error::Config(alloc::format!(
                "{kind:?} takes {} operand(s)",
                if need_b { 2 } else { 1 }
            ))),
        }
    }

    /// Output shape for a binary op: equal shapes, or one side a single value.
    fn broadcast_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb || self.value(b).len() == 1 {
            Ok(sa.to_vec())
        } else if self.value(a).len() == 1 {
            Ok(sb.to_vec())
        } else {
            Err(Error::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            })
        }
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        node: Op<T>,
    ) -> Result<Var> {
        let shape = self.broadcast_shape(op, a, b)?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let data: Vec<T> = if va.len() == vb.len() {
            va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()
        } else if vb.len() == 1 {
            va.iter().map(|&x| f(x, vb[0])).collect()
        } else {
            vb.iter().map(|&y| f(va[0], y)).collect()
        };
        self.push(op, Tensor::from_parts(shape, data), node)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, op: &'static str, a: Var, f: impl Fn(T) -> T, node: Op<T>) -> Result<Var> {
        let value = self.value(a).map(f);
        self.push(op, value, node)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, T::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(&bad) = self.value(a).data().iter().find(|&&v| v <= T::ZERO) {
            return Err(Error::LogDomain(bad.to_f64()));
        }
        self.unary("log", a, T::ln, Op::Log(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, T::sigmoid, Op::Sigmoid(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary("square", a, |x| x * x, Op::Square(a))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary("negate", a, |x| -x, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        self.unary("scale", a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        self.unary("add_scalar", a, |x| x + c, Op::AddScalar(a, c))
    }

    /// Pointwise op with a caller-supplied derivative `d(x, y) = dy/dx`.
    pub fn custom_unary(&mut self, a: Var, forward: fn(T) -> T, derivative: fn(T, T) -> T) -> Result<Var> {
        self.unary("custom", a, forward, Op::CustomUnary { input: a, derivative })
    }

    pub fn reduce(&mut self, kind: ReduceOp, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut axes = axes.to_vec();
        axes.sort_unstable();
        axes.dedup();
        if let Some(&axis) = axes.iter().find(|&&ax| ax >= shape.len()) {
            return Err(Error::AxisOutOfRange {
                axis,
                rank: shape.len(),
            });
        }
        let count: usize = axes.iter().map(|&ax| shape[ax]).product();
        let factor = match kind {
            ReduceOp::Sum => T::ONE,
            ReduceOp::Mean => T::ONE / T::from_usize(count),
        };
        let (out_shape, index) = reduce_index(&shape, &axes);
        let out_len: usize = out_shape.iter().product();
        let mut out = vec![T::ZERO; out_len];
        if out_len == 1 {
            out[0] = kernels::sum(self.value(a).data());
        } else {
            for (&v, &o) in self.value(a).data().iter().zip(&index) {
                out[o] += v;
            }
        }
        if factor != T::ONE {
            out.iter_mut().for_each(|v| *v *= factor);
        }
        let name = match kind {
            ReduceOp::Sum => "sum",
            ReduceOp::Mean => "mean",
        };
        self.push(
            name,
            Tensor::from_parts(out_shape, out),
            Op::Reduce {
                input: a,
                axes,
                factor,
            },
        )
    }

    pub fn sum(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(ReduceOp::Sum, a, axes)
    }

    pub fn mean(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(ReduceOp::Mean, a, axes)
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.sum(a, &axes)
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.mean(a, &axes)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push("matmul", Tensor::from_parts(vec![m, n], data), Op::Matmul(a, b))
    }

    /// 1-D cross-correlation over `[batch, in_ch, T]` with weights
    /// `[out_ch, in_ch, k]` and optional bias `[out_ch]`.
    pub fn conv1d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (si, sw) = (self.shape(input), self.shape(weight));
        if si.len() != 3 || sw.len() != 3 || si[1] != sw[1] {
            return Err(Error::ShapeMismatch {
                op: "conv1d",
                lhs: si.to_vec(),
                rhs: sw.to_vec(),
            });
        }
        if stride == 0 {
            return Err(Error::ZeroStride);
        }
        let padded = si[2] + 2 * padding;
        if sw[2] > padded {
            return Err(Error::KernelTooLarge {
                kernel: sw[2],
                padded,
            });
        }
        let geom = ConvGeom {
            batch: si[0],
            in_ch: si[1],
            out_ch: sw[0],
            len_in: si[2],
            len_out: (padded - sw[2]) / stride + 1,
            kernel: sw[2],
            stride,
            padding,
        };
        if let Some(b) = bias {
            if self.shape(b) != [geom.out_ch] {
                return Err(Error::ShapeMismatch {
                    op: "conv1d bias",
                    lhs: vec![geom.out_ch],
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let data = kernels::conv1d_forward(
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            &geom,
        );
        self.push(
            "conv1d",
            Tensor::from_parts(vec![geom.batch, geom.out_ch, geom.len_out], data),
            Op::Conv1d {
                input,
                weight,
                bias,
                geom,
            },
        )
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::AxisOutOfRange {
                axis,
                rank: shape.len(),
            });
        }
        if len == 0 || start + len > shape[axis] {
            return Err(Error::ShapeMismatch {
                op: "narrow",
                lhs: shape,
                rhs: vec![start, len],
            });
        }
        let (outer, extent, inner) = split_at_axis(&shape, axis);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.push(
            "narrow",
            Tensor::from_parts(out_shape, data),
            Op::Narrow {
                input: a,
                axis,
                start,
            },
        )
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or(Error::Empty)?;
        let base_shape = self.shape(*first).to_vec();
        if axis >= base_shape.len() {
            return Err(Error::AxisOutOfRange {
                axis,
                rank: base_shape.len(),
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base_shape.len()
                && s.iter()
                    .zip(&base_shape)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: base_shape,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_at_axis(&base_shape, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let ext = self.shape(p)[axis];
                let src = self.value(p).data();
                data.extend_from_slice(&src[o * ext * inner..(o + 1) * ext * inner]);
            }
        }
        let mut out_shape = base_shape;
        out_shape[axis] = total;
        self.push(
            "concat",
            Tensor::from_parts(out_shape, data),
            Op::Concat {
                inputs: parts.to_vec(),
                axis,
            },
        )
    }

    fn check_norm_shapes(&self, input: Var, gamma: Var, beta: Var) -> Result<usize> {
        let s = self.shape(input);
        if s.len() != 3 || self.shape(gamma) != [s[1]] || self.shape(beta) != [s[1]] {
            return Err(Error::ShapeMismatch {
                op: "batch_norm",
                lhs: s.to_vec(),
                rhs: self.shape(gamma).to_vec(),
            });
        }
        Ok(s[1])
    }

    fn normalize(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        inv_std: Vec<T>,
        batch_stats: bool,
    ) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let (b, c, t) = (shape[0], shape[1], shape[2]);
        let x = self.value(input).data();
        let (g, be) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::ZERO; x.len()];
        let mut out = vec![T::ZERO; x.len()];
        for bi in 0..b {
            for ch in 0..c {
                let off = (bi * c + ch) * t;
                for i in off..off + t {
                    let h = (x[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = g[ch] * h + be[ch];
                }
            }
        }
        self.push(
            "batch_norm",
            Tensor::from_parts(shape, out),
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
        )
    }

    /// Train-mode batch normalization of `[batch, C, T]` over batch and time.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<(Var, BatchStats<T>)> {
        let c = self.check_norm_shapes(input, gamma, beta)?;
        let shape = self.shape(input).to_vec();
        let (b, t) = (shape[0], shape[2]);
        let n = b * t;
        let x = self.value(input).data();
        let mut mean = vec![T::ZERO; c];
        let mut var = vec![T::ZERO; c];
        for ch in 0..c {
            let mut s = T::ZERO;
            for bi in 0..b {
                s += kernels::sum(&x[(bi * c + ch) * t..][..t]);
            }
            let m = s / T::from_usize(n);
            let mut ss = T::ZERO;
            for bi in 0..b {
                for &v in &x[(bi * c + ch) * t..][..t] {
                    ss += (v - m) * (v - m);
                }
            }
            mean[ch] = m;
            var[ch] = ss / T::from_usize(n);
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::ONE / (v + eps).sqrt()).collect();
        let unbiased = if n > 1 {
            T::from_usize(n) / T::from_usize(n - 1)
        } else {
            T::ONE
        };
        let stats = BatchStats {
            var_unbiased: var.iter().map(|&v| v * unbiased).collect(),
            mean: mean.clone(),
        };
        let out = self.normalize(input, gamma, beta, &mean, inv_std, true)?;
        Ok((out, stats))
    }

    /// Eval-mode batch normalization using fixed statistics.
    pub fn batch_norm_fixed(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        eps: T,
    ) -> Result<Var> {
        let c = self.check_norm_shapes(input, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::ShapeMismatch {
                op: "batch_norm_fixed",
                lhs: vec![c],
                rhs: vec![mean.len(), var.len()],
            });
        }
        let inv_std = var.iter().map(|&v| T::ONE / (v + eps).sqrt()).collect();
        self.normalize(input, gamma, beta, mean, inv_std, false)
    }

    /// Populates gradients of `loss` for every upstream node that requires one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::NotScalar(self.shape(loss).to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let shape = self.shape(loss).to_vec();
        grads[loss.0] = Some(Tensor::full(&shape, T::ONE));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        for (idx, g) in grads.iter_mut().enumerate() {
            if !self.nodes[idx].requires_grad {
                *g = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        let gd = g.data();
        let mut acc = |v: Var, data: Vec<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, d) in existing.data_mut().iter_mut().zip(&data) {
                        *e += *d;
                    }
                }
                slot @ None => {
                    *slot = Some(Tensor::from_parts(self.shape(v).to_vec(), data));
                }
            }
        };
        // Reduce a full-size gradient to the shape of a (possibly scalar) operand.
        let fit = |v: Var, full: Vec<T>| -> Vec<T> {
            if self.value(v).len() == full.len() {
                full
            } else {
                vec![kernels::sum(&full)]
            }
        };
        // Operand value aligned with the output, broadcasting a scalar operand.
        let expand = |v: Var| -> Vec<T> {
            let d = self.value(v).data();
            if d.len() == gd.len() {
                d.to_vec()
            } else {
                vec![d[0]; gd.len()]
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, fit(*a, gd.to_vec()));
                acc(*b, fit(*b, gd.to_vec()));
            }
            Op::Sub(a, b) => {
                acc(*a, fit(*a, gd.to_vec()));
                acc(*b, fit(*b, gd.iter().map(|&v| -v).collect()));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (expand(*a), expand(*b));
                if self.nodes[a.0].requires_grad {
                    acc(*a, fit(*a, gd.iter().zip(&vb).map(|(&g, &y)| g * y).collect()));
                }
                if self.nodes[b.0].requires_grad {
                    acc(*b, fit(*b, gd.iter().zip(&va).map(|(&g, &x)| g * x).collect()));
                }
            }
            Op::Exp(a) => acc(*a, gd.iter().zip(out).map(|(&g, &y)| g * y).collect()),
            Op::Log(a) => {
                let x = self.value(*a).data();
                acc(*a, gd.iter().zip(x).map(|(&g, &x)| g / x).collect())
            }
            Op::Sigmoid(a) => acc(
                *a,
                gd.iter()
                    .zip(out)
                    .map(|(&g, &y)| g * y * (T::ONE - y))
                    .collect(),
            ),
            Op::Square(a) => {
                let two = T::from_f64(2.0);
                let x = self.value(*a).data();
                acc(*a, gd.iter().zip(x).map(|(&g, &x)| g * two * x).collect())
            }
            Op::Neg(a) => acc(*a, gd.iter().map(|&g| -g).collect()),
            Op::Scale(a, c) => acc(*a, gd.iter().map(|&g| g * *c).collect()),
            Op::AddScalar(a, _) => acc(*a, gd.to_vec()),
            Op::CustomUnary { input, derivative } => {
                let x = self.value(*input).data();
                acc(
                    *input,
                    gd.iter()
                        .zip(x.iter().zip(out))
                        .map(|(&g, (&x, &y))| g * derivative(x, y))
                        .collect(),
                )
            }
            Op::Reduce {
                input,
                axes,
                factor,
            } => {
                let (_, index) = reduce_index(self.shape(*input), axes);
                let n = self.value(*input).len();
                let data = if gd.len() == 1 {
                    vec![gd[0] * *factor; n]
                } else {
                    index.iter().map(|&o| gd[o] * *factor).collect()
                };
                acc(*input, data)
            }
            Op::Matmul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (ga, gb) = kernels::matmul_backward(
                    self.value(*a).data(),
                    self.value(*b).data(),
                    gd,
                    sa[0],
                    sa[1],
                    sb[1],
                );
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::Conv1d {
                input,
                weight,
                bias,
                geom,
            } => {
                let need_x = self.nodes[input.0].requires_grad;
                let need_w = self.nodes[weight.0].requires_grad
                    || bias.is_some_and(|b| self.nodes[b.0].requires_grad);
                let (gx, gw, gb) = kernels::conv1d_backward(
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    gd,
                    geom,
                    need_x,
                    need_w,
                );
                if need_x {
                    acc(*input, gx);
                }
                if need_w {
                    acc(*weight, gw);
                    if let Some(b) = bias {
                        acc(*b, gb);
                    }
                }
            }
            Op::Narrow { input, axis, start } => {
                let shape = self.shape(*input);
                let (outer, extent, inner) = split_at_axis(shape, *axis);
                let len = node.value.shape()[*axis];
                let mut data = vec![T::ZERO; self.value(*input).len()];
                for o in 0..outer {
                    let dst = (o * extent + start) * inner;
                    let src = o * len * inner;
                    data[dst..dst + len * inner].copy_from_slice(&gd[src..src + len * inner]);
                }
                acc(*input, data)
            }
            Op::Concat { inputs, axis } => {
                let total = node.value.shape()[*axis];
                let (outer, _, inner) = split_at_axis(node.value.shape(), *axis);
                let mut start = 0;
                for &p in inputs {
                    let ext = self.shape(p)[*axis];
                    let mut data = Vec::with_capacity(outer * ext * inner);
                    for o in 0..outer {
                        let base = (o * total + start) * inner;
                        data.extend_from_slice(&gd[base..base + ext * inner]);
                    }
                    acc(p, data);
                    start += ext;
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let s = self.shape(*input);
                let (b, c, t) = (s[0], s[1], s[2]);
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![T::ZERO; c];
                let mut dbeta = vec![T::ZERO; c];
                for bi in 0..b {
                    for ch in 0..c {
                        let off = (bi * c + ch) * t;
                        dbeta[ch] += kernels::sum(&gd[off..off + t]);
                        dgamma[ch] += kernels::dot(&gd[off..off + t], &xhat[off..off + t]);
                    }
                }
                if self.nodes[input.0].requires_grad {
                    let mut dx = vec![T::ZERO; gd.len()];
                    let n = T::from_usize(b * t);
                    for ch in 0..c {
                        let k = gam[ch] * inv_std[ch];
                        for bi in 0..b {
                            let off = (bi * c + ch) * t;
                            for i in off..off + t {
                                dx[i] = if *batch_stats {
                                    k * (gd[i] - dbeta[ch] / n - xhat[i] * dgamma[ch] / n)
                                } else {
                                    k * gd[i]
                                };
                            }
                        }
                    }
                    acc(*input, dx);
                }
                acc(*gamma, dgamma);
                acc(*beta, dbeta);
            }
        }
    }
}

/// Output shape of a reduction and, for each input element, its output slot.
fn reduce_index(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let out_shape: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|(d, _)| !axes.contains(d))
        .map(|(_, &e)| e)
        .collect();
    // Stride of each input axis inside the output (0 for reduced axes).
    let mut strides = vec![0usize; shape.len()];
    let mut s = 1;
    for d in (0..shape.len()).rev() {
        if !axes.contains(&d) {
            strides[d] = s;
            s *= shape[d];
        }
    }
    let n: usize = shape.iter().product();
    let mut index = Vec::with_capacity(n);
    let mut counter = vec![0usize; shape.len()];
    let mut cur = 0usize;
    for _ in 0..n {
        index.push(cur);
        for d in (0..shape.len()).rev() {
            counter[d] += 1;
            cur += strides[d];
            if counter[d] < shape[d] {
                break;
            }
            cur -= strides[d] * shape[d];
            counter[d] = 0;
        }
    }
    (out_shape, index)
}
