//! Append-only computation graph with reverse-mode differentiation.
//!
//! Every op evaluates eagerly and appends a node holding its value. Inputs
//! always precede the node that consumes them, so a single reverse sweep over
//! the node list is a valid topological backward pass.

use super::kernels::{self, ConvGeom};
use super::tensor::{split_axis, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Scale(f64),
    Shift,
    MatMul,
    Conv2d(ConvGeom),
    Relu,
    Sigmoid,
    Exp,
    Log,
    Sqrt,
    Softmax { axis: usize },
    LogSumExp { axis: usize },
    Sum { axis: usize },
    SumAll,
    Max { axis: usize, argmax: Vec<usize> },
    BroadcastTo,
    Concat { axis: usize },
    Resize { rows: Vec<f64>, cols: Vec<f64> },
    Clamp { min: f64, max: f64 },
    Reshape,
    Transpose,
    IndexSelect { axis: usize, indices: Vec<usize> },
    SmoothL1,
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    inputs: Vec<usize>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default, Debug)]
pub struct Tape {
    nodes: Vec<Node>,
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
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            inputs: Vec::new(),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

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

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: Vec<usize>) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            inputs,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let out_shape = kernels::broadcast_shape(va.shape(), vb.shape())
            .ok_or_else(|| Error::shape(name, va.shape(), vb.shape()))?;
        let data = if va.shape() == vb.shape() {
            va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ma = kernels::broadcast_map(&out_shape, va.shape());
            let mb = kernels::broadcast_map(&out_shape, vb.shape());
            let (da, db) = (va.data(), vb.data());
            ma.iter().zip(&mb).map(|(&i, &j)| f(da[i], db[j])).collect()
        };
        let value = Tensor::new(out_shape, data)?;
        self.push(name, value, op, vec![a.0, b.0])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul, |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(b).data().iter().any(|&v| v == 0.0) {
            return Err(Error::domain("div", "division by zero"));
        }
        self.binary("div", a, b, Op::Div, |x, y| x / y)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x * s);
        self.push("scale", v, Op::Scale(s), vec![a.0])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x + s);
        self.push("add_scalar", v, Op::Shift, vec![a.0])
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    /// `[m,k] × [k,n] → [m,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(va.data(), vb.data(), m, k, n);
        let value = Tensor::new(vec![m, n], data)?;
        self.push("matmul", value, Op::MatMul, vec![a.0, b.0])
    }

    /// 2-D convolution on a `[cin,h,w]` input with a `[cout,cin,k,k]` kernel.
    /// Zero padding of `dilation*(k-1)/2` keeps the extent at stride 1.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, stride: usize, dilation: usize) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(weight));
        let (sx, sw) = (vx.shape(), vw.shape());
        if sx.len() != 3 || sw.len() != 4 || sw[1] != sx[0] || sw[2] != sw[3] || sw[2] % 2 == 0 {
            return Err(Error::shape("conv2d", sx, sw));
        }
        if stride == 0 || dilation == 0 {
            return Err(Error::InvalidArgument("conv2d stride and dilation must be ≥ 1".into()));
        }
        let geom = ConvGeom::new(sx[0], sx[1], sx[2], sw[0], sw[2], stride, dilation);
        let mut inputs = vec![x.0, weight.0];
        let bias_data = match bias {
            Some(b) => {
                let vb = self.value(b);
                if vb.shape() != [geom.cout] {
                    return Err(Error::shape("conv2d", vb.shape(), &[geom.cout]));
                }
                inputs.push(b.0);
                Some(vb.data())
            }
            None => None,
        };
        let data = kernels::conv2d_forward(vx.data(), vw.data(), bias_data, &geom);
        let value = Tensor::new(vec![geom.cout, geom.oh, geom.ow], data)?;
        self.push("conv2d", value, Op::Conv2d(geom), inputs)
    }

    fn unary(&mut self, name: &'static str, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let v = self.value(a).map(f);
        self.push(name, v, op, vec![a.0])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, Op::Relu, |x| x.max(0.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, Op::Sigmoid, kernels::sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, Op::Exp, f64::exp)
    }

    /// Natural log; every input must be strictly positive.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&v| v <= 0.0) {
            return Err(Error::domain("log", format!("non-positive input {bad}")));
        }
        self.unary("log", a, Op::Log, f64::ln)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&v| v <= 0.0) {
            return Err(Error::domain("sqrt", format!("non-positive input {bad}")));
        }
        self.unary("sqrt", a, Op::Sqrt, f64::sqrt)
    }

    /// x·σ(x), built from recorded primitives.
    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let s = self.sigmoid(a)?;
        self.mul(a, s)
    }

    pub fn clamp(&mut self, a: Var, min: f64, max: f64) -> Result<Var> {
        self.unary("clamp", a, Op::Clamp { min, max }, |x| x.clamp(min, max))
    }

    /// Elementwise Huber loss with unit threshold.
    pub fn smooth_l1(&mut self, a: Var) -> Result<Var> {
        self.unary("smooth_l1", a, Op::SmoothL1, |x| {
            if x.abs() < 1.0 {
                0.5 * x * x
            } else {
                x.abs() - 0.5
            }
        })
    }

    fn check_axis(&self, name: &'static str, a: Var, axis: usize) -> Result<()> {
        let rank = self.shape(a).len();
        if axis >= rank {
            return Err(Error::InvalidArgument(format!("{name}: axis {axis} out of range for rank {rank}")));
        }
        Ok(())
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", a, axis)?;
        let va = self.value(a);
        let (outer, n, inner) = split_axis(va.shape(), axis);
        let x = va.data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * n * inner + k * inner + i;
                let m = (0..n).map(|k| x[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..n {
                    let e = (x[at(k)] - m).exp();
                    out[at(k)] = e;
                    z += e;
                }
                for k in 0..n {
                    out[at(k)] /= z;
                }
            }
        }
        let value = Tensor::new(va.shape().to_vec(), out)?;
        self.push("softmax", value, Op::Softmax { axis }, vec![a.0])
    }

    /// log Σ exp along `axis`, which is removed from the shape.
    pub fn logsumexp(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("logsumexp", a, axis)?;
        let va = self.value(a);
        let (outer, n, inner) = split_axis(va.shape(), axis);
        let x = va.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * n * inner + k * inner + i;
                let m = (0..n).map(|k| x[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..n).map(|k| (x[at(k)] - m).exp()).sum();
                out[o * inner + i] = m + z.ln();
            }
        }
        let value = Tensor::new(reduced_shape(va.shape(), axis), out)?;
        self.push("logsumexp", value, Op::LogSumExp { axis }, vec![a.0])
    }

    /// Sum along `axis`, which is removed from the shape.
    pub fn sum(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("sum", a, axis)?;
        let va = self.value(a);
        let (outer, n, inner) = split_axis(va.shape(), axis);
        let x = va.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let row = &x[o * n * inner + k * inner..o * n * inner + (k + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        let value = Tensor::new(reduced_shape(va.shape(), axis), out)?;
        self.push("sum", value, Op::Sum { axis }, vec![a.0])
    }

    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("mean", a, axis)?;
        let n = self.shape(a)[axis] as f64;
        let s = self.sum(a, axis)?;
        self.scale(s, 1.0 / n)
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().sum();
        self.push("sum_all", Tensor::scalar(s), Op::SumAll, vec![a.0])
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel() as f64;
        let s = self.sum_all(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Maximum along `axis` (removed from the shape). The backward pass routes
    /// the incoming gradient to the first maximal position.
    pub fn max(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("max", a, axis)?;
        let va = self.value(a);
        let (outer, n, inner) = split_axis(va.shape(), axis);
        let x = va.data();
        let mut out = vec![0.0; outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = 0;
                let mut bv = x[o * n * inner + i];
                for k in 1..n {
                    let v = x[o * n * inner + k * inner + i];
                    if v > bv {
                        bv = v;
                        best = k;
                    }
                }
                out[o * inner + i] = bv;
                argmax[o * inner + i] = best;
            }
        }
        let value = Tensor::new(reduced_shape(va.shape(), axis), out)?;
        self.push("max", value, Op::Max { axis, argmax }, vec![a.0])
    }

    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let va = self.value(a);
        match kernels::broadcast_shape(va.shape(), shape) {
            Some(s) if s == shape => {}
            _ => return Err(Error::shape("broadcast_to", va.shape(), shape)),
        }
        let map = kernels::broadcast_map(shape, va.shape());
        let d = va.data();
        let value = Tensor::new(shape.to_vec(), map.iter().map(|&j| d[j]).collect())?;
        self.push("broadcast_to", value, Op::BroadcastTo, vec![a.0])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        self.check_axis("concat", *first, axis)?;
        let base = self.shape(*first).to_vec();
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(k, (x, y))| k == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = split_axis(&out_shape, axis);
        let mut out = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let v = self.value(*p);
                let n = v.shape()[axis];
                out.extend_from_slice(&v.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let value = Tensor::new(out_shape, out)?;
        self.push("concat", value, Op::Concat { axis }, parts.iter().map(|p| p.0).collect())
    }

    /// Spatial resize of a `[c,h,w]` map (bilinear; antialiased when shrinking).
    pub fn resize(&mut self, a: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let va = self.value(a);
        let s = va.shape();
        if s.len() != 3 || out_h == 0 || out_w == 0 {
            return Err(Error::shape("resize", s, &[out_h, out_w]));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let rows = kernels::resize_matrix(h, out_h);
        let cols = kernels::resize_matrix(w, out_w);
        let data = kernels::resize_forward(va.data(), c, (h, w), (out_h, out_w), &rows, &cols);
        let value = Tensor::new(vec![c, out_h, out_w], data)?;
        self.push("resize", value, Op::Resize { rows, cols }, vec![a.0])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape.to_vec())?;
        self.push("reshape", value, Op::Reshape, vec![a.0])
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let s = va.shape();
        if s.len() != 2 {
            return Err(Error::shape("transpose", s, &[0, 0]));
        }
        let (r, c) = (s[0], s[1]);
        let d = va.data();
        let data = (0..r * c).map(|k| d[(k % r) * c + k / r]).collect();
        let value = Tensor::new(vec![c, r], data)?;
        self.push("transpose", value, Op::Transpose, vec![a.0])
    }

    /// Gathers `indices` along `axis` (duplicates allowed).
    pub fn index_select(&mut self, a: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        self.check_axis("index_select", a, axis)?;
        let va = self.value(a);
        let (outer, n, inner) = split_axis(va.shape(), axis);
        if indices.is_empty() || indices.iter().any(|&i| i >= n) {
            return Err(Error::InvalidArgument(format!(
                "index_select: indices {indices:?} invalid for extent {n}"
            )));
        }
        let d = va.data();
        let mut out = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                out.extend_from_slice(&d[o * n * inner + i * inner..o * n * inner + (i + 1) * inner]);
            }
        }
        let mut shape = va.shape().to_vec();
        shape[axis] = indices.len();
        let value = Tensor::new(shape, out)?;
        self.push(
            "index_select",
            value,
            Op::IndexSelect {
                axis,
                indices: indices.to_vec(),
            },
            vec![a.0],
        )
    }

    /// Fingerprint of every branch the forward pass took: argmax positions,
    /// active sets of relu, clamp and smooth-L1, gather indices and scale
    /// factors. Two evaluations with equal signatures lie on the same smooth
    /// piece of the recorded function.
    pub fn branch_signature(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for (k, node) in self.nodes.iter().enumerate() {
            let input = || self.nodes[node.inputs[0]].value.data();
            match &node.op {
                Op::Max { argmax, .. } => (k, argmax).hash(&mut h),
                Op::IndexSelect { indices, .. } => (k, indices).hash(&mut h),
                Op::Scale(f) => (k, f.to_bits()).hash(&mut h),
                Op::Relu => (k, input().iter().map(|&v| v > 0.0).collect::<Vec<_>>()).hash(&mut h),
                Op::Clamp { min, max } => {
                    (k, input().iter().map(|&v| (v < *min, v > *max)).collect::<Vec<_>>()).hash(&mut h)
                }
                Op::SmoothL1 => (k, input().iter().map(|&v| v.abs() < 1.0).collect::<Vec<_>>()).hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    /// Reverse sweep from a one-element root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = &self.nodes[root.0].value;
        if rv.numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward root must be scalar, got shape {:?}",
                rv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::full(rv.shape().to_vec(), 1.0));
        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || node.inputs.is_empty() {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let input_grads = self.node_backward(node, &g)?;
            // keep the node's own gradient for callers inspecting intermediates
            grads[id] = Some(g);
            for (inp, ig) in node.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !self.nodes[*inp].requires_grad {
                    continue;
                }
                match &mut grads[*inp] {
                    Some(acc) => acc.data_mut().iter_mut().zip(ig.data()).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn node_backward(&self, node: &Node, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let input = |k: usize| &self.nodes[node.inputs[k]].value;
        let out = &node.value;
        let gd = g.data();
        let like = |t: &Tensor, data: Vec<f64>| Tensor::new(t.shape().to_vec(), data);
        let reduce = |t: &Tensor, data: Vec<f64>| {
            Tensor::new(t.shape().to_vec(), kernels::reduce_to(&data, out.shape(), t.shape()))
        };
        let grads = match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add => vec![Some(reduce(input(0), gd.to_vec())?), Some(reduce(input(1), gd.to_vec())?)],
            Op::Sub => vec![
                Some(reduce(input(0), gd.to_vec())?),
                Some(reduce(input(1), gd.iter().map(|v| -v).collect())?),
            ],
            Op::Mul | Op::Div => {
                let (a, b) = (input(0), input(1));
                let ma = kernels::broadcast_map(out.shape(), a.shape());
                let mb = kernels::broadcast_map(out.shape(), b.shape());
                let (da, db) = (a.data(), b.data());
                let (ga, gb): (Vec<f64>, Vec<f64>) = if matches!(node.op, Op::Mul) {
                    gd.iter()
                        .zip(ma.iter().zip(&mb))
                        .map(|(&gv, (&i, &j))| (gv * db[j], gv * da[i]))
                        .unzip()
                } else {
                    gd.iter()
                        .zip(ma.iter().zip(&mb))
                        .map(|(&gv, (&i, &j))| (gv / db[j], -gv * da[i] / (db[j] * db[j])))
                        .unzip()
                };
                vec![Some(reduce(a, ga)?), Some(reduce(b, gb)?)]
            }
            Op::Scale(s) => vec![Some(g.map(|v| v * s))],
            Op::Shift | Op::Reshape => vec![Some(like(input(0), gd.to_vec())?)],
            Op::BroadcastTo => vec![Some(reduce(input(0), gd.to_vec())?)],
            Op::MatMul => {
                let (a, b) = (input(0), input(1));
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                let (ga, gb) = kernels::matmul_backward(a.data(), b.data(), gd, m, k, n);
                vec![Some(like(a, ga)?), Some(like(b, gb)?)]
            }
            Op::Conv2d(geom) => {
                let (x, w) = (input(0), input(1));
                let (gx, gw, gb) = kernels::conv2d_backward(x.data(), w.data(), gd, geom);
                let mut v = vec![Some(like(x, gx)?), Some(like(w, gw)?)];
                if node.inputs.len() == 3 {
                    v.push(Some(Tensor::vector(gb)));
                }
                v
            }
            Op::Relu => {
                let x = input(0);
                let d = x.data().iter().zip(gd).map(|(&xv, &gv)| if xv > 0.0 { gv } else { 0.0 }).collect();
                vec![Some(like(x, d)?)]
            }
            Op::Sigmoid => {
                let d = out.data().iter().zip(gd).map(|(&s, &gv)| gv * s * (1.0 - s)).collect();
                vec![Some(like(out, d)?)]
            }
            Op::Exp => {
                let d = out.data().iter().zip(gd).map(|(&e, &gv)| gv * e).collect();
                vec![Some(like(out, d)?)]
            }
            Op::Log => {
                let x = input(0);
                let d = x.data().iter().zip(gd).map(|(&xv, &gv)| gv / xv).collect();
                vec![Some(like(x, d)?)]
            }
            Op::Sqrt => {
                let d = out.data().iter().zip(gd).map(|(&s, &gv)| gv * 0.5 / s).collect();
                vec![Some(like(out, d)?)]
            }
            Op::Clamp { min, max } => {
                let x = input(0);
                let d = x
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&xv, &gv)| if xv >= *min && xv <= *max { gv } else { 0.0 })
                    .collect();
                vec![Some(like(x, d)?)]
            }
            Op::SmoothL1 => {
                let x = input(0);
                let d = x
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&xv, &gv)| gv * if xv.abs() < 1.0 { xv } else { xv.signum() })
                    .collect();
                vec![Some(like(x, d)?)]
            }
            Op::Softmax { axis } => {
                let (outer, n, inner) = split_axis(out.shape(), *axis);
                let y = out.data();
                let mut d = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| o * n * inner + k * inner + i;
                        let dot: f64 = (0..n).map(|k| gd[at(k)] * y[at(k)]).sum();
                        for k in 0..n {
                            d[at(k)] = y[at(k)] * (gd[at(k)] - dot);
                        }
                    }
                }
                vec![Some(like(out, d)?)]
            }
            Op::LogSumExp { axis } => {
                let x = input(0);
                let (outer, n, inner) = split_axis(x.shape(), *axis);
                let xd = x.data();
                let y = out.data();
                let mut d = vec![0.0; xd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let r = o * inner + i;
                        for k in 0..n {
                            let at = o * n * inner + k * inner + i;
                            d[at] = gd[r] * (xd[at] - y[r]).exp();
                        }
                    }
                }
                vec![Some(like(x, d)?)]
            }
            Op::Sum { axis } => {
                let x = input(0);
                let (outer, n, inner) = split_axis(x.shape(), *axis);
                let mut d = vec![0.0; x.numel()];
                for o in 0..outer {
                    for k in 0..n {
                        d[o * n * inner + k * inner..o * n * inner + (k + 1) * inner]
                            .copy_from_slice(&gd[o * inner..(o + 1) * inner]);
                    }
                }
                vec![Some(like(x, d)?)]
            }
            Op::SumAll => {
                let x = input(0);
                vec![Some(Tensor::full(x.shape().to_vec(), gd[0]))]
            }
            Op::Max { axis, argmax } => {
                let x = input(0);
                let (outer, n, inner) = split_axis(x.shape(), *axis);
                let mut d = vec![0.0; x.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let r = o * inner + i;
                        d[o * n * inner + argmax[r] * inner + i] += gd[r];
                    }
                }
                vec![Some(like(x, d)?)]
            }
            Op::Concat { axis } => {
                let (outer, total, inner) = split_axis(out.shape(), *axis);
                let mut v = Vec::with_capacity(node.inputs.len());
                let mut start = 0;
                for k in 0..node.inputs.len() {
                    let x = input(k);
                    let n = x.shape()[*axis];
                    let mut d = Vec::with_capacity(x.numel());
                    for o in 0..outer {
                        let base = o * total * inner + start * inner;
                        d.extend_from_slice(&gd[base..base + n * inner]);
                    }
                    start += n;
                    v.push(Some(like(x, d)?));
                }
                v
            }
            Op::Resize { rows, cols } => {
                let x = input(0);
                let s = x.shape();
                let os = out.shape();
                let d = kernels::resize_backward(gd, s[0], (s[1], s[2]), (os[1], os[2]), rows, cols);
                vec![Some(like(x, d)?)]
            }
            Op::Transpose => {
                let x = input(0);
                let (r, c) = (x.shape()[0], x.shape()[1]);
                // out is [c, r]; grad wrt x[i,j] = g[j,i]
                let d = (0..r * c).map(|k| gd[(k % c) * r + k / c]).collect();
                vec![Some(like(x, d)?)]
            }
            Op::IndexSelect { axis, indices } => {
                let x = input(0);
                let (outer, n, inner) = split_axis(x.shape(), *axis);
                let m = indices.len();
                let mut d = vec![0.0; x.numel()];
                for o in 0..outer {
                    for (slot, &i) in indices.iter().enumerate() {
                        let src = &gd[o * m * inner + slot * inner..o * m * inner + (slot + 1) * inner];
                        let dst = &mut d[o * n * inner + i * inner..o * n * inner + (i + 1) * inner];
                        dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
                    }
                }
                vec![Some(like(x, d)?)]
            }
        };
        Ok(grads)
    }
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s.remove(axis);
    s
}
