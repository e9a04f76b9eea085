//! Reverse-mode autodiff over a flat tape of tensor operations.
//!
//! A [`Graph`] is rebuilt for every forward pass; ops append nodes and
//! return [`Var`] handles. Parents always precede children on the tape, so
//! [`Graph::backward`] is a single reverse sweep.

use super::kernels::{self, Conv3dSpec, GroupNormStats};
use super::{dims5, Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T: Element> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Sum(Var),
    Mean(Var),
    Concat(Vec<Var>),
    Slice {
        input: Var,
        start: usize,
    },
    Conv3d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        spec: Conv3dSpec,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    Resize3 {
        input: Var,
    },
    GroupNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        stats: GroupNormStats<T>,
    },
}

struct Node<T: Element> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

pub struct Graph<T: Element> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    bindings: Vec<(Var, usize)>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            bindings: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` target w.r.t. `v`, if it was needed.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Leaves registered against an external parameter store, as
    /// `(var, parameter index)` pairs.
    pub fn bindings(&self) -> &[(Var, usize)] {
        &self.bindings
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Constant input that never needs a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Differentiable leaf bound to parameter slot `param_idx`; used by
    /// optimizers to route gradients back into the parameter store.
    pub fn param(&mut self, value: Tensor<T>, param_idx: usize) -> Var {
        let v = self.leaf(value, true);
        self.bindings.push((v, param_idx));
        v
    }

    fn binary_shape_check(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shape_check(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::from_vec(self.value(a).shape(), data)?;
        let rq = self.requires(a) || self.requires(b);
        Ok(self.push(value, rq, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shape_check(a, b, "sub")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x - y)
            .collect();
        let value = Tensor::from_vec(self.value(a).shape(), data)?;
        let rq = self.requires(a) || self.requires(b);
        Ok(self.push(value, rq, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shape_check(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::from_vec(self.value(a).shape(), data)?;
        let rq = self.requires(a) || self.requires(b);
        Ok(self.push(value, rq, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shape_check(a, b, "div")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x / y)
            .collect();
        let value = Tensor::from_vec(self.value(a).shape(), data)?;
        let rq = self.requires(a) || self.requires(b);
        Ok(self.push(value, rq, Op::Div(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let sv = T::from_f64(s);
        let data = self.value(a).data().iter().map(|&x| x * sv).collect();
        let value = Tensor::from_vec(self.value(a).shape(), data).expect("same shape");
        let rq = self.requires(a);
        self.push(value, rq, Op::Scale(a, sv))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let sv = T::from_f64(s);
        let data = self.value(a).data().iter().map(|&x| x + sv).collect();
        let value = Tensor::from_vec(self.value(a).shape(), data).expect("same shape");
        let rq = self.requires(a);
        self.push(value, rq, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data = self
            .value(a)
            .data()
            .iter()
            .map(|&x| if x > T::zero() { x } else { T::zero() })
            .collect();
        let value = Tensor::from_vec(self.value(a).shape(), data).expect("same shape");
        let rq = self.requires(a);
        self.push(value, rq, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let data = self
            .value(a)
            .data()
            .iter()
            .map(|&x| T::one() / (T::one() + (-x).exp()))
            .collect();
        let value = Tensor::from_vec(self.value(a).shape(), data).expect("same shape");
        let rq = self.requires(a);
        self.push(value, rq, Op::Sigmoid(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total: T = self.value(a).data().iter().copied().sum();
        let rq = self.requires(a);
        self.push(Tensor::scalar(total), rq, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::from_f64(self.value(a).numel() as f64);
        let total: T = self.value(a).data().iter().copied().sum();
        let rq = self.requires(a);
        self.push(Tensor::scalar(total / n), rq, Op::Mean(a))
    }

    /// Concatenate 5-D tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::InvalidArg("concat of zero tensors".into()));
        }
        let [n, _, d, h, w] = dims5(self.value(parts[0]).shape())?;
        let mut c_total = 0;
        for &p in parts {
            let [pn, pc, pd, ph, pw] = dims5(self.value(p).shape())?;
            if (pn, pd, ph, pw) != (n, d, h, w) {
                return Err(Error::Shape(format!(
                    "concat: incompatible shapes {:?} vs {:?}",
                    self.value(parts[0]).shape(),
                    self.value(p).shape()
                )));
            }
            c_total += pc;
        }
        let vol = d * h * w;
        let mut out = Tensor::zeros(&[n, c_total, d, h, w]);
        let mut off = 0;
        for &p in parts {
            let pc = self.value(p).shape()[1];
            let src = self.value(p).data();
            let dst = out.data_mut();
            for ni in 0..n {
                let s = ni * pc * vol;
                let t = (ni * c_total + off) * vol;
                dst[t..t + pc * vol].copy_from_slice(&src[s..s + pc * vol]);
            }
            off += pc;
        }
        let rq = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(out, rq, Op::Concat(parts.to_vec())))
    }

    /// Split a 5-D tensor into channel groups of the given sizes.
    pub fn split_channels(&mut self, a: Var, sizes: &[usize]) -> Result<Vec<Var>> {
        let [n, c, d, h, w] = dims5(self.value(a).shape())?;
        if sizes.iter().sum::<usize>() != c {
            return Err(Error::Shape(format!(
                "split sizes {sizes:?} do not sum to {c} channels"
            )));
        }
        let vol = d * h * w;
        let rq = self.requires(a);
        let mut out = Vec::with_capacity(sizes.len());
        let mut start = 0;
        for &len in sizes {
            let mut part = Tensor::zeros(&[n, len, d, h, w]);
            for ni in 0..n {
                let s = (ni * c + start) * vol;
                let t = ni * len * vol;
                part.data_mut()[t..t + len * vol]
                    .copy_from_slice(&self.value(a).data()[s..s + len * vol]);
            }
            out.push(self.push(part, rq, Op::Slice { input: a, start }));
            start += len;
        }
        Ok(out)
    }

    pub fn conv3d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Result<Var> {
        let spec = Conv3dSpec { stride, padding };
        let out = kernels::conv3d_forward(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            &spec,
        )?;
        let rq =
            self.requires(input) || self.requires(weight) || bias.is_some_and(|b| self.requires(b));
        Ok(self.push(
            out,
            rq,
            Op::Conv3d {
                input,
                weight,
                bias,
                spec,
            },
        ))
    }

    pub fn maxpool2(&mut self, input: Var) -> Result<Var> {
        let (out, argmax) = kernels::maxpool2_forward(self.value(input))?;
        let rq = self.requires(input);
        Ok(self.push(out, rq, Op::MaxPool2 { input, argmax }))
    }

    pub fn resize3(&mut self, input: Var, out_spatial: [usize; 3]) -> Result<Var> {
        let out = kernels::resize3_forward(self.value(input), out_spatial)?;
        let rq = self.requires(input);
        Ok(self.push(out, rq, Op::Resize3 { input }))
    }

    pub fn group_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        eps: f64,
    ) -> Result<Var> {
        let (out, stats) = kernels::groupnorm_forward(
            self.value(input),
            self.value(gamma),
            self.value(beta),
            groups,
            eps,
        )?;
        let rq = self.requires(input) || self.requires(gamma) || self.requires(beta);
        Ok(self.push(
            out,
            rq,
            Op::GroupNorm {
                input,
                gamma,
                beta,
                groups,
                stats,
            },
        ))
    }

    /// Verify every node value (and any gradient) is finite.
    pub fn check_finite(&self) -> Result<()> {
        for (i, node) in self.nodes.iter().enumerate() {
            if !node.value.is_finite() {
                return Err(Error::Data(format!("non-finite value at node {i}")));
            }
        }
        for (i, g) in self.grads.iter().enumerate() {
            if let Some(g) = g {
                if !g.is_finite() {
                    return Err(Error::Data(format!("non-finite gradient at node {i}")));
                }
            }
        }
        Ok(())
    }

    fn grad_buf(&mut self, v: Var) -> &mut Tensor<T> {
        let shape = self.nodes[v.0].value.shape().to_vec();
        self.grads[v.0].get_or_insert_with(|| Tensor::zeros(&shape))
    }

    /// Reverse sweep from a scalar node, accumulating gradients for every
    /// node with `requires_grad`. Can be called repeatedly; each call
    /// recomputes gradients from scratch.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::InvalidArg(format!(
                "backward target must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || self.grads[i].is_none() {
                continue;
            }
            let g = self.grads[i].take().expect("checked above");
            self.propagate(i, &g)?;
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: &Tensor<T>) -> Result<()> {
        // Op is moved out so parent grad buffers can be borrowed mutably;
        // every arm puts nothing back because ops are immutable context.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.requires(*a) {
                    self.grad_buf(*a).add_assign(g);
                }
                if self.requires(*b) {
                    self.grad_buf(*b).add_assign(g);
                }
            }
            Op::Sub(a, b) => {
                if self.requires(*a) {
                    self.grad_buf(*a).add_assign(g);
                }
                if self.requires(*b) {
                    for (d, s) in self.grad_buf(*b).data_mut().iter_mut().zip(g.data()) {
                        *d = *d - *s;
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.requires(*a) {
                    let bv = self.nodes[b.0].value.clone();
                    for ((d, s), x) in self
                        .grad_buf(*a)
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(bv.data())
                    {
                        *d = *d + *s * *x;
                    }
                }
                if self.requires(*b) {
                    let av = self.nodes[a.0].value.clone();
                    for ((d, s), x) in self
                        .grad_buf(*b)
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(av.data())
                    {
                        *d = *d + *s * *x;
                    }
                }
            }
            Op::Div(a, b) => {
                if self.requires(*a) {
                    let bv = self.nodes[b.0].value.clone();
                    for ((d, s), y) in self
                        .grad_buf(*a)
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(bv.data())
                    {
                        *d = *d + *s / *y;
                    }
                }
                if self.requires(*b) {
                    let av = self.nodes[a.0].value.clone();
                    let bv = self.nodes[b.0].value.clone();
                    for (((d, s), x), y) in self
                        .grad_buf(*b)
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(av.data())
                        .zip(bv.data())
                    {
                        *d = *d - *s * *x / (*y * *y);
                    }
                }
            }
            Op::Scale(a, s) => {
                if self.requires(*a) {
                    let s = *s;
                    for (d, gv) in self.grad_buf(*a).data_mut().iter_mut().zip(g.data()) {
                        *d = *d + *gv * s;
                    }
                }
            }
            Op::AddScalar(a) => {
                if self.requires(*a) {
                    self.grad_buf(*a).add_assign(g);
                }
            }
            Op::Relu(a) => {
                if self.requires(*a) {
                    let av = self.nodes[a.0].value.clone();
                    for ((d, s), x) in self
                        .grad_buf(*a)
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(av.data())
                    {
                        // subgradient 0 at exactly 0
                        if *x > T::zero() {
                            *d = *d + *s;
                        }
                    }
                }
            }
            Op::Sigmoid(a) => {
                if self.requires(*a) {
                    let yv = self.nodes[i].value.clone();
                    for ((d, s), y) in self
                        .grad_buf(*a)
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(yv.data())
                    {
                        *d = *d + *s * *y * (T::one() - *y);
                    }
                }
            }
            Op::Sum(a) => {
                if self.requires(*a) {
                    let gv = g.data()[0];
                    for d in self.grad_buf(*a).data_mut() {
                        *d = *d + gv;
                    }
                }
            }
            Op::Mean(a) => {
                if self.requires(*a) {
                    let n = T::from_f64(self.nodes[a.0].value.numel() as f64);
                    let gv = g.data()[0] / n;
                    for d in self.grad_buf(*a).data_mut() {
                        *d = *d + gv;
                    }
                }
            }
            Op::Concat(parts) => {
                let [n, c_total, d, h, w] = dims5(self.nodes[i].value.shape())?;
                let vol = d * h * w;
                let mut off = 0;
                for &p in parts {
                    let pc = self.nodes[p.0].value.shape()[1];
                    if self.requires(p) {
                        let buf = self.grad_buf(p);
                        for ni in 0..n {
                            let s = (ni * c_total + off) * vol;
                            let t = ni * pc * vol;
                            let dst = &mut buf.data_mut()[t..t + pc * vol];
                            let src = &g.data()[s..s + pc * vol];
                            for (dv, sv) in dst.iter_mut().zip(src) {
                                *dv = *dv + *sv;
                            }
                        }
                    }
                    off += pc;
                }
            }
            Op::Slice { input, start } => {
                if self.requires(*input) {
                    let [n, c, d, h, w] = dims5(self.nodes[input.0].value.shape())?;
                    let len = self.nodes[i].value.shape()[1];
                    let vol = d * h * w;
                    let buf = self.grad_buf(*input);
                    for ni in 0..n {
                        let t = (ni * c + start) * vol;
                        let s = ni * len * vol;
                        let dst = &mut buf.data_mut()[t..t + len * vol];
                        let src = &g.data()[s..s + len * vol];
                        for (dv, sv) in dst.iter_mut().zip(src) {
                            *dv = *dv + *sv;
                        }
                    }
                }
            }
            Op::Conv3d {
                input,
                weight,
                bias,
                spec,
            } => {
                if self.requires(*input) {
                    let shape = self.nodes[input.0].value.shape().to_vec();
                    let gi = kernels::conv3d_backward_input(
                        g,
                        &shape,
                        &self.nodes[weight.0].value,
                        spec,
                    );
                    self.grad_buf(*input).add_assign(&gi);
                }
                if self.requires(*weight) {
                    let wshape = self.nodes[weight.0].value.shape().to_vec();
                    let gw = kernels::conv3d_backward_weight(
                        g,
                        &self.nodes[input.0].value,
                        &wshape,
                        spec,
                    );
                    self.grad_buf(*weight).add_assign(&gw);
                }
                if let Some(b) = bias {
                    if self.requires(*b) {
                        let cout = self.nodes[b.0].value.numel();
                        let gb = kernels::conv3d_backward_bias(g, cout);
                        self.grad_buf(*b).add_assign(&gb);
                    }
                }
            }
            Op::MaxPool2 { input, argmax } => {
                if self.requires(*input) {
                    let shape = self.nodes[input.0].value.shape().to_vec();
                    let gi = kernels::maxpool2_backward(g, argmax, &shape);
                    self.grad_buf(*input).add_assign(&gi);
                }
            }
            Op::Resize3 { input } => {
                if self.requires(*input) {
                    let shape = self.nodes[input.0].value.shape().to_vec();
                    let gi = kernels::resize3_backward(g, &shape);
                    self.grad_buf(*input).add_assign(&gi);
                }
            }
            Op::GroupNorm {
                input,
                gamma,
                beta,
                groups,
                stats,
            } => {
                let (gi, gg, gb) = kernels::groupnorm_backward(
                    g,
                    &self.nodes[input.0].value,
                    &self.nodes[gamma.0].value,
                    *groups,
                    stats,
                );
                if self.requires(*input) {
                    self.grad_buf(*input).add_assign(&gi);
                }
                if self.requires(*gamma) {
                    self.grad_buf(*gamma).add_assign(&gg);
                }
                if self.requires(*beta) {
                    self.grad_buf(*beta).add_assign(&gb);
                }
            }
        }
        self.nodes[i].op = op;
        Ok(())
    }
}
