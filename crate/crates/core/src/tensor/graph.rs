use super::{axis_split, check_axis, sigmoid, softmax, softplus, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
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
    Add(Var, Var),
    AddN(Vec<Var>),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Affine(Var, f64),
    ScalarMul(Var, Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Softplus(Var),
    SumAll(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    MaxAxis(Var, usize, Vec<usize>),
    Broadcast(Var, usize),
    Softmax(Var, usize),
    SquaredError(Var, Var),
    CrossEntropy(Var, usize),
    Transpose(Var),
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A single-use computation graph. Nodes are appended in evaluation order,
/// which is also a valid topological order for the reverse sweep.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    fault: Option<Fault>,
}

/// Deliberately wrong backward rules, used to check that gradient checkers
/// notice a broken op.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Softmax backward without the centering term.
    SoftmaxBackward,
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

    #[doc(hidden)]
    pub fn inject_fault(&mut self, fault: Fault) {
        self.fault = Some(fault);
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    /// Copies the value of `v` into a new constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push_raw(value, op, requires_grad)
    }

    fn binary_same_shape(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        va.same_shape(op_name, vb)?;
        let out = va.zip_map(vb, f)?;
        Ok(self.push(out, op, &[a, b]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Sum of equally shaped tensors.
    pub fn add_n(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::contract("add_n needs at least one input"))?;
        let mut out = self.value(first).clone();
        for &x in &xs[1..] {
            let v = self.value(x);
            out.same_shape("add_n", v)?;
            for (o, &e) in out.data_mut().iter_mut().zip(v.data()) {
                *o += e;
            }
        }
        Ok(self.push(out, Op::AddN(xs.to_vec()), xs))
    }

    /// `factor * x + offset`.
    pub fn affine(&mut self, x: Var, factor: f64, offset: f64) -> Var {
        let out = self.value(x).map(|v| factor * v + offset);
        self.push(out, Op::Affine(x, factor), &[x])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.affine(x, factor, 0.0)
    }

    /// Multiplies every entry of `x` by the one-element tensor `s`.
    pub fn scalar_mul(&mut self, s: Var, x: Var) -> Result<Var> {
        let sv = self.value(s);
        if !sv.is_scalar() {
            return Err(Error::Dimension {
                op: "scalar_mul",
                lhs: sv.shape().to_vec(),
                rhs: self.value(x).shape().to_vec(),
            });
        }
        let k = sv.item();
        let out = self.value(x).map(|v| k * v);
        Ok(self.push(out, Op::ScalarMul(s, x), &[s, x]))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::exp);
        self.push(out, Op::Exp(x), &[x])
    }

    pub fn log(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::ln);
        self.push(out, Op::Log(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x), &[x])
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let out = self.value(x).map(softplus);
        self.push(out, Op::Softplus(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::SumAll(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    fn reduce_axis(&self, x: Var, axis: usize, f: impl Fn(&[f64]) -> f64) -> Tensor {
        let xv = self.value(x);
        let (outer, len, inner) = axis_split(xv.shape(), axis);
        let mut out = Vec::with_capacity(outer * inner);
        let mut lane = vec![0.0; len];
        for o in 0..outer {
            for i in 0..inner {
                for (k, slot) in lane.iter_mut().enumerate() {
                    *slot = xv.data()[(o * len + k) * inner + i];
                }
                out.push(f(&lane));
            }
        }
        Tensor::new(reduced_shape(xv.shape(), axis), out).expect("reduced shape")
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        check_axis("sum_axis", self.value(x), axis)?;
        let out = self.reduce_axis(x, axis, |l| l.iter().sum());
        Ok(self.push(out, Op::SumAxis(x, axis), &[x]))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        check_axis("mean_axis", self.value(x), axis)?;
        let out = self.reduce_axis(x, axis, |l| l.iter().sum::<f64>() / l.len() as f64);
        Ok(self.push(out, Op::MeanAxis(x, axis), &[x]))
    }

    /// Maximum along `axis`; the subgradient goes to the first maximal entry.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<(Var, Vec<usize>)> {
        check_axis("max_axis", self.value(x), axis)?;
        let argmax: Vec<usize> = {
            let xv = self.value(x);
            let (outer, len, inner) = axis_split(xv.shape(), axis);
            let mut idx = Vec::with_capacity(outer * inner);
            for o in 0..outer {
                for i in 0..inner {
                    let mut best = 0;
                    for k in 1..len {
                        if xv.data()[(o * len + k) * inner + i]
                            > xv.data()[(o * len + best) * inner + i]
                        {
                            best = k;
                        }
                    }
                    idx.push(best);
                }
            }
            idx
        };
        let out = self.reduce_axis(x, axis, |l| l.iter().copied().fold(f64::NEG_INFINITY, f64::max));
        let v = self.push(out, Op::MaxAxis(x, axis, argmax.clone()), &[x]);
        Ok((v, argmax))
    }

    /// Inserts a new axis at position `axis` with extent `n`, repeating `x`.
    pub fn broadcast(&mut self, x: Var, axis: usize, n: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis > xv.shape().len() || n == 0 {
            return Err(Error::Dimension {
                op: "broadcast",
                lhs: xv.shape().to_vec(),
                rhs: vec![axis, n],
            });
        }
        let outer: usize = xv.shape()[..axis].iter().product();
        let inner: usize = xv.shape()[axis..].iter().product();
        let mut data = Vec::with_capacity(outer * n * inner);
        for o in 0..outer {
            for _ in 0..n {
                data.extend_from_slice(&xv.data()[o * inner..(o + 1) * inner]);
            }
        }
        let mut shape = xv.shape().to_vec();
        shape.insert(axis, n);
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Broadcast(x, axis), &[x]))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = softmax(self.value(x), axis)?;
        Ok(self.push(out, Op::Softmax(x, axis), &[x]))
    }

    /// Mean of squared differences over all entries.
    pub fn squared_error(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        va.same_shape("squared_error", vb)?;
        let n = va.numel() as f64;
        let s: f64 = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        Ok(self.push(Tensor::scalar(s / n), Op::SquaredError(a, b), &[a, b]))
    }

    /// `-log softmax(z)[target]` for a logit vector `z`.
    pub fn cross_entropy(&mut self, z: Var, target: usize) -> Result<Var> {
        let zv = self.value(z);
        if target >= zv.numel() {
            return Err(Error::contract(format!(
                "target class {target} out of range for {} logits",
                zv.numel()
            )));
        }
        let loss = super::logsumexp(zv.data()) - zv.data()[target];
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy(z, target), &[z]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape().len() != 2 {
            return Err(Error::Dimension {
                op: "transpose",
                lhs: xv.shape().to_vec(),
                rhs: vec![],
            });
        }
        let out = xv.transpose();
        Ok(self.push(out, Op::Transpose(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Reverse sweep from a scalar `loss`. Returns one gradient per target, in
    /// order; targets the loss does not depend on get zeros. The graph is not
    /// mutated, so repeated calls give identical results.
    pub fn backward(&self, loss: Var, targets: &[Var]) -> Result<Vec<Tensor>> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }

        Ok(targets
            .iter()
            .map(|t| {
                grads
                    .get(t.0)
                    .and_then(Clone::clone)
                    .unwrap_or_else(|| Tensor::zeros(self.value(*t).shape()))
            })
            .collect())
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.requires_grad(*a) {
                    let ga = g.matmul(&self.value(*b).transpose()).expect("matmul grad");
                    self.accumulate(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    let gb = self.value(*a).transpose().matmul(g).expect("matmul grad");
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddN(xs) => {
                for &x in xs {
                    self.accumulate(grads, x, g.clone());
                }
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, zip(g, vb, |g, b| g * b));
                self.accumulate(grads, *b, zip(g, va, |g, a| g * a));
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, zip(g, vb, |g, b| g / b));
                let gb: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(va.data())
                    .zip(vb.data())
                    .map(|((g, a), b)| -g * a / (b * b))
                    .collect();
                self.accumulate(grads, *b, like(vb, gb));
            }
            Op::Affine(x, factor) => {
                self.accumulate(grads, *x, g.map(|v| v * factor));
            }
            Op::ScalarMul(s, x) => {
                let (vs, vx) = (self.value(*s), self.value(*x));
                if self.requires_grad(*s) {
                    let d: f64 = g.data().iter().zip(vx.data()).map(|(g, x)| g * x).sum();
                    self.accumulate(grads, *s, like(vs, vec![d]));
                }
                let k = vs.item();
                self.accumulate(grads, *x, g.map(|v| v * k));
            }
            Op::Exp(x) => self.accumulate(grads, *x, zip(g, y, |g, y| g * y)),
            Op::Log(x) => self.accumulate(grads, *x, zip(g, self.value(*x), |g, x| g / x)),
            Op::Sigmoid(x) => self.accumulate(grads, *x, zip(g, y, |g, y| g * y * (1.0 - y))),
            Op::Softplus(x) => {
                self.accumulate(grads, *x, zip(g, self.value(*x), |g, x| g * sigmoid(x)))
            }
            Op::SumAll(x) => {
                let k = g.item();
                self.accumulate(grads, *x, Tensor::full(self.value(*x).shape(), k));
            }
            Op::SumAxis(x, axis) | Op::MeanAxis(x, axis) => {
                let xv = self.value(*x);
                let (outer, len, inner) = axis_split(xv.shape(), *axis);
                let div = if matches!(node.op, Op::MeanAxis(..)) {
                    len as f64
                } else {
                    1.0
                };
                let mut out = vec![0.0; xv.numel()];
                for o in 0..outer {
                    for k in 0..len {
                        for i in 0..inner {
                            out[(o * len + k) * inner + i] = g.data()[o * inner + i] / div;
                        }
                    }
                }
                self.accumulate(grads, *x, like(xv, out));
            }
            Op::MaxAxis(x, axis, argmax) => {
                let xv = self.value(*x);
                let (outer, len, inner) = axis_split(xv.shape(), *axis);
                let mut out = vec![0.0; xv.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let k = argmax[o * inner + i];
                        out[(o * len + k) * inner + i] = g.data()[o * inner + i];
                    }
                }
                self.accumulate(grads, *x, like(xv, out));
            }
            Op::Broadcast(x, axis) => {
                let xv = self.value(*x);
                let outer: usize = xv.shape()[..*axis].iter().product();
                let inner: usize = xv.shape()[*axis..].iter().product();
                let n = y.shape()[*axis];
                let mut out = vec![0.0; xv.numel()];
                for o in 0..outer {
                    for k in 0..n {
                        let src = &g.data()[(o * n + k) * inner..(o * n + k + 1) * inner];
                        for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                self.accumulate(grads, *x, like(xv, out));
            }
            Op::Softmax(x, axis) => {
                let (outer, len, inner) = axis_split(y.shape(), *axis);
                let mut out = vec![0.0; y.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * len + k) * inner + i;
                        let dot: f64 = if self.fault == Some(Fault::SoftmaxBackward) {
                            0.0
                        } else {
                            (0..len).map(|k| g.data()[at(k)] * y.data()[at(k)]).sum()
                        };
                        for k in 0..len {
                            out[at(k)] = y.data()[at(k)] * (g.data()[at(k)] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, like(y, out));
            }
            Op::SquaredError(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let k = 2.0 * g.item() / va.numel() as f64;
                let da = zip(va, vb, |a, b| k * (a - b));
                self.accumulate(grads, *b, da.map(|v| -v));
                self.accumulate(grads, *a, da);
            }
            Op::CrossEntropy(z, target) => {
                let zv = self.value(*z);
                let mut p = softmax(zv, 0).expect("1-d logits").into_data();
                p[*target] -= 1.0;
                let k = g.item();
                p.iter_mut().for_each(|v| *v *= k);
                self.accumulate(grads, *z, like(zv, p));
            }
            Op::Transpose(x) => self.accumulate(grads, *x, g.transpose()),
            Op::Reshape(x) => {
                let shape = self.value(*x).shape();
                self.accumulate(grads, *x, g.reshape(shape).expect("same numel"));
            }
        }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], target: Var, g: Tensor) {
        if !self.requires_grad(target) {
            return;
        }
        match &mut grads[target.0] {
            Some(acc) => {
                for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += v;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s.remove(axis);
    if s.is_empty() {
        s.push(1);
    }
    s
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    a.zip_map(b, f).expect("shapes checked on forward")
}

fn like(t: &Tensor, data: Vec<f64>) -> Tensor {
    Tensor::new(t.shape().to_vec(), data).expect("same numel")
}
