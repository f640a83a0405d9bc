//! Dynamic reverse-mode tape.
//!
//! A [`Tape`] is rebuilt for every forward pass. Nodes are appended in
//! evaluation order, so the node list is already a topological order and the
//! backward sweep is a single reverse scan.

use std::borrow::Cow;
use std::sync::atomic::{AtomicUsize, Ordering};

use super::tensor::{matmul, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicUsize = AtomicUsize::new(1);

/// Handle to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: usize,
    idx: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Act(Var),
    Sigmoid(Var),
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    SoftmaxCe(Var, Vec<usize>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Act(..) => "activation",
            Op::Sigmoid(..) => "sigmoid",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Mse(..) => "squared_error",
            Op::SoftmaxCe(..) => "softmax_cross_entropy",
        }
    }
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Smooth monotone activation: `softplus(x) - ln 2`, zero at the origin.
pub fn activation(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p() - std::f64::consts::LN_2
}

/// Derivative of [`activation`].
pub fn activation_grad(x: f64) -> f64 {
    sigmoid(x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub struct Tape<'a> {
    id: usize,
    nodes: Vec<Node<'a>>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Borrowed trainable leaf; gradients are reported for it.
    pub fn param(&mut self, t: &'a Tensor) -> Var {
        self.push_leaf(Cow::Borrowed(t), true)
    }

    /// Owned leaf that does not receive gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_leaf(Cow::Owned(t), false)
    }

    /// Owned leaf that does receive gradients (used by gradient checks).
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push_leaf(Cow::Owned(t), true)
    }

    fn push_leaf(&mut self, value: Cow<'a, Tensor>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::Invalid("node is not on this tape".into()));
        }
        Ok(v.idx)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "node is not on this tape");
        &self.nodes[v.idx].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op.name().to_string()));
        }
        let needs_grad = match &op {
            Op::Leaf => false,
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) | Op::Mse(a, b) => {
                self.nodes[a.idx].needs_grad || self.nodes[b.idx].needs_grad
            }
            Op::Scale(a, _)
            | Op::Act(a)
            | Op::Sigmoid(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SoftmaxCe(a, _) => self.nodes[a.idx].needs_grad,
        };
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            needs_grad,
        });
        Ok(Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let v = matmul(&self.nodes[ia].value, &self.nodes[ib].value)?;
        self.push(v, Op::MatMul(a, b))
    }

    fn binary(&self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (ta, tb) = (&*self.nodes[ia].value, &*self.nodes[ib].value);
        if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(ta.shape().to_vec(), data)
        } else if tb.len() == 1 {
            let y = tb.data()[0];
            Ok(ta.map(|x| f(x, y)))
        } else if ta.len() == 1 {
            let x = ta.data()[0];
            Ok(tb.map(|y| f(x, y)))
        } else {
            Err(Error::shape(op, format!("{:?} vs {:?}", ta.shape(), tb.shape())))
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "add", |x, y| x + y)?;
        self.push(v, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "mul", |x, y| x * y)?;
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let ia = self.check(a)?;
        let v = self.nodes[ia].value.map(|x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn activation(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let v = self.nodes[ia].value.map(activation);
        self.push(v, Op::Act(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let v = self.nodes[ia].value.map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let s = self.nodes[ia].value.data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let t = &self.nodes[ia].value;
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    /// Mean of squared differences over every element.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (ip, it) = (self.check(pred)?, self.check(target)?);
        let (p, t) = (&*self.nodes[ip].value, &*self.nodes[it].value);
        if p.shape() != t.shape() {
            return Err(Error::shape("squared_error", format!("{:?} vs {:?}", p.shape(), t.shape())));
        }
        let s: f64 = p.data().iter().zip(t.data()).map(|(a, b)| (a - b) * (a - b)).sum();
        self.push(Tensor::scalar(s / p.len() as f64), Op::Mse(pred, target))
    }

    /// Row-wise softmax followed by mean negative log-likelihood of `targets`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let il = self.check(logits)?;
        let l = &*self.nodes[il].value;
        if l.shape().len() != 2 || l.rows() != targets.len() {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("logits {:?} with {} targets", l.shape(), targets.len()),
            ));
        }
        let k = l.cols();
        let mut total = 0.0;
        for (r, &y) in targets.iter().enumerate() {
            if y >= k {
                return Err(Error::OutOfRange(format!("class {y} with {k} logits")));
            }
            let row = l.row(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += lse - row[y];
        }
        let v = Tensor::scalar(total / targets.len() as f64);
        self.push(v, Op::SoftmaxCe(logits, targets.to_vec()))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let il = self.check(loss)?;
        if self.nodes[il].value.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.nodes[il].value.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[il] = Some(Tensor::new(self.nodes[il].value.shape().to_vec(), vec![1.0])?);

        for i in (0..=il).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (&*self.nodes[a.idx].value, &*self.nodes[b.idx].value);
                    if self.nodes[a.idx].needs_grad {
                        accumulate(&mut grads, a.idx, matmul(&g, &tb.transpose())?);
                    }
                    if self.nodes[b.idx].needs_grad {
                        accumulate(&mut grads, b.idx, matmul(&ta.transpose(), &g)?);
                    }
                }
                Op::Add(a, b) => {
                    for v in [a, b] {
                        if self.nodes[v.idx].needs_grad {
                            let shape = self.nodes[v.idx].value.shape().to_vec();
                            accumulate(&mut grads, v.idx, reduce_to(&g, &shape)?);
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (&*self.nodes[a.idx].value, &*self.nodes[b.idx].value);
                    for (v, other) in [(a, tb), (b, ta)] {
                        if self.nodes[v.idx].needs_grad {
                            let full = if other.len() == 1 {
                                let o = other.data()[0];
                                g.map(|x| x * o)
                            } else {
                                zip_with(&g, other, |x, y| x * y)?
                            };
                            let shape = self.nodes[v.idx].value.shape().to_vec();
                            accumulate(&mut grads, v.idx, reduce_to(&full, &shape)?);
                        }
                    }
                }
                Op::Scale(a, s) => accumulate(&mut grads, a.idx, g.map(|x| x * s)),
                Op::Act(a) => {
                    let x = &*self.nodes[a.idx].value;
                    accumulate(&mut grads, a.idx, zip_with(&g, x, |gv, xv| gv * activation_grad(xv))?);
                }
                Op::Sigmoid(a) => {
                    let y = &*node.value;
                    accumulate(&mut grads, a.idx, zip_with(&g, y, |gv, yv| gv * yv * (1.0 - yv))?);
                }
                Op::Sum(a) => {
                    let g0 = g.data()[0];
                    let shape = self.nodes[a.idx].value.shape().to_vec();
                    let n = shape.iter().product();
                    accumulate(&mut grads, a.idx, Tensor::new(shape, vec![g0; n])?);
                }
                Op::Mean(a) => {
                    let shape = self.nodes[a.idx].value.shape().to_vec();
                    let n: usize = shape.iter().product();
                    let g0 = g.data()[0] / n as f64;
                    accumulate(&mut grads, a.idx, Tensor::new(shape, vec![g0; n])?);
                }
                Op::Mse(p, t) => {
                    let (tp, tt) = (&*self.nodes[p.idx].value, &*self.nodes[t.idx].value);
                    let c = 2.0 * g.data()[0] / tp.len() as f64;
                    let d = zip_with(tp, tt, |a, b| c * (a - b))?;
                    if self.nodes[t.idx].needs_grad {
                        accumulate(&mut grads, t.idx, d.map(|v| -v));
                    }
                    if self.nodes[p.idx].needs_grad {
                        accumulate(&mut grads, p.idx, d);
                    }
                }
                Op::SoftmaxCe(l, targets) => {
                    let tl = &*self.nodes[l.idx].value;
                    let k = tl.cols();
                    let c = g.data()[0] / targets.len() as f64;
                    let mut out = vec![0.0; tl.len()];
                    for (r, &y) in targets.iter().enumerate() {
                        let row = tl.row(r);
                        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
                        for j in 0..k {
                            let p = (row[j] - m).exp() / z;
                            out[r * k + j] = c * (p - if j == y { 1.0 } else { 0.0 });
                        }
                    }
                    accumulate(&mut grads, l.idx, Tensor::new(tl.shape().to_vec(), out)?);
                }
            }
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if !g.is_finite() {
                    return Err(Error::NonFinite(format!("gradient of {}", self.nodes[i].op.name())));
                }
            }
        }
        Ok(Gradients { tape: self.id, grads })
    }
}

fn zip_with(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data)
}

fn reduce_to(g: &Tensor, shape: &[usize]) -> Result<Tensor> {
    if g.shape() == shape {
        Ok(g.clone())
    } else {
        Tensor::new(shape.to_vec(), vec![g.data().iter().sum()])
    }
}

fn accumulate(grads: &mut [Option<Tensor>], idx: usize, g: Tensor) {
    match &mut grads[idx] {
        Some(existing) => {
            for (e, v) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Gradients of one backward sweep, looked up by leaf handle.
pub struct Gradients {
    tape: usize,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a leaf; `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.idx).and_then(Option::as_ref)
    }

    /// Gradient for a leaf, or zeros of the given shape.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}
