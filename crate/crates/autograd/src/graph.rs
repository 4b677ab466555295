//! Reverse-mode tape.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! Nodes that do not (transitively) depend on a trainable leaf carry no
//! gradient and are skipped by [`Graph::backward`], which is how frozen
//! parameter groups are expressed: register them with [`Graph::constant`].

use std::cell::{Ref, RefCell};

use crate::conv;
use crate::tensor::Tensor;

/// A differentiable operation defined outside this crate.
///
/// `forward` may stash intermediate results in `self` for use in `backward`.
pub trait Function {
    fn forward(&mut self, inputs: &[&Tensor]) -> Tensor;

    /// Returns one gradient per input; entries whose `needs` flag is false may be `None`.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>>;
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    ConvTranspose2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    WeightedSum(Vec<(Var, f64)>),
    Select(Var, usize),
    Reshape(Var),
    Custom(Box<dyn Function>, Vec<Var>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad });
        Var(nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// A trainable leaf.
    pub fn param(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    /// A constant copy of `v`; gradient stops here.
    pub fn detach(&self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn unary(&self, x: Var, op: Op, f: impl FnOnce(&Tensor) -> Tensor) -> Var {
        let value = f(&self.value(x));
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    fn binary(&self, a: Var, b: Var, op: Op, f: impl FnOnce(&Tensor, &Tensor) -> Tensor) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            f(&nodes[a.0].value, &nodes[b.0].value)
        };
        let rg = self.rg(a) || self.rg(b);
        self.push(value, op, rg)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add(a, b), |x, y| x.zip_map(y, |p, q| p + q))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Sub(a, b), |x, y| x.zip_map(y, |p, q| p - q))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul(a, b), |x, y| x.zip_map(y, |p, q| p * q))
    }

    pub fn scale(&self, x: Var, alpha: f64) -> Var {
        self.unary(x, Op::Scale(x, alpha), |t| t.scale(alpha))
    }

    pub fn relu(&self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |t| t.map(|v| v.max(0.0)))
    }

    pub fn conv2d(&self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            conv::conv2d(&nodes[x.0].value, &nodes[w.0].value, b.map(|b| &nodes[b.0].value), stride, pad)
        };
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(value, Op::Conv2d { x, w, b, stride, pad }, rg)
    }

    pub fn conv_transpose2d(&self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            conv::conv_transpose2d(&nodes[x.0].value, &nodes[w.0].value, b.map(|b| &nodes[b.0].value), stride, pad)
        };
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(value, Op::ConvTranspose2d { x, w, b, stride, pad }, rg)
    }

    pub fn sum(&self, x: Var) -> Var {
        self.unary(x, Op::Sum(x), |t| Tensor::scalar(t.sum()))
    }

    pub fn mean(&self, x: Var) -> Var {
        self.unary(x, Op::Mean(x), |t| Tensor::scalar(t.sum() / t.len() as f64))
    }

    /// Mean squared difference over every element.
    pub fn mse(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mse(a, b), |x, y| {
            assert_eq!(x.shape(), y.shape(), "mse: shape mismatch");
            let s: f64 = x.data().iter().zip(y.data()).map(|(p, q)| (p - q) * (p - q)).sum();
            Tensor::scalar(s / x.len() as f64)
        })
    }

    /// `sum_i w_i * x_i` over equally shaped nodes, accumulated left to right.
    pub fn weighted_sum(&self, terms: &[(Var, f64)]) -> Var {
        assert!(!terms.is_empty(), "weighted_sum of nothing");
        let value = {
            let nodes = self.nodes.borrow();
            let first = &nodes[terms[0].0 .0].value;
            let mut acc = first.scale(terms[0].1);
            for &(v, w) in &terms[1..] {
                acc = acc.zip_map(&nodes[v.0].value, |a, b| a + w * b);
            }
            acc
        };
        let rg = terms.iter().any(|&(v, _)| self.rg(v));
        self.push(value, Op::WeightedSum(terms.to_vec()), rg)
    }

    /// Element `index` of the flattened node, as a scalar.
    pub fn select(&self, x: Var, index: usize) -> Var {
        self.unary(x, Op::Select(x, index), |t| Tensor::scalar(t.data()[index]))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Var {
        self.unary(x, Op::Reshape(x), |t| t.clone().reshape(shape.to_vec()))
    }

    /// Records a user-defined [`Function`].
    pub fn apply<F: Function + 'static>(&self, mut f: F, inputs: &[Var]) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let vals: Vec<&Tensor> = inputs.iter().map(|v| &nodes[v.0].value).collect();
            f.forward(&vals)
        };
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(value, Op::Custom(Box::new(f), inputs.to_vec()), rg)
    }

    /// Back-propagates from `root` (any shape; seeded with ones).
    pub fn backward(&self, root: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        if !nodes[root.0].requires_grad {
            return Gradients { grads };
        }
        grads[root.0] = Some(Tensor::full(nodes[root.0].value.shape().to_vec(), 1.0));

        fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(t) => t.axpy(1.0, &g),
                slot => *slot = Some(g),
            }
        }

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            let need = |v: Var| nodes[v.0].requires_grad;
            let val = |v: Var| &nodes[v.0].value;
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    if need(*a) {
                        acc(&mut grads, *a, g.clone());
                    }
                    if need(*b) {
                        acc(&mut grads, *b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if need(*a) {
                        acc(&mut grads, *a, g.clone());
                    }
                    if need(*b) {
                        acc(&mut grads, *b, g.scale(-1.0));
                    }
                }
                Op::Mul(a, b) => {
                    if need(*a) {
                        acc(&mut grads, *a, g.zip_map(val(*b), |p, q| p * q));
                    }
                    if need(*b) {
                        acc(&mut grads, *b, g.zip_map(val(*a), |p, q| p * q));
                    }
                }
                Op::Scale(x, alpha) => acc(&mut grads, *x, g.scale(*alpha)),
                Op::Relu(x) => {
                    let dx = g.zip_map(val(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 });
                    acc(&mut grads, *x, dx);
                }
                Op::Conv2d { x, w, b, stride, pad } => {
                    let want = [need(*x), need(*w), b.is_some_and(need)];
                    let (dx, dw, db) = conv::conv2d_backward(val(*x), val(*w), &g, *stride, *pad, want);
                    if let Some(dx) = dx {
                        acc(&mut grads, *x, dx);
                    }
                    if let Some(dw) = dw {
                        acc(&mut grads, *w, dw);
                    }
                    if let (Some(b), Some(db)) = (b, db) {
                        acc(&mut grads, *b, db);
                    }
                }
                Op::ConvTranspose2d { x, w, b, stride, pad } => {
                    let want = [need(*x), need(*w), b.is_some_and(need)];
                    let (dx, dw, db) = conv::conv_transpose2d_backward(val(*x), val(*w), &g, *stride, *pad, want);
                    if let Some(dx) = dx {
                        acc(&mut grads, *x, dx);
                    }
                    if let Some(dw) = dw {
                        acc(&mut grads, *w, dw);
                    }
                    if let (Some(b), Some(db)) = (b, db) {
                        acc(&mut grads, *b, db);
                    }
                }
                Op::Sum(x) => {
                    let gx = Tensor::full(val(*x).shape().to_vec(), g.item());
                    acc(&mut grads, *x, gx);
                }
                Op::Mean(x) => {
                    let n = val(*x).len() as f64;
                    let gx = Tensor::full(val(*x).shape().to_vec(), g.item() / n);
                    acc(&mut grads, *x, gx);
                }
                Op::Mse(a, b) => {
                    let scale = 2.0 * g.item() / val(*a).len() as f64;
                    let diff = val(*a).zip_map(val(*b), |p, q| scale * (p - q));
                    if need(*b) {
                        acc(&mut grads, *b, diff.scale(-1.0));
                    }
                    if need(*a) {
                        acc(&mut grads, *a, diff);
                    }
                }
                Op::WeightedSum(terms) => {
                    for &(v, w) in terms {
                        if need(v) {
                            acc(&mut grads, v, g.scale(w));
                        }
                    }
                }
                Op::Select(x, index) => {
                    let mut gx = Tensor::zeros(val(*x).shape().to_vec());
                    gx.data_mut()[*index] = g.item();
                    acc(&mut grads, *x, gx);
                }
                Op::Reshape(x) => {
                    let gx = g.reshape(val(*x).shape().to_vec());
                    acc(&mut grads, *x, gx);
                }
                Op::Custom(f, inputs) => {
                    let vals: Vec<&Tensor> = inputs.iter().map(|&v| val(v)).collect();
                    let needs: Vec<bool> = inputs.iter().map(|&v| need(v)).collect();
                    let out = f.backward(&vals, &node.value, &g, &needs);
                    for ((&v, gv), n) in inputs.iter().zip(out).zip(needs) {
                        if let (true, Some(gv)) = (n, gv) {
                            assert_eq!(gv.shape(), val(v).shape(), "custom op returned a misshapen gradient");
                            acc(&mut grads, v, gv);
                        }
                    }
                }
            }
        }
        Gradients { grads }
    }
}
