//! Reverse-mode automatic differentiation with differentiable backward
//! passes.
//!
//! Every backward rule is written in terms of [`Var`] operations, so a
//! gradient computed with `create_graph = true` is itself part of the graph
//! and can be differentiated again. Training needs this: the sampler takes
//! gradients of the energy with respect to the trajectory, and the training
//! loss is then differentiated through those gradient steps.

use std::cell::Cell;
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::Arc;

use super::tensor::Tensor;

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|c| c.get())
}

/// Disables graph construction on this thread while alive.
pub struct NoGradGuard {
    prev: bool,
}

impl NoGradGuard {
    #[allow(clippy::new_without_default)]
    pub fn new() -> Self {
        let prev = GRAD_ENABLED.with(|c| c.replace(false));
        NoGradGuard { prev }
    }
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|c| c.set(self.prev));
    }
}

#[derive(Clone)]
enum Op {
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    SumTo(Var),
    BroadcastTo(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Exp(Var),
    Sigmoid(Var),
    PowF(Var, f64),
    Elu(Var, Arc<Vec<bool>>),
    Select(Arc<Vec<bool>>, Var, Var),
    Unfold { x: Var, kernel: usize, stride: usize, pad: usize },
    Fold { x: Var, kernel: usize, stride: usize, pad: usize },
    Gather(Var, Arc<Vec<usize>>),
    ScatterAdd(Var, Arc<Vec<usize>>),
    Narrow { x: Var, axis: usize, start: usize },
    Pad { x: Var, axis: usize, start: usize },
    Concat(Vec<Var>, usize),
}

struct Node {
    id: u64,
    value: Tensor,
    requires_grad: bool,
    op: Option<Op>,
}

/// A node of the computation graph. Cheap to clone.
#[derive(Clone)]
pub struct Var(Rc<Node>);

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}({:?}, grad={})", self.0.id, self.0.value, self.0.requires_grad)
    }
}

impl Op {
    fn parents(&self) -> Vec<&Var> {
        use Op::*;
        match self {
            Add(a, b) | Sub(a, b) | Mul(a, b) | MatMul { a, b, .. } | Select(_, a, b) => vec![a, b],
            Neg(x) | Scale(x, _) | AddScalar(x) | SumTo(x) | BroadcastTo(x) | Reshape(x)
            | Permute(x, _) | Exp(x) | Sigmoid(x) | PowF(x, _) | Elu(x, _) | Gather(x, _)
            | ScatterAdd(x, _) => vec![x],
            Unfold { x, .. } | Fold { x, .. } | Narrow { x, .. } | Pad { x, .. } => vec![x],
            Concat(xs, _) => xs.iter().collect(),
        }
    }
}

impl Var {
    fn from_op(value: Tensor, op: Op) -> Var {
        let track = grad_enabled() && op.parents().iter().any(|p| p.requires_grad());
        Var(Rc::new(Node {
            id: next_id(),
            value,
            requires_grad: track,
            op: if track { Some(op) } else { None },
        }))
    }

    /// A leaf that does not take part in differentiation.
    pub fn constant(value: Tensor) -> Var {
        Var(Rc::new(Node { id: next_id(), value, requires_grad: false, op: None }))
    }

    /// A leaf whose gradient can be requested.
    pub fn leaf(value: Tensor) -> Var {
        Var(Rc::new(Node { id: next_id(), value, requires_grad: true, op: None }))
    }

    pub fn scalar(v: f64) -> Var {
        Var::constant(Tensor::scalar(v))
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn item(&self) -> f64 {
        self.0.value.item()
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var {
        Var::constant(self.0.value.clone())
    }

    fn id(&self) -> u64 {
        self.0.id
    }

    pub fn add(&self, o: &Var) -> Var {
        Var::from_op(self.value().add(o.value()), Op::Add(self.clone(), o.clone()))
    }

    pub fn sub(&self, o: &Var) -> Var {
        Var::from_op(self.value().sub(o.value()), Op::Sub(self.clone(), o.clone()))
    }

    pub fn mul(&self, o: &Var) -> Var {
        Var::from_op(self.value().mul(o.value()), Op::Mul(self.clone(), o.clone()))
    }

    pub fn neg(&self) -> Var {
        Var::from_op(self.value().scale(-1.0), Op::Neg(self.clone()))
    }

    pub fn scale(&self, c: f64) -> Var {
        Var::from_op(self.value().scale(c), Op::Scale(self.clone(), c))
    }

    pub fn add_scalar(&self, c: f64) -> Var {
        Var::from_op(self.value().map(|v| v + c), Op::AddScalar(self.clone()))
    }

    pub fn square(&self) -> Var {
        self.mul(self)
    }

    pub fn matmul(&self, o: &Var) -> Var {
        self.matmul_t(o, false, false)
    }

    pub fn matmul_t(&self, o: &Var, ta: bool, tb: bool) -> Var {
        Var::from_op(
            self.value().matmul(o.value(), ta, tb),
            Op::MatMul { a: self.clone(), b: o.clone(), ta, tb },
        )
    }

    pub fn sum_to(&self, shape: &[usize]) -> Var {
        if self.shape() == shape {
            return self.clone();
        }
        Var::from_op(self.value().sum_to(shape), Op::SumTo(self.clone()))
    }

    pub fn sum(&self) -> Var {
        self.sum_to(&[])
    }

    pub fn mean(&self) -> Var {
        let n = self.value().len().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum over one axis, keeping it with size 1.
    pub fn sum_axis_keep(&self, axis: usize) -> Var {
        let mut shape = self.shape().to_vec();
        shape[axis] = 1;
        self.sum_to(&shape)
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Var {
        if self.shape() == shape {
            return self.clone();
        }
        Var::from_op(self.value().broadcast_to(shape), Op::BroadcastTo(self.clone()))
    }

    pub fn reshape(&self, shape: &[usize]) -> Var {
        if self.shape() == shape {
            return self.clone();
        }
        Var::from_op(self.value().reshape(shape), Op::Reshape(self.clone()))
    }

    pub fn permute(&self, perm: &[usize]) -> Var {
        Var::from_op(self.value().permute(perm), Op::Permute(self.clone(), perm.to_vec()))
    }

    pub fn exp(&self) -> Var {
        Var::from_op(self.value().map(f64::exp), Op::Exp(self.clone()))
    }

    pub fn sigmoid(&self) -> Var {
        Var::from_op(self.value().map(sigmoid), Op::Sigmoid(self.clone()))
    }

    /// `x * sigmoid(x)`.
    pub fn swish(&self) -> Var {
        self.mul(&self.sigmoid())
    }

    pub fn powf(&self, p: f64) -> Var {
        Var::from_op(self.value().map(|v| v.powf(p)), Op::PowF(self.clone(), p))
    }

    pub fn sqrt(&self) -> Var {
        self.powf(0.5)
    }

    pub fn elu(&self) -> Var {
        let positive: Vec<bool> = self.value().data().iter().map(|&v| v > 0.0).collect();
        let out = self.value().map(|v| if v > 0.0 { v } else { v.exp_m1() });
        Var::from_op(out, Op::Elu(self.clone(), Arc::new(positive)))
    }

    /// `mask ? a : b` elementwise; the mask is a constant.
    pub fn select(mask: Arc<Vec<bool>>, a: &Var, b: &Var) -> Var {
        let value = Tensor::select(&mask, a.value(), b.value());
        Var::from_op(value, Op::Select(mask, a.clone(), b.clone()))
    }

    pub fn unfold(&self, kernel: usize, stride: usize, pad: usize) -> Var {
        Var::from_op(
            self.value().unfold(kernel, stride, pad),
            Op::Unfold { x: self.clone(), kernel, stride, pad },
        )
    }

    fn fold(&self, t: usize, kernel: usize, stride: usize, pad: usize) -> Var {
        Var::from_op(
            self.value().fold(t, kernel, stride, pad),
            Op::Fold { x: self.clone(), kernel, stride, pad },
        )
    }

    pub fn gather_rows(&self, idx: Arc<Vec<usize>>) -> Var {
        Var::from_op(self.value().gather_rows(&idx), Op::Gather(self.clone(), idx))
    }

    pub fn scatter_add_rows(&self, idx: Arc<Vec<usize>>, rows: usize) -> Var {
        Var::from_op(self.value().scatter_add_rows(&idx, rows), Op::ScatterAdd(self.clone(), idx))
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Var {
        if start == 0 && len == self.shape()[axis] {
            return self.clone();
        }
        Var::from_op(self.value().narrow(axis, start, len), Op::Narrow { x: self.clone(), axis, start })
    }

    fn pad_axis(&self, axis: usize, start: usize, total: usize) -> Var {
        Var::from_op(self.value().pad_axis(axis, start, total), Op::Pad { x: self.clone(), axis, start })
    }

    pub fn concat(parts: &[Var], axis: usize) -> Var {
        if parts.len() == 1 {
            return parts[0].clone();
        }
        let values: Vec<&Tensor> = parts.iter().map(|p| p.value()).collect();
        Var::from_op(Tensor::concat(&values, axis), Op::Concat(parts.to_vec(), axis))
    }

    /// Gradient contributions to each parent that needs one.
    fn backward(&self, g: &Var, needs: &dyn Fn(&Var) -> bool) -> Vec<(Var, Var)> {
        let Some(op) = &self.0.op else { return vec![] };
        let mut out = Vec::with_capacity(2);
        let mut push = |p: &Var, f: &dyn Fn() -> Var| {
            if needs(p) {
                out.push((p.clone(), f()));
            }
        };
        match op {
            Op::Add(a, b) => {
                push(a, &|| g.sum_to(a.shape()));
                push(b, &|| g.sum_to(b.shape()));
            }
            Op::Sub(a, b) => {
                push(a, &|| g.sum_to(a.shape()));
                push(b, &|| g.neg().sum_to(b.shape()));
            }
            Op::Mul(a, b) => {
                push(a, &|| g.mul(b).sum_to(a.shape()));
                push(b, &|| g.mul(a).sum_to(b.shape()));
            }
            Op::Neg(x) => push(x, &|| g.neg()),
            Op::Scale(x, c) => push(x, &|| g.scale(*c)),
            Op::AddScalar(x) => push(x, &|| g.clone()),
            Op::MatMul { a, b, ta, tb } => {
                push(a, &|| if *ta { b.matmul_t(g, *tb, true) } else { g.matmul_t(b, false, !*tb) });
                push(b, &|| if *tb { g.matmul_t(a, true, *ta) } else { a.matmul_t(g, !*ta, false) });
            }
            Op::SumTo(x) => push(x, &|| g.broadcast_to(x.shape())),
            Op::BroadcastTo(x) => push(x, &|| g.sum_to(x.shape())),
            Op::Reshape(x) => push(x, &|| g.reshape(x.shape())),
            Op::Permute(x, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                push(x, &|| g.permute(&inv))
            }
            Op::Exp(x) => push(x, &|| g.mul(self)),
            Op::Sigmoid(x) => push(x, &|| g.mul(&self.mul(&self.neg().add_scalar(1.0)))),
            Op::PowF(x, p) => push(x, &|| g.mul(&x.powf(p - 1.0)).scale(*p)),
            Op::Elu(x, positive) => push(x, &|| {
                // d/dx elu = 1 on the positive side, elu(x) + 1 elsewhere
                let ones = Var::constant(Tensor::full(x.shape(), 1.0));
                let slope = Var::select(positive.clone(), &ones, &self.add_scalar(1.0));
                g.mul(&slope)
            }),
            Op::Select(mask, a, b) => {
                let zeros = || Var::constant(Tensor::zeros(g.shape()));
                push(a, &|| Var::select(mask.clone(), g, &zeros()));
                push(b, &|| Var::select(mask.clone(), &zeros(), g));
            }
            Op::Unfold { x, kernel, stride, pad } => {
                push(x, &|| g.fold(x.shape()[1], *kernel, *stride, *pad))
            }
            Op::Fold { x, kernel, stride, pad } => push(x, &|| g.unfold(*kernel, *stride, *pad)),
            Op::Gather(x, idx) => push(x, &|| g.scatter_add_rows(idx.clone(), x.shape()[0])),
            Op::ScatterAdd(x, idx) => push(x, &|| g.gather_rows(idx.clone())),
            Op::Narrow { x, axis, start } => push(x, &|| g.pad_axis(*axis, *start, x.shape()[*axis])),
            Op::Pad { x, axis, start } => push(x, &|| g.narrow(*axis, *start, x.shape()[*axis])),
            Op::Concat(xs, axis) => {
                let mut offset = 0;
                for x in xs {
                    let len = x.shape()[*axis];
                    push(x, &|| g.narrow(*axis, offset, len));
                    offset += len;
                }
            }
        }
        out
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Gradients of the scalar `output` with respect to each of `wrt`.
///
/// With `create_graph` the returned gradients are themselves differentiable.
/// Inputs that `output` does not depend on get zero gradients.
pub fn grad(output: &Var, wrt: &[&Var], create_graph: bool) -> Vec<Var> {
    assert_eq!(output.value().len(), 1, "grad() needs a scalar output, got {:?}", output.shape());
    let targets: HashMap<u64, usize> = wrt.iter().enumerate().map(|(i, v)| (v.id(), i)).collect();

    // Post-order DFS restricted to nodes that lie on a path to some target.
    let mut relevant: HashMap<u64, bool> = HashMap::new();
    let mut visited = std::collections::HashSet::new();
    let mut order: Vec<Var> = Vec::new();
    if output.requires_grad() {
        let mut stack: Vec<(Var, bool)> = vec![(output.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                let mut rel = targets.contains_key(&node.id());
                if let Some(op) = &node.0.op {
                    for p in op.parents() {
                        if relevant.get(&p.id()).copied().unwrap_or(false) {
                            rel = true;
                        }
                    }
                }
                relevant.insert(node.id(), rel);
                if rel {
                    order.push(node);
                }
                continue;
            }
            if !visited.insert(node.id()) {
                continue;
            }
            stack.push((node.clone(), true));
            if let Some(op) = &node.0.op {
                for p in op.parents() {
                    if p.requires_grad() && !visited.contains(&p.id()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
    }

    let _guard = (!create_graph).then(NoGradGuard::new);
    let mut grads: HashMap<u64, Var> = HashMap::new();
    grads.insert(output.id(), Var::constant(Tensor::full(output.shape(), 1.0)));
    let mut results: Vec<Option<Var>> = vec![None; wrt.len()];
    let needs = |p: &Var| p.requires_grad() && relevant.get(&p.id()).copied().unwrap_or(false);

    for node in order.iter().rev() {
        let Some(g) = grads.remove(&node.id()) else { continue };
        if let Some(&i) = targets.get(&node.id()) {
            results[i] = Some(g.clone());
        }
        for (parent, pg) in node.backward(&g, &needs) {
            let acc = match grads.remove(&parent.id()) {
                Some(prev) => prev.add(&pg),
                None => pg,
            };
            grads.insert(parent.id(), acc);
        }
    }
    drop(_guard);
    results
        .into_iter()
        .zip(wrt)
        .map(|(g, w)| g.unwrap_or_else(|| Var::constant(Tensor::zeros(w.shape()))))
        .collect()
}
