use std::cell::{Ref, RefCell};
use std::fmt;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::special;

use super::tensor::Tensor;

type NodeId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryKind {
    fn name(self) -> &'static str {
        match self {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        }
    }
}

enum Op<T> {
    Leaf,
    Constant,
    /// Elementwise unary map with its local derivative saved at record time.
    Unary { name: &'static str, a: NodeId, deriv: Vec<T> },
    Binary { kind: BinaryKind, a: NodeId, b: NodeId },
    MatMul { a: NodeId, b: NodeId },
    AddColBias { m: NodeId, b: NodeId },
    SumAll { a: NodeId },
    SumRows { a: NodeId },
    StopGradient,
    /// Shifted soft-threshold differentiated by its subgradient.
    SoftThreshold { s: NodeId, lambda: NodeId, mu: NodeId },
    /// Shifted soft-threshold with identity gradient in `s`.
    StraightThrough { s: NodeId, lambda: NodeId, mu: NodeId },
    /// Hard 0/1 gate whose backward pass uses the logistic sigmoid slope.
    StGate { v: NodeId },
    GammaSample { alpha: NodeId, beta: NodeId, dz_dalpha: Vec<T> },
    PickPerColumn { inputs: Vec<NodeId>, choice: Vec<usize> },
    MeanOf { inputs: Vec<NodeId> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Unary { name, .. } => name,
            Op::Binary { kind, .. } => kind.name(),
            Op::MatMul { .. } => "matmul",
            Op::AddColBias { .. } => "add_col_bias",
            Op::SumAll { .. } => "sum",
            Op::SumRows { .. } => "sum_rows",
            Op::StopGradient => "stop_gradient",
            Op::SoftThreshold { .. } => "soft_threshold",
            Op::StraightThrough { .. } => "st_threshold",
            Op::StGate { .. } => "st_gate",
            Op::GammaSample { .. } => "gamma_sample",
            Op::PickPerColumn { .. } => "pick_per_column",
            Op::MeanOf { .. } => "mean_of",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Append-only define-by-run gradient graph.
///
/// Nodes are recorded in evaluation order, so reverse append order is a valid
/// reverse topological order. Build one graph per batch and drop it.
pub struct Graph<T> {
    nodes: RefCell<Vec<Node<T>>>,
    check_finite: bool,
    replay: RefCell<Replay<T>>,
}

/// Arguments of every stop-gradient site of one graph, in evaluation order.
///
/// Replaying them on a fresh graph evaluates the surrogate objective whose
/// exact gradient the straight-through estimators return: each `sg[v]` stays
/// at its recorded value while everything else moves. Gamma samples keep
/// their CDF level, encoded as `P` when positive and `-Q` when negative.
#[derive(Clone, Debug, PartialEq)]
pub struct Frozen<T: Scalar> {
    values: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for Frozen<T> {
    fn default() -> Self {
        Frozen { values: Vec::new() }
    }
}

enum Replay<T> {
    Off,
    Record(Vec<Tensor<T>>),
    Play(Vec<Tensor<T>>, usize),
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    /// Graph with non-finite checks after every forward op.
    pub fn new() -> Self {
        Graph { nodes: RefCell::new(Vec::new()), check_finite: true, replay: RefCell::new(Replay::Off) }
    }

    /// Checked graph that records its stop-gradient arguments.
    pub fn recording() -> Self {
        Graph { replay: RefCell::new(Replay::Record(Vec::new())), ..Self::new() }
    }

    /// Checked graph that replays `frozen` at its stop-gradient sites.
    pub fn replaying(frozen: Frozen<T>) -> Self {
        Graph { replay: RefCell::new(Replay::Play(frozen.values, 0)), ..Self::new() }
    }

    /// Values captured so far by a recording graph.
    pub fn frozen(&self) -> Frozen<T> {
        match &*self.replay.borrow() {
            Replay::Record(v) => Frozen { values: v.clone() },
            _ => Frozen::default(),
        }
    }

    /// The value to hold at a stop-gradient site, and whether it was replayed.
    pub(crate) fn freeze(&self, current: impl FnOnce() -> Tensor<T>) -> Result<(Tensor<T>, bool)> {
        match &mut *self.replay.borrow_mut() {
            Replay::Off => Ok((current(), false)),
            Replay::Record(v) => {
                let t = current();
                v.push(t.clone());
                Ok((t, false))
            }
            Replay::Play(v, at) => {
                let t = v.get(*at).cloned().ok_or_else(|| Error::invalid("replay ran past the recorded stop-gradient sites"))?;
                *at += 1;
                Ok((t, true))
            }
        }
    }

    /// Graph that skips per-op finiteness checks. Backward still checks.
    pub fn unchecked() -> Self {
        Graph { check_finite: false, ..Self::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Trainable leaf; gradients are reported for it.
    pub fn param(&self, t: Tensor<T>) -> Var<'_, T> {
        self.push_raw(t, Op::Leaf, true)
    }

    pub fn constant(&self, t: Tensor<T>) -> Var<'_, T> {
        self.push_raw(t, Op::Constant, false)
    }

    pub fn scalar(&self, v: T) -> Var<'_, T> {
        self.constant(Tensor::scalar(v))
    }

    fn push_raw(&self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, needs_grad });
        Var { g: self, id: nodes.len() - 1 }
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, parents: &[NodeId]) -> Result<Var<'_, T>> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite { op: op.name().to_string() });
        }
        let needs_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|&p| nodes[p].needs_grad)
        };
        Ok(self.push_raw(value, op, needs_grad))
    }

    fn value(&self, id: NodeId) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    fn shape_of(&self, id: NodeId) -> Vec<usize> {
        self.nodes.borrow()[id].value.shape().to_vec()
    }

    fn unary(&self, a: NodeId, name: &'static str, f: impl Fn(T) -> (T, T)) -> Result<Var<'_, T>> {
        let (value, deriv) = {
            let av = self.value(a);
            let mut out = Vec::with_capacity(av.numel());
            let mut der = Vec::with_capacity(av.numel());
            for &x in av.data() {
                let (y, d) = f(x);
                out.push(y);
                der.push(d);
            }
            (Tensor::new(av.shape().to_vec(), out)?, der)
        };
        self.push(value, Op::Unary { name, a, deriv }, &[a])
    }

    fn binary(&self, kind: BinaryKind, a: NodeId, b: NodeId) -> Result<Var<'_, T>> {
        let value = {
            let (av, bv) = (self.value(a), self.value(b));
            let f = |x: T, y: T| match kind {
                BinaryKind::Add => x + y,
                BinaryKind::Sub => x - y,
                BinaryKind::Mul => x * y,
                BinaryKind::Div => x / y,
            };
            if av.shape() == bv.shape() {
                av.zip_map(&bv, f)?
            } else if bv.is_single() {
                let y = bv.item();
                av.map(|x| f(x, y))
            } else if av.is_single() {
                let x = av.item();
                bv.map(|y| f(x, y))
            } else {
                return Err(Error::shape(kind.name(), format!("{:?} vs {:?}", av.shape(), bv.shape())));
            }
        };
        self.push(value, Op::Binary { kind, a, b }, &[a, b])
    }

    /// Reverse-mode gradients of a single-element `loss` with respect to
    /// every node that needs them. Deterministic for a given graph.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if !root.value.is_single() {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![T::one()]);

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let name = node.op.name();
            let send = |target: NodeId, contrib: Vec<T>, grads: &mut Vec<Option<Vec<T>>>| -> Result<()> {
                if !nodes[target].needs_grad {
                    return Ok(());
                }
                if contrib.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite { op: format!("backward of {name} (node {id})") });
                }
                match &mut grads[target] {
                    Some(acc) => {
                        for (a, c) in acc.iter_mut().zip(contrib) {
                            *a += c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
                Ok(())
            };
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                }
                Op::Constant | Op::StopGradient => {}
                Op::Unary { a, deriv, .. } => {
                    let c = g.iter().zip(deriv).map(|(&g, &d)| g * d).collect();
                    send(*a, c, &mut grads)?;
                }
                Op::Binary { kind, a, b } => {
                    let av = &nodes[*a].value;
                    let bv = &nodes[*b].value;
                    let n = g.len();
                    let ai = |i: usize| if av.numel() == n { av.data()[i] } else { av.data()[0] };
                    let bi = |i: usize| if bv.numel() == n { bv.data()[i] } else { bv.data()[0] };
                    let (ga, gb): (Vec<T>, Vec<T>) = match kind {
                        BinaryKind::Add => (g.clone(), g.clone()),
                        BinaryKind::Sub => (g.clone(), g.iter().map(|&v| -v).collect()),
                        BinaryKind::Mul => (
                            (0..n).map(|i| g[i] * bi(i)).collect(),
                            (0..n).map(|i| g[i] * ai(i)).collect(),
                        ),
                        BinaryKind::Div => (
                            (0..n).map(|i| g[i] / bi(i)).collect(),
                            (0..n).map(|i| -g[i] * ai(i) / (bi(i) * bi(i))).collect(),
                        ),
                    };
                    send(*a, reduce_broadcast(ga, av.numel()), &mut grads)?;
                    send(*b, reduce_broadcast(gb, bv.numel()), &mut grads)?;
                }
                Op::MatMul { a, b } => {
                    let av = &nodes[*a].value;
                    let bv = &nodes[*b].value;
                    let (m, k) = (av.rows(), av.cols());
                    let n = bv.numel() / k;
                    if nodes[*a].needs_grad {
                        // dA = G * B^T
                        let mut ga = vec![T::zero(); m * k];
                        T::gemm(m, n, k, T::one(), &g, n as isize, 1, bv.data(), 1, n as isize, T::zero(), &mut ga, k as isize, 1);
                        send(*a, ga, &mut grads)?;
                    }
                    if nodes[*b].needs_grad {
                        // dB = A^T * G
                        let mut gb = vec![T::zero(); k * n];
                        T::gemm(k, m, n, T::one(), av.data(), 1, k as isize, &g, n as isize, 1, T::zero(), &mut gb, n as isize, 1);
                        send(*b, gb, &mut grads)?;
                    }
                }
                Op::AddColBias { m, b } => {
                    let cols = nodes[*m].value.cols();
                    let gb = g.chunks(cols).map(|row| row.iter().fold(T::zero(), |s, &v| s + v)).collect();
                    send(*b, gb, &mut grads)?;
                    send(*m, g, &mut grads)?;
                }
                Op::SumAll { a } => {
                    let n = nodes[*a].value.numel();
                    send(*a, vec![g[0]; n], &mut grads)?;
                }
                Op::SumRows { a } => {
                    let rows = nodes[*a].value.rows();
                    let mut ga = Vec::with_capacity(rows * g.len());
                    for _ in 0..rows {
                        ga.extend_from_slice(&g);
                    }
                    send(*a, ga, &mut grads)?;
                }
                Op::SoftThreshold { s, lambda, mu } => {
                    let sv = &nodes[*s].value;
                    let lv = &nodes[*lambda].value;
                    let mv = &nodes[*mu].value;
                    let n = g.len();
                    let mut gs = vec![T::zero(); n];
                    let mut gl = vec![T::zero(); n];
                    for i in 0..n {
                        let d = sv.data()[i] - bcast(mv, i);
                        if d.abs() > bcast(lv, i) {
                            gs[i] = g[i];
                            gl[i] = -g[i] * d.signum();
                        }
                    }
                    send(*s, gs, &mut grads)?;
                    send(*lambda, reduce_broadcast(gl, lv.numel()), &mut grads)?;
                    // Live entries equal s - lambda*sign(s - mu): no mu dependence.
                }
                Op::StraightThrough { s, lambda, mu } => {
                    if nodes[*lambda].needs_grad {
                        let sv = &nodes[*s].value;
                        let lv = &nodes[*lambda].value;
                        let mv = &nodes[*mu].value;
                        let gl: Vec<T> = (0..g.len())
                            .map(|i| {
                                let d = sv.data()[i] - bcast(mv, i);
                                if d.abs() > bcast(lv, i) {
                                    -g[i] * d.signum()
                                } else {
                                    T::zero()
                                }
                            })
                            .collect();
                        send(*lambda, reduce_broadcast(gl, lv.numel()), &mut grads)?;
                    }
                    send(*s, g, &mut grads)?;
                }
                Op::StGate { v } => {
                    let vv = &nodes[*v].value;
                    let c = g
                        .iter()
                        .zip(vv.data())
                        .map(|(&g, &x)| {
                            let p = sigmoid(x);
                            g * p * (T::one() - p)
                        })
                        .collect();
                    send(*v, c, &mut grads)?;
                }
                Op::GammaSample { alpha, beta, dz_dalpha } => {
                    let z = &node.value;
                    let bv = &nodes[*beta].value;
                    let ga = g.iter().zip(dz_dalpha).map(|(&g, &d)| g * d).collect();
                    let gb = (0..g.len()).map(|i| -g[i] * z.data()[i] / bv.data()[i]).collect();
                    send(*alpha, ga, &mut grads)?;
                    send(*beta, gb, &mut grads)?;
                }
                Op::PickPerColumn { inputs, choice } => {
                    let cols = g.len();
                    for (j, &inp) in inputs.iter().enumerate() {
                        if choice.iter().any(|&c| c == j) {
                            let c = (0..cols).map(|b| if choice[b] == j { g[b] } else { T::zero() }).collect();
                            send(inp, c, &mut grads)?;
                        }
                    }
                }
                Op::MeanOf { inputs } => {
                    let inv = T::one() / T::from_usize(inputs.len()).unwrap();
                    for &inp in inputs {
                        send(inp, g.iter().map(|&v| v * inv).collect(), &mut grads)?;
                    }
                }
            }
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(id, g)| match (&nodes[id].op, g) {
                (Op::Leaf, Some(g)) => Some(Tensor::new(nodes[id].value.shape().to_vec(), g).expect("gradient shape")),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }
}

fn bcast<T: Scalar>(t: &Tensor<T>, i: usize) -> T {
    if t.is_single() {
        t.data()[0]
    } else {
        t.data()[i]
    }
}

fn reduce_broadcast<T: Scalar>(g: Vec<T>, target: usize) -> Vec<T> {
    if target == g.len() {
        g
    } else {
        debug_assert_eq!(target, 1);
        vec![g.iter().fold(T::zero(), |a, &b| a + b)]
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Gradients of leaf parameters from one backward pass.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for a leaf; `None` when the loss does not depend on it.
    pub fn wrt(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient for a leaf, zeros when the loss does not depend on it.
    pub fn wrt_or_zero(&self, v: Var<'_, T>) -> Tensor<T> {
        match self.wrt(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(v.shape().as_slice()),
        }
    }
}

/// Handle to a node in a [`Graph`]; cheap to copy.
#[derive(Clone, Copy)]
pub struct Var<'g, T: Scalar> {
    g: &'g Graph<T>,
    id: NodeId,
}

impl<T: Scalar> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}({:?})", self.id, self.g.value(self.id))
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.g
    }

    /// Borrow of the forward value. Do not hold it while recording new ops.
    pub fn value(&self) -> Ref<'g, Tensor<T>> {
        self.g.value(self.id)
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        self.value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.g.shape_of(self.id)
    }

    pub fn item(&self) -> T {
        self.value().item()
    }

    fn same_graph(&self, other: &Var<'g, T>) -> Result<()> {
        if std::ptr::eq(self.g, other.g) {
            Ok(())
        } else {
            Err(Error::invalid("vars belong to different graphs"))
        }
    }

    pub fn add(self, o: Var<'g, T>) -> Result<Var<'g, T>> {
        self.same_graph(&o)?;
        self.g.binary(BinaryKind::Add, self.id, o.id)
    }

    pub fn sub(self, o: Var<'g, T>) -> Result<Var<'g, T>> {
        self.same_graph(&o)?;
        self.g.binary(BinaryKind::Sub, self.id, o.id)
    }

    pub fn mul(self, o: Var<'g, T>) -> Result<Var<'g, T>> {
        self.same_graph(&o)?;
        self.g.binary(BinaryKind::Mul, self.id, o.id)
    }

    pub fn div(self, o: Var<'g, T>) -> Result<Var<'g, T>> {
        self.same_graph(&o)?;
        self.g.binary(BinaryKind::Div, self.id, o.id)
    }

    pub fn neg(self) -> Result<Var<'g, T>> {
        self.g.unary(self.id, "neg", |x| (-x, -T::one()))
    }

    pub fn scale(self, c: T) -> Result<Var<'g, T>> {
        self.g.unary(self.id, "scale", |x| (x * c, c))
    }

    pub fn add_scalar(self, c: T) -> Result<Var<'g, T>> {
        self.g.unary(self.id, "add_scalar", |x| (x + c, T::one()))
    }

    pub fn exp(self) -> Result<Var<'g, T>> {
        self.g.unary(self.id, "exp", |x| {
            let e = x.exp();
            (e, e)
        })
    }

    pub fn log(self) -> Result<Var<'g, T>> {
        self.g.unary(self.id, "log", |x| (x.ln(), x.recip()))
    }

    pub fn sqrt(self) -> Result<Var<'g, T>> {
        self.g.unary(self.id, "sqrt", |x| {
            let r = x.sqrt();
            (r, T::c(0.5) / r)
        })
    }

    /// `|x|` with subgradient 0 at the kink.
    pub fn abs(self) -> Result<Var<'g, T>> {
        self.g.unary(self.id, "abs", |x| (x.abs(), sign0(x)))
    }

    /// Sign with `sign(0) = 0`; zero derivative everywhere.
    pub fn sign(self) -> Result<Var<'g, T>> {
        self.g.unary(self.id, "sign", |x| (sign0(x), T::zero()))
    }

    pub fn relu(self) -> Result<Var<'g, T>> {
        self.g.unary(self.id, "relu", |x| if x > T::zero() { (x, T::one()) } else { (T::zero(), T::zero()) })
    }

    pub fn max_scalar(self, c: T) -> Result<Var<'g, T>> {
        self.g.unary(self.id, "max_scalar", |x| if x > c { (x, T::one()) } else { (c, T::zero()) })
    }

    pub fn square(self) -> Result<Var<'g, T>> {
        self.g.unary(self.id, "square", |x| (x * x, x + x))
    }

    /// Clamp into `[lo, hi]`; gradient is zero outside the interval.
    pub fn clamp(self, lo: T, hi: T) -> Result<Var<'g, T>> {
        self.g.unary(self.id, "clamp", |x| {
            if x < lo {
                (lo, T::zero())
            } else if x > hi {
                (hi, T::zero())
            } else {
                (x, T::one())
            }
        })
    }

    pub fn sigmoid(self) -> Result<Var<'g, T>> {
        self.g.unary(self.id, "sigmoid", |x| {
            let p = sigmoid(x);
            (p, p * (T::one() - p))
        })
    }

    /// `log(sigmoid(x))`, stable for large `|x|`.
    pub fn log_sigmoid(self) -> Result<Var<'g, T>> {
        self.g.unary(self.id, "log_sigmoid", |x| {
            let v = if x >= T::zero() { -(-x).exp().ln_1p() } else { x - x.exp().ln_1p() };
            (v, T::one() - sigmoid(x))
        })
    }

    pub fn lgamma(self) -> Result<Var<'g, T>> {
        self.g.unary(self.id, "lgamma", |x| {
            let xf = x.f64();
            (T::c(special::ln_gamma(xf)), T::c(special::digamma(xf)))
        })
    }

    pub fn digamma(self) -> Result<Var<'g, T>> {
        self.g.unary(self.id, "digamma", |x| {
            let xf = x.f64();
            (T::c(special::digamma(xf)), T::c(special::trigamma(xf)))
        })
    }

    /// Matrix product; `self` is `[m, k]`, `rhs` is `[k]` or `[k, n]`.
    pub fn matmul(self, rhs: Var<'g, T>) -> Result<Var<'g, T>> {
        self.same_graph(&rhs)?;
        let value = {
            let (a, b) = (self.value(), rhs.value());
            a.matmul(&b)?
        };
        self.g.push(value, Op::MatMul { a: self.id, b: rhs.id }, &[self.id, rhs.id])
    }

    /// Adds a per-row bias `[r]` to every column of `self` (`[r, c]`).
    pub fn add_col_bias(self, bias: Var<'g, T>) -> Result<Var<'g, T>> {
        self.same_graph(&bias)?;
        let value = {
            let (m, b) = (self.value(), bias.value());
            if m.shape().len() != 2 || b.numel() != m.rows() {
                return Err(Error::shape("add_col_bias", format!("{:?} + {:?}", m.shape(), b.shape())));
            }
            let cols = m.cols();
            let mut out = m.data().to_vec();
            for (row, &bv) in out.chunks_mut(cols).zip(b.data()) {
                row.iter_mut().for_each(|v| *v += bv);
            }
            Tensor::new(m.shape().to_vec(), out)?
        };
        self.g.push(value, Op::AddColBias { m: self.id, b: bias.id }, &[self.id, bias.id])
    }

    pub fn sum(self) -> Result<Var<'g, T>> {
        let v = Tensor::scalar(self.value().sum());
        self.g.push(v, Op::SumAll { a: self.id }, &[self.id])
    }

    pub fn mean(self) -> Result<Var<'g, T>> {
        let n = self.value().numel();
        self.sum()?.scale(T::one() / T::from_usize(n).unwrap())
    }

    /// Column sums of a matrix: `[r, c] -> [c]`. Vectors pass through as a
    /// single row.
    pub fn sum_rows(self) -> Result<Var<'g, T>> {
        let value = {
            let m = self.value();
            let cols = m.cols();
            let mut out = vec![T::zero(); cols];
            for row in m.data().chunks(cols) {
                for (o, &v) in out.iter_mut().zip(row) {
                    *o += v;
                }
            }
            Tensor::vector(out)
        };
        self.g.push(value, Op::SumRows { a: self.id }, &[self.id])
    }

    /// Identity forward; contributes no gradient to any ancestor.
    pub fn stop_gradient(self) -> Var<'g, T> {
        let v = match self.g.freeze(|| self.to_tensor()) {
            Ok((v, _)) => v,
            Err(_) => self.to_tensor(),
        };
        self.g.push_raw(v, Op::StopGradient, false)
    }

    /// Shifted soft-threshold `sign(s-mu) max(|s-mu|-lambda, 0) + 1[|s-mu|>lambda] mu`
    /// with its subgradient (zero in the dead zone).
    pub fn soft_threshold(self, lambda: Var<'g, T>, mu: Var<'g, T>) -> Result<Var<'g, T>> {
        let value = shifted_threshold_value(&self.value(), &lambda.value(), &mu.value())?;
        self.g.push(value, Op::SoftThreshold { s: self.id, lambda: lambda.id, mu: mu.id }, &[self.id, lambda.id])
    }

    /// `s + T(sg[s]) - sg[s]`: forward equals [`Var::soft_threshold`]
    /// exactly, backward passes the gradient straight to `s`. `lambda`
    /// receives `dT/dlambda` when it is itself differentiable.
    pub fn st_threshold(self, lambda: Var<'g, T>, mu: Var<'g, T>) -> Result<Var<'g, T>> {
        let (s0, replayed) = self.g.freeze(|| self.to_tensor())?;
        let mut value = shifted_threshold_value(&s0, &lambda.value(), &mu.value())?;
        if replayed {
            value = value.zip_map(&s0, |t, s0| t - s0)?.zip_map(&self.value(), |d, s| s + d)?;
        }
        self.g.push(value, Op::StraightThrough { s: self.id, lambda: lambda.id, mu: mu.id }, &[self.id, lambda.id])
    }

    /// `1[x > 0]` forward; backward uses the slope of `sigmoid(x)`.
    pub fn st_gate(self) -> Result<Var<'g, T>> {
        let hard = |x: T| if x > T::zero() { T::one() } else { T::zero() };
        let (offset, replayed) = self.g.freeze(|| self.value().map(|x| hard(x) - sigmoid(x)))?;
        let v = if replayed { self.value().zip_map(&offset, |x, o| sigmoid(x) + o)? } else { self.value().map(hard) };
        self.g.push(v, Op::StGate { v: self.id }, &[self.id])
    }

    /// Per-column selection among same-shaped vectors: output `b` is
    /// `inputs[choice[b]][b]`. Gradient reaches only the chosen entries.
    pub fn pick_per_column(inputs: &[Var<'g, T>], choice: &[usize]) -> Result<Var<'g, T>> {
        let first = inputs.first().ok_or_else(|| Error::invalid("pick_per_column with no inputs"))?;
        let g = first.g;
        let value = {
            let vals: Vec<_> = inputs.iter().map(|v| v.value()).collect();
            let n = vals[0].numel();
            if vals.iter().any(|v| v.numel() != n) || choice.len() != n || choice.iter().any(|&c| c >= inputs.len()) {
                return Err(Error::shape("pick_per_column", "inputs/choice disagree"));
            }
            Tensor::vector((0..n).map(|b| vals[choice[b]].data()[b]).collect())
        };
        let ids: Vec<NodeId> = inputs.iter().map(|v| v.id).collect();
        g.push(value, Op::PickPerColumn { inputs: ids.clone(), choice: choice.to_vec() }, &ids)
    }

    /// Elementwise mean of same-shaped inputs.
    pub fn mean_of(inputs: &[Var<'g, T>]) -> Result<Var<'g, T>> {
        let first = inputs.first().ok_or_else(|| Error::invalid("mean_of with no inputs"))?;
        let g = first.g;
        let value = {
            let vals: Vec<_> = inputs.iter().map(|v| v.value()).collect();
            let shape = vals[0].shape().to_vec();
            if vals.iter().any(|v| v.shape() != shape.as_slice()) {
                return Err(Error::shape("mean_of", "inputs differ in shape"));
            }
            let inv = T::one() / T::from_usize(vals.len()).unwrap();
            let mut acc = vec![T::zero(); vals[0].numel()];
            for v in &vals {
                for (a, &x) in acc.iter_mut().zip(v.data()) {
                    *a += x;
                }
            }
            Tensor::new(shape, acc.into_iter().map(|a| a * inv).collect())?
        };
        let ids: Vec<NodeId> = inputs.iter().map(|v| v.id).collect();
        g.push(value, Op::MeanOf { inputs: ids.clone() }, &ids)
    }

    /// Records an externally drawn Gamma sample `z` with its pathwise
    /// derivative `dz/dalpha`; `dz/dbeta = -z/beta` is applied in backward.
    pub(crate) fn gamma_sample(alpha: Var<'g, T>, beta: Var<'g, T>, z: Tensor<T>, dz_dalpha: Vec<T>) -> Result<Var<'g, T>> {
        alpha.same_graph(&beta)?;
        let g = alpha.g;
        let (av, bv) = (alpha.to_tensor(), beta.to_tensor());
        let level = |a: T, unit: f64| {
            let (a, unit) = (a.f64(), unit);
            if unit < a { T::c(special::gamma_p(a, unit)) } else { T::c(-special::gamma_q(a, unit)) }
        };
        let (levels, replayed) = g.freeze(|| {
            let units = z.zip_map(&bv, |z, b| z * b).expect("gamma sample matches beta");
            av.zip_map(&units, |a, u| level(a, u.f64())).expect("gamma sample matches alpha")
        })?;
        let z = if replayed {
            let units = av.zip_map(&levels, |a, l| {
                let l = l.f64();
                T::c(if l >= 0.0 { special::gamma_p_inv(a.f64(), l) } else { special::gamma_q_inv(a.f64(), -l) })
            })?;
            units.zip_map(&bv, |u, b| u / b)?
        } else {
            z
        };
        g.push(z, Op::GammaSample { alpha: alpha.id, beta: beta.id, dz_dalpha }, &[alpha.id, beta.id])
    }
}

#[inline]
pub(crate) fn sign0<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Forward value of the shifted soft-threshold. `lambda` and `mu` may be
/// single-element (broadcast) or match `s`.
pub(crate) fn shifted_threshold_value<T: Scalar>(s: &Tensor<T>, lambda: &Tensor<T>, mu: &Tensor<T>) -> Result<Tensor<T>> {
    let n = s.numel();
    for (name, t) in [("lambda", lambda), ("mu", mu)] {
        if !(t.is_single() || t.numel() == n) {
            return Err(Error::shape("soft_threshold", format!("{name} shape {:?} vs s {:?}", t.shape(), s.shape())));
        }
    }
    if lambda.data().iter().any(|&l| l < T::zero()) {
        return Err(Error::invalid("soft_threshold: negative lambda"));
    }
    let out = (0..n)
        .map(|i| {
            let (x, l, m) = (s.data()[i], bcast(lambda, i), bcast(mu, i));
            threshold_scalar(x, l, m)
        })
        .collect();
    Tensor::new(s.shape().to_vec(), out)
}

/// Scalar shifted soft-threshold.
#[inline]
pub fn threshold_scalar<T: Scalar>(s: T, lambda: T, mu: T) -> T {
    let d = s - mu;
    if d.abs() > lambda {
        sign0(d) * (d.abs() - lambda) + mu
    } else {
        T::zero()
    }
}
