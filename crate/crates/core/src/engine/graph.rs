use std::cell::{Ref, RefCell};

use super::{EngineError, Tensor};

/// How the right-hand operand of a binary op lines up with the left one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    Row,
    Col,
    Scalar,
}

impl Broadcast {
    fn resolve(op: &'static str, lhs: [usize; 2], rhs: [usize; 2]) -> Result<Self, EngineError> {
        if lhs == rhs {
            Ok(Broadcast::Same)
        } else if rhs == [1, 1] {
            Ok(Broadcast::Scalar)
        } else if rhs == [1, lhs[1]] {
            Ok(Broadcast::Row)
        } else if rhs == [lhs[0], 1] {
            Ok(Broadcast::Col)
        } else {
            Err(EngineError::ShapeMismatch { op, lhs, rhs })
        }
    }

    #[inline]
    fn index(self, r: usize, c: usize, cols: usize) -> usize {
        match self {
            Broadcast::Same => r * cols + c,
            Broadcast::Row => c,
            Broadcast::Col => r,
            Broadcast::Scalar => 0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Sigmoid,
    Tanh,
    Exp,
    Log,
    Square,
    Hinge,
    Neg,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Binary(Binary, Broadcast, usize, usize),
    Unary(Unary, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Clamp(usize, f64, f64),
    Softmax {
        input: usize,
        mask: Option<Vec<f64>>,
        weights: Option<usize>,
    },
    Sum(usize),
    SumRows(usize),
    SumCols(usize),
    Mean(usize),
    Transpose(usize),
    ConcatRows(usize, usize),
    GatherRows(usize, Vec<usize>),
    Index(usize, usize),
    StopGrad,
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run computation graph.
///
/// A fresh graph is built for every forward pass; nodes are appended in
/// topological order so backward is a single reverse sweep.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({}, {:?})", self.id, self.shape())
    }
}

/// Gradients of a scalar root with respect to every node that requires one.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient of `var`, or zeros of its shape when it received none.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| {
                let [r, c] = var.shape();
                Tensor::zeros(r, c)
            })
    }
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

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn push_checked(
        &self,
        name: &'static str,
        value: Tensor,
        op: Op,
        requires_grad: bool,
    ) -> Result<Var<'_>, EngineError> {
        if !value.is_finite() {
            return Err(EngineError::NonFinite { op: name });
        }
        Ok(self.push(value, op, requires_grad))
    }

    /// Trainable leaf; gradients are accumulated over all its uses.
    pub fn param(&self, value: &Tensor) -> Result<Var<'_>, EngineError> {
        self.push_checked("param", value.clone(), Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: &Tensor) -> Result<Var<'_>, EngineError> {
        self.push_checked("constant", value.clone(), Op::Leaf, false)
    }

    pub fn constant_owned(&self, value: Tensor) -> Result<Var<'_>, EngineError> {
        self.push_checked("constant", value, Op::Leaf, false)
    }

    /// Leaf that is either trainable or constant.
    pub fn leaf(&self, value: &Tensor, trainable: bool) -> Result<Var<'_>, EngineError> {
        if trainable {
            self.param(value)
        } else {
            self.constant(value)
        }
    }

    fn node_value(&self, id: usize) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients, EngineError> {
        let nodes = self.nodes.borrow();
        let root_shape = nodes[root.id].value.shape();
        if root_shape != [1, 1] {
            return Err(EngineError::NonScalarRoot { shape: root_shape });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        if !nodes[root.id].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[root.id] = Some(Tensor::scalar(1.0));

        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backward_node(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Largest absolute hinge input closest to its kink, used to warn
    /// finite-difference probes that sit on a non-differentiable point.
    pub fn min_hinge_margin(&self) -> Option<f64> {
        let nodes = self.nodes.borrow();
        nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Unary(Unary::Hinge, a) => Some(
                    nodes[a]
                        .value
                        .data()
                        .iter()
                        .fold(f64::INFINITY, |m, v| m.min(v.abs())),
                ),
                _ => None,
            })
            .reduce(f64::min)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], nodes: &[Node], id: usize, g: Tensor) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Sums a full-shape gradient down to a broadcast operand's shape.
fn reduce_broadcast(g: &Tensor, mode: Broadcast, target: [usize; 2]) -> Tensor {
    match mode {
        Broadcast::Same => g.clone(),
        _ => {
            let mut out = Tensor::zeros(target[0], target[1]);
            let cols = g.cols();
            let data = out.data_mut();
            for r in 0..g.rows() {
                for c in 0..cols {
                    data[mode.index(r, c, cols)] += g.get(r, c);
                }
            }
            out
        }
    }
}

fn backward_node(nodes: &[Node], node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let value = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            if nodes[*a].requires_grad {
                accumulate(grads, nodes, *a, Tensor::matmul_nt(g, bv));
            }
            if nodes[*b].requires_grad {
                accumulate(grads, nodes, *b, Tensor::matmul_tn(av, g));
            }
        }
        Op::Binary(kind, mode, a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let cols = av.cols();
            let rhs = |i: usize| bv.data()[mode.index(i / cols, i % cols, cols)];
            let elementwise = |f: &dyn Fn(usize, f64) -> f64| {
                let data = g.data().iter().enumerate().map(|(i, &gi)| f(i, gi)).collect();
                Tensor::new(g.rows(), cols, data).expect("gradient shape")
            };
            if nodes[*a].requires_grad {
                let ga = match kind {
                    Binary::Add | Binary::Sub => g.clone(),
                    Binary::Mul => elementwise(&|i, gi| gi * rhs(i)),
                    Binary::Div => elementwise(&|i, gi| gi / rhs(i)),
                };
                accumulate(grads, nodes, *a, ga);
            }
            if nodes[*b].requires_grad {
                let gb_full = match kind {
                    Binary::Add => g.clone(),
                    Binary::Sub => g.map(|v| -v),
                    Binary::Mul => elementwise(&|i, gi| gi * av.data()[i]),
                    Binary::Div => elementwise(&|i, gi| {
                        let y = rhs(i);
                        -gi * av.data()[i] / (y * y)
                    }),
                };
                accumulate(grads, nodes, *b, reduce_broadcast(&gb_full, *mode, bv.shape()));
            }
        }
        Op::Unary(kind, a) => {
            let av = &nodes[*a].value;
            let mut ga = Tensor::zeros(av.rows(), av.cols());
            for (i, out) in ga.data_mut().iter_mut().enumerate() {
                let x = av.data()[i];
                let y = value.data()[i];
                let d = match kind {
                    Unary::Sigmoid => y * (1.0 - y),
                    Unary::Tanh => 1.0 - y * y,
                    Unary::Exp => y,
                    Unary::Log => 1.0 / x,
                    Unary::Square => 2.0 * x,
                    Unary::Hinge => {
                        if x > 0.0 {
                            1.0
                        } else {
                            0.0
                        }
                    }
                    Unary::Neg => -1.0,
                };
                *out = g.data()[i] * d;
            }
            accumulate(grads, nodes, *a, ga);
        }
        Op::Scale(a, s) => accumulate(grads, nodes, *a, g.map(|v| v * s)),
        Op::AddScalar(a) => accumulate(grads, nodes, *a, g.clone()),
        Op::Clamp(a, lo, hi) => {
            let av = &nodes[*a].value;
            let mut ga = g.clone();
            for (o, &x) in ga.data_mut().iter_mut().zip(av.data()) {
                if x < *lo || x > *hi {
                    *o = 0.0;
                }
            }
            accumulate(grads, nodes, *a, ga);
        }
        Op::Softmax {
            input,
            mask,
            weights,
        } => {
            let x = &nodes[*input].value;
            let cols = x.cols();
            let need_x = nodes[*input].requires_grad;
            let need_w = weights.is_some_and(|w| nodes[w].requires_grad);
            let mut gx = Tensor::zeros(if need_x { x.rows() } else { 0 }, cols);
            let mut gw = Tensor::zeros(if need_w { x.rows() } else { 0 }, cols);
            for r in 0..x.rows() {
                let y = value.row(r);
                let gr = g.row(r);
                let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                if need_x {
                    for c in 0..cols {
                        gx.data_mut()[r * cols + c] = y[c] * (gr[c] - dot);
                    }
                }
                if need_w {
                    let (exps, total) = softmax_row_terms(x.row(r), mask.as_deref(), |c| {
                        weight_at(nodes, *weights, r, c, cols)
                    });
                    for c in 0..cols {
                        gw.data_mut()[r * cols + c] = exps[c] / total * (gr[c] - dot);
                    }
                }
            }
            if need_x {
                accumulate(grads, nodes, *input, gx);
            }
            if let (true, Some(w)) = (need_w, weights) {
                let shape = nodes[*w].value.shape();
                let mode = if shape == [1, cols] && x.rows() != 1 {
                    Broadcast::Row
                } else {
                    Broadcast::Same
                };
                accumulate(grads, nodes, *w, reduce_broadcast(&gw, mode, shape));
            }
        }
        Op::Sum(a) => {
            let s = g.item();
            let av = &nodes[*a].value;
            accumulate(grads, nodes, *a, Tensor::filled(av.rows(), av.cols(), s));
        }
        Op::Mean(a) => {
            let av = &nodes[*a].value;
            let s = g.item() / av.len() as f64;
            accumulate(grads, nodes, *a, Tensor::filled(av.rows(), av.cols(), s));
        }
        Op::SumRows(a) => {
            let av = &nodes[*a].value;
            let mut ga = Tensor::zeros(av.rows(), av.cols());
            for r in 0..av.rows() {
                ga.data_mut()[r * av.cols()..(r + 1) * av.cols()].copy_from_slice(g.data());
            }
            accumulate(grads, nodes, *a, ga);
        }
        Op::SumCols(a) => {
            let av = &nodes[*a].value;
            let mut ga = Tensor::zeros(av.rows(), av.cols());
            for r in 0..av.rows() {
                for c in 0..av.cols() {
                    ga.data_mut()[r * av.cols() + c] = g.data()[r];
                }
            }
            accumulate(grads, nodes, *a, ga);
        }
        Op::Transpose(a) => accumulate(grads, nodes, *a, g.transpose()),
        Op::ConcatRows(a, b) => {
            let top = nodes[*a].value.rows();
            let cols = g.cols();
            let ga = Tensor::new(top, cols, g.data()[..top * cols].to_vec())
                .expect("concat gradient shape");
            let gb = Tensor::new(g.rows() - top, cols, g.data()[top * cols..].to_vec())
                .expect("concat gradient shape");
            accumulate(grads, nodes, *a, ga);
            accumulate(grads, nodes, *b, gb);
        }
        Op::GatherRows(a, indices) => {
            let av = &nodes[*a].value;
            let cols = av.cols();
            let mut ga = Tensor::zeros(av.rows(), cols);
            for (k, &i) in indices.iter().enumerate() {
                for c in 0..cols {
                    ga.data_mut()[i * cols + c] += g.data()[k * cols + c];
                }
            }
            accumulate(grads, nodes, *a, ga);
        }
        Op::Index(a, flat) => {
            let av = &nodes[*a].value;
            let mut ga = Tensor::zeros(av.rows(), av.cols());
            ga.data_mut()[*flat] = g.item();
            accumulate(grads, nodes, *a, ga);
        }
        Op::StopGrad => {}
    }
}

fn weight_at(nodes: &[Node], weights: Option<usize>, r: usize, c: usize, cols: usize) -> f64 {
    match weights {
        None => 1.0,
        Some(w) => {
            let wv = &nodes[w].value;
            if wv.rows() == 1 {
                wv.data()[c]
            } else {
                wv.data()[r * cols + c]
            }
        }
    }
}

/// Unnormalised masked exponentials `exp(x - max)` (before weighting) and
/// the weighted normaliser of one softmax row.
fn softmax_row_terms(
    row: &[f64],
    mask: Option<&[f64]>,
    weight: impl Fn(usize) -> f64,
) -> (Vec<f64>, f64) {
    let masked = |c: usize| mask.is_some_and(|m| m[c] == f64::NEG_INFINITY);
    let shifted = |c: usize| row[c] + mask.map_or(0.0, |m| m[c]);
    let max = (0..row.len())
        .filter(|&c| !masked(c))
        .map(shifted)
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = (0..row.len())
        .map(|c| if masked(c) { 0.0 } else { (shifted(c) - max).exp() })
        .collect();
    let total = exps.iter().enumerate().map(|(c, e)| weight(c) * e).sum();
    (exps, total)
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn shape(&self) -> [usize; 2] {
        self.graph.node_value(self.id).shape()
    }

    pub fn rows(&self) -> usize {
        self.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.shape()[1]
    }

    pub fn value(&self) -> Tensor {
        self.graph.node_value(self.id).clone()
    }

    /// Value of a scalar node.
    pub fn item(&self) -> f64 {
        self.graph.node_value(self.id).item()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires_grad(self.id)
    }

    fn same_graph(&self, other: &Var<'g>) {
        assert!(
            std::ptr::eq(self.graph, other.graph),
            "vars belong to different graphs"
        );
    }

    fn unary(self, kind: Unary, name: &'static str, f: impl Fn(f64) -> f64) -> Result<Self, EngineError> {
        let out = self.graph.node_value(self.id).map(f);
        self.graph
            .push_checked(name, out, Op::Unary(kind, self.id), self.requires_grad())
    }

    fn binary(self, other: Var<'g>, kind: Binary, name: &'static str) -> Result<Self, EngineError> {
        self.same_graph(&other);
        let (a, b) = (self.graph.node_value(self.id), self.graph.node_value(other.id));
        let mode = Broadcast::resolve(name, a.shape(), b.shape())?;
        let cols = a.cols();
        let mut out = Tensor::zeros(a.rows(), cols);
        for r in 0..a.rows() {
            for c in 0..cols {
                let x = a.data()[r * cols + c];
                let y = b.data()[mode.index(r, c, cols)];
                out.data_mut()[r * cols + c] = match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                    Binary::Div => x / y,
                };
            }
        }
        drop((a, b));
        let rg = self.requires_grad() || other.requires_grad();
        self.graph
            .push_checked(name, out, Op::Binary(kind, mode, self.id, other.id), rg)
    }

    pub fn matmul(self, other: Var<'g>) -> Result<Self, EngineError> {
        self.same_graph(&other);
        let (a, b) = (self.graph.node_value(self.id), self.graph.node_value(other.id));
        if a.cols() != b.rows() {
            return Err(EngineError::ShapeMismatch {
                op: "matmul",
                lhs: a.shape(),
                rhs: b.shape(),
            });
        }
        let out = Tensor::matmul_raw(&a, &b);
        drop((a, b));
        let rg = self.requires_grad() || other.requires_grad();
        self.graph
            .push_checked("matmul", out, Op::MatMul(self.id, other.id), rg)
    }

    /// Elementwise sum; `other` may be a same-shape matrix, a row vector,
    /// a column vector or a scalar.
    pub fn add(self, other: Var<'g>) -> Result<Self, EngineError> {
        self.binary(other, Binary::Add, "add")
    }

    pub fn sub(self, other: Var<'g>) -> Result<Self, EngineError> {
        self.binary(other, Binary::Sub, "sub")
    }

    pub fn mul(self, other: Var<'g>) -> Result<Self, EngineError> {
        self.binary(other, Binary::Mul, "mul")
    }

    pub fn div(self, other: Var<'g>) -> Result<Self, EngineError> {
        self.binary(other, Binary::Div, "div")
    }

    pub fn scale(self, factor: f64) -> Result<Self, EngineError> {
        let out = self.graph.node_value(self.id).map(|v| v * factor);
        self.graph
            .push_checked("scale", out, Op::Scale(self.id, factor), self.requires_grad())
    }

    pub fn add_scalar(self, offset: f64) -> Result<Self, EngineError> {
        let out = self.graph.node_value(self.id).map(|v| v + offset);
        self.graph.push_checked(
            "add_scalar",
            out,
            Op::AddScalar(self.id),
            self.requires_grad(),
        )
    }

    /// Clamps every entry into `[lo, hi]`; entries outside pass no gradient.
    pub fn clamp(self, lo: f64, hi: f64) -> Result<Self, EngineError> {
        let out = self.graph.node_value(self.id).map(|v| v.clamp(lo, hi));
        self.graph
            .push_checked("clamp", out, Op::Clamp(self.id, lo, hi), self.requires_grad())
    }

    pub fn neg(self) -> Result<Self, EngineError> {
        self.unary(Unary::Neg, "neg", |v| -v)
    }

    /// `1 - self`
    pub fn one_minus(self) -> Result<Self, EngineError> {
        self.neg()?.add_scalar(1.0)
    }

    pub fn sigmoid(self) -> Result<Self, EngineError> {
        self.unary(Unary::Sigmoid, "sigmoid", sigmoid)
    }

    pub fn tanh(self) -> Result<Self, EngineError> {
        self.unary(Unary::Tanh, "tanh", f64::tanh)
    }

    pub fn exp(self) -> Result<Self, EngineError> {
        self.unary(Unary::Exp, "exp", f64::exp)
    }

    pub fn ln(self) -> Result<Self, EngineError> {
        self.unary(Unary::Log, "log", f64::ln)
    }

    pub fn square(self) -> Result<Self, EngineError> {
        self.unary(Unary::Square, "square", |v| v * v)
    }

    /// `max(x, 0)`, with subgradient 0 at the kink.
    pub fn hinge(self) -> Result<Self, EngineError> {
        self.unary(Unary::Hinge, "hinge", |v| if v > 0.0 { v } else { 0.0 })
    }

    /// Row-wise softmax.
    pub fn softmax(self) -> Result<Self, EngineError> {
        self.softmax_masked(None, None)
    }

    /// Row-wise softmax with an optional additive per-column mask (entries
    /// of `-inf` get exactly zero weight) and optional non-negative
    /// multiplicative weights: `y_j = w_j e^{x_j + m_j} / Σ_k w_k e^{x_k + m_k}`.
    ///
    /// `weights` is either the same shape as `self` or a `1 × cols` row
    /// applied to every row. Unit weights reproduce the unweighted softmax
    /// bit for bit.
    pub fn softmax_masked(
        self,
        mask: Option<&[f64]>,
        weights: Option<Var<'g>>,
    ) -> Result<Self, EngineError> {
        let x = self.graph.node_value(self.id);
        let [rows, cols] = x.shape();
        if let Some(m) = mask {
            if m.len() != cols {
                return Err(EngineError::ShapeMismatch {
                    op: "softmax_mask",
                    lhs: [rows, cols],
                    rhs: [1, m.len()],
                });
            }
            if m.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
                return Err(EngineError::NonFinite { op: "softmax_mask" });
            }
        }
        let wv = match weights {
            Some(w) => {
                self.same_graph(&w);
                let wt = self.graph.node_value(w.id).clone();
                if wt.shape() != [rows, cols] && wt.shape() != [1, cols] {
                    return Err(EngineError::ShapeMismatch {
                        op: "softmax_weights",
                        lhs: [rows, cols],
                        rhs: wt.shape(),
                    });
                }
                if wt.data().iter().any(|v| *v < 0.0) {
                    return Err(EngineError::NegativeWeight);
                }
                Some(wt)
            }
            None => None,
        };
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let weight = |c: usize| match &wv {
                None => 1.0,
                Some(w) if w.rows() == 1 => w.data()[c],
                Some(w) => w.data()[r * cols + c],
            };
            let (exps, total) = softmax_row_terms(x.row(r), mask, weight);
            if !(total > 0.0) {
                return Err(EngineError::EmptySoftmaxRow { row: r });
            }
            for c in 0..cols {
                out.data_mut()[r * cols + c] = weight(c) * exps[c] / total;
            }
        }
        drop(x);
        let rg = self.requires_grad() || weights.is_some_and(|w| w.requires_grad());
        self.graph.push_checked(
            "softmax",
            out,
            Op::Softmax {
                input: self.id,
                mask: mask.map(<[f64]>::to_vec),
                weights: weights.map(|w| w.id),
            },
            rg,
        )
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(self) -> Result<Self, EngineError> {
        let s = self.graph.node_value(self.id).data().iter().sum();
        self.graph
            .push_checked("sum", Tensor::scalar(s), Op::Sum(self.id), self.requires_grad())
    }

    pub fn mean(self) -> Result<Self, EngineError> {
        let x = self.graph.node_value(self.id);
        let s = x.data().iter().sum::<f64>() / x.len() as f64;
        drop(x);
        self.graph
            .push_checked("mean", Tensor::scalar(s), Op::Mean(self.id), self.requires_grad())
    }

    /// Column sums: `r × c → 1 × c`.
    pub fn sum_rows(self) -> Result<Self, EngineError> {
        let x = self.graph.node_value(self.id);
        let mut out = Tensor::zeros(1, x.cols());
        for r in 0..x.rows() {
            for (o, v) in out.data_mut().iter_mut().zip(x.row(r)) {
                *o += v;
            }
        }
        drop(x);
        self.graph
            .push_checked("sum_rows", out, Op::SumRows(self.id), self.requires_grad())
    }

    /// Row sums: `r × c → r × 1`.
    pub fn sum_cols(self) -> Result<Self, EngineError> {
        let x = self.graph.node_value(self.id);
        let out = Tensor::column_vector((0..x.rows()).map(|r| x.row(r).iter().sum()).collect());
        drop(x);
        self.graph
            .push_checked("sum_cols", out, Op::SumCols(self.id), self.requires_grad())
    }

    pub fn transpose(self) -> Result<Self, EngineError> {
        let out = self.graph.node_value(self.id).transpose();
        self.graph
            .push_checked("transpose", out, Op::Transpose(self.id), self.requires_grad())
    }

    /// Stacks `self` on top of `other`.
    pub fn concat_rows(self, other: Var<'g>) -> Result<Self, EngineError> {
        self.same_graph(&other);
        let (a, b) = (self.graph.node_value(self.id), self.graph.node_value(other.id));
        if a.cols() != b.cols() {
            return Err(EngineError::ShapeMismatch {
                op: "concat_rows",
                lhs: a.shape(),
                rhs: b.shape(),
            });
        }
        let mut data = a.data().to_vec();
        data.extend_from_slice(b.data());
        let out = Tensor::new(a.rows() + b.rows(), a.cols(), data)?;
        drop((a, b));
        let rg = self.requires_grad() || other.requires_grad();
        self.graph
            .push_checked("concat_rows", out, Op::ConcatRows(self.id, other.id), rg)
    }

    pub fn gather_rows(self, indices: &[usize]) -> Result<Self, EngineError> {
        let x = self.graph.node_value(self.id);
        if let Some(&bad) = indices.iter().find(|&&i| i >= x.rows()) {
            return Err(EngineError::IndexOutOfRange {
                index: bad,
                len: x.rows(),
            });
        }
        let out = x.gather_rows(indices);
        drop(x);
        self.graph.push_checked(
            "gather_rows",
            out,
            Op::GatherRows(self.id, indices.to_vec()),
            self.requires_grad(),
        )
    }

    /// Scalar entry `(row, col)`.
    pub fn at(self, row: usize, col: usize) -> Result<Self, EngineError> {
        let x = self.graph.node_value(self.id);
        if row >= x.rows() || col >= x.cols() {
            return Err(EngineError::IndexOutOfRange {
                index: row * x.cols() + col,
                len: x.len(),
            });
        }
        let flat = row * x.cols() + col;
        let v = x.data()[flat];
        drop(x);
        self.graph.push_checked(
            "index",
            Tensor::scalar(v),
            Op::Index(self.id, flat),
            self.requires_grad(),
        )
    }

    /// Same value, no gradient flows back through it.
    pub fn stop_grad(self) -> Self {
        let v = self.value();
        self.graph.push(v, Op::StopGrad, false)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
