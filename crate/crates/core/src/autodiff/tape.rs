use std::cell::{Ref, RefCell};

use super::tensor::{
    broadcast_index_map, broadcast_shapes, matmul_nn, matmul_nt_acc, matmul_tn_acc, sigmoid,
    softplus, Tensor,
};
use super::TensorError;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize, Option<Vec<usize>>, Option<Vec<usize>>),
    Sub(usize, usize, Option<Vec<usize>>, Option<Vec<usize>>),
    Mul(usize, usize, Option<Vec<usize>>, Option<Vec<usize>>),
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Relu(usize),
    LeakyRelu(usize, f64),
    Tanh(usize),
    Exp(usize),
    Log(usize),
    Softplus(usize),
    Scale(usize, f64),
    Sum(usize),
    Mean(usize),
    SumAxis { a: usize, outer: usize, axis_len: usize, inner: usize },
    L2Normalize { a: usize, outer: usize, axis_len: usize, inner: usize, norms: Vec<f64> },
    Concat { parts: Vec<(usize, usize)>, outer: usize, inner: usize },
    Slice { a: usize, outer: usize, axis_len: usize, inner: usize, start: usize, end: usize },
    Broadcast(usize, Vec<usize>),
    Transpose { a: usize, rows: usize, cols: usize },
    LogSoftmax { a: usize, cols: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Define-by-run record of executed operations.
///
/// Nodes are stored in execution order, so a reverse sweep over the node
/// list is a valid reverse topological order.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Splits `shape` around `axis` into (outer, axis_len, inner) extents.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a leaf. Leaves with `requires_grad` collect gradients on
    /// [`Tape::backward`].
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let op = if requires_grad { op } else { Op::Leaf };
        nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Clears accumulated gradients on every node.
    pub fn zero_grad(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.grad = None;
        }
    }

    /// Reverse sweep from a scalar `root`, accumulating `d root / d leaf`
    /// into every leaf that requires a gradient.
    pub fn backward(&self, root: Var<'_>) -> Result<(), TensorError> {
        let mut nodes = self.nodes.borrow_mut();
        let root_shape = nodes[root.id].value.shape().to_vec();
        if nodes[root.id].value.len() != 1 {
            return Err(TensorError::NonScalarRoot(root_shape));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=root.id).map(|_| None).collect();
        grads[root.id] = Some(vec![1.0]);

        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[id] = Some(g);
                continue;
            }
            propagate(&nodes, id, &g, &mut grads);
        }

        for (id, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                let node = &mut nodes[id];
                if matches!(node.op, Op::Leaf) && node.requires_grad {
                    match node.grad.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => node.grad = Some(g),
                    }
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: usize, len: usize, f: impl FnOnce(&mut [f64])) {
    let slot = grads[id].get_or_insert_with(|| vec![0.0; len]);
    f(slot);
}

/// Adds `g` (shaped like the broadcast output) into the gradient of an
/// operand, reducing over broadcast dimensions via `map`.
fn accumulate_broadcast(
    grads: &mut [Option<Vec<f64>>],
    id: usize,
    len: usize,
    map: &Option<Vec<usize>>,
    g: impl Iterator<Item = f64>,
) {
    accumulate(grads, id, len, |acc| match map {
        None => acc.iter_mut().zip(g).for_each(|(a, v)| *a += v),
        Some(map) => map.iter().zip(g).for_each(|(&i, v)| acc[i] += v),
    });
}

fn propagate(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    let needs = |i: usize| nodes[i].requires_grad;
    let len_of = |i: usize| nodes[i].value.len();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b, ma, mb) => {
            if needs(*a) {
                accumulate_broadcast(grads, *a, len_of(*a), ma, g.iter().copied());
            }
            if needs(*b) {
                accumulate_broadcast(grads, *b, len_of(*b), mb, g.iter().copied());
            }
        }
        Op::Sub(a, b, ma, mb) => {
            if needs(*a) {
                accumulate_broadcast(grads, *a, len_of(*a), ma, g.iter().copied());
            }
            if needs(*b) {
                accumulate_broadcast(grads, *b, len_of(*b), mb, g.iter().map(|v| -v));
            }
        }
        Op::Mul(a, b, ma, mb) => {
            let av = nodes[*a].value.data();
            let bv = nodes[*b].value.data();
            let at = |i: usize| ma.as_ref().map_or(i, |m| m[i]);
            let bt = |i: usize| mb.as_ref().map_or(i, |m| m[i]);
            if needs(*a) {
                let it = g.iter().enumerate().map(|(i, &gv)| gv * bv[bt(i)]);
                accumulate_broadcast(grads, *a, len_of(*a), ma, it);
            }
            if needs(*b) {
                let it = g.iter().enumerate().map(|(i, &gv)| gv * av[at(i)]);
                accumulate_broadcast(grads, *b, len_of(*b), mb, it);
            }
        }
        Op::MatMul { a, b, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            if needs(*a) {
                let bv = nodes[*b].value.data();
                accumulate(grads, *a, m * k, |acc| matmul_nt_acc(g, bv, acc, m, k, n));
            }
            if needs(*b) {
                let av = nodes[*a].value.data();
                accumulate(grads, *b, k * n, |acc| matmul_tn_acc(av, g, acc, m, k, n));
            }
        }
        Op::Relu(a) => unary(nodes, grads, *a, g, |x| if x > 0.0 { 1.0 } else { 0.0 }),
        Op::LeakyRelu(a, s) => {
            let s = *s;
            unary(nodes, grads, *a, g, move |x| if x > 0.0 { 1.0 } else { s })
        }
        Op::Tanh(a) => {
            let y = node.value.data();
            accumulate(grads, *a, y.len(), |acc| {
                for ((acc, &gv), &yv) in acc.iter_mut().zip(g).zip(y) {
                    *acc += gv * (1.0 - yv * yv);
                }
            });
        }
        Op::Exp(a) => {
            let y = node.value.data();
            accumulate(grads, *a, y.len(), |acc| {
                for ((acc, &gv), &yv) in acc.iter_mut().zip(g).zip(y) {
                    *acc += gv * yv;
                }
            });
        }
        Op::Log(a) => unary(nodes, grads, *a, g, |x| 1.0 / x),
        Op::Softplus(a) => unary(nodes, grads, *a, g, sigmoid),
        Op::Scale(a, c) => {
            let c = *c;
            unary(nodes, grads, *a, g, move |_| c)
        }
        Op::Sum(a) => {
            let gv = g[0];
            accumulate(grads, *a, len_of(*a), |acc| acc.iter_mut().for_each(|v| *v += gv));
        }
        Op::Mean(a) => {
            let n = len_of(*a);
            let gv = g[0] / n as f64;
            accumulate(grads, *a, n, |acc| acc.iter_mut().for_each(|v| *v += gv));
        }
        Op::SumAxis { a, outer, axis_len, inner } => {
            let (outer, axis_len, inner) = (*outer, *axis_len, *inner);
            accumulate(grads, *a, outer * axis_len * inner, |acc| {
                for o in 0..outer {
                    for j in 0..axis_len {
                        for i in 0..inner {
                            acc[(o * axis_len + j) * inner + i] += g[o * inner + i];
                        }
                    }
                }
            });
        }
        Op::L2Normalize { a, outer, axis_len, inner, norms } => {
            let (outer, axis_len, inner) = (*outer, *axis_len, *inner);
            let y = node.value.data();
            accumulate(grads, *a, y.len(), |acc| {
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * axis_len + j) * inner + i;
                        let dot: f64 = (0..axis_len).map(|j| y[idx(j)] * g[idx(j)]).sum();
                        let norm = norms[o * inner + i];
                        for j in 0..axis_len {
                            acc[idx(j)] += (g[idx(j)] - y[idx(j)] * dot) / norm;
                        }
                    }
                }
            });
        }
        Op::Concat { parts, outer, inner } => {
            let total: usize = parts.iter().map(|&(_, w)| w).sum();
            let mut offset = 0;
            for &(p, width) in parts {
                if needs(p) {
                    accumulate(grads, p, outer * width * inner, |acc| {
                        for o in 0..*outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + width) * inner];
                            let dst = &mut acc[o * width * inner..(o + 1) * width * inner];
                            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                        }
                    });
                }
                offset += width;
            }
        }
        Op::Slice { a, outer, axis_len, inner, start, end } => {
            let width = end - start;
            accumulate(grads, *a, outer * axis_len * inner, |acc| {
                for o in 0..*outer {
                    let dst = &mut acc[(o * axis_len + start) * inner..(o * axis_len + end) * inner];
                    let src = &g[o * width * inner..(o + 1) * width * inner];
                    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                }
            });
        }
        Op::Broadcast(a, map) => {
            accumulate(grads, *a, len_of(*a), |acc| {
                map.iter().zip(g).for_each(|(&i, &v)| acc[i] += v);
            });
        }
        Op::Transpose { a, rows, cols } => {
            let (rows, cols) = (*rows, *cols);
            accumulate(grads, *a, rows * cols, |acc| {
                for r in 0..rows {
                    for c in 0..cols {
                        acc[r * cols + c] += g[c * rows + r];
                    }
                }
            });
        }
        Op::LogSoftmax { a, cols } => {
            let cols = *cols;
            let y = node.value.data();
            accumulate(grads, *a, y.len(), |acc| {
                for (r, (yr, gr)) in y.chunks(cols).zip(g.chunks(cols)).enumerate() {
                    let gsum: f64 = gr.iter().sum();
                    for c in 0..cols {
                        acc[r * cols + c] += gr[c] - yr[c].exp() * gsum;
                    }
                }
            });
        }
    }
}

/// Elementwise unary backward: `dx = g * f(x, y)`.
fn unary(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    a: usize,
    g: &[f64],
    f: impl Fn(f64) -> f64,
) {
    let x = nodes[a].value.data();
    accumulate(grads, a, x.len(), |acc| {
        for ((acc, &gv), &xv) in acc.iter_mut().zip(g).zip(x) {
            *acc += gv * f(xv);
        }
    });
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Borrow of the forward value.
    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    /// Owned copy of the forward value.
    pub fn to_tensor(&self) -> Tensor {
        self.value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Accumulated gradient, shaped like the value.
    pub fn grad(&self) -> Option<Tensor> {
        let nodes = self.tape.nodes.borrow();
        let node = &nodes[self.id];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    /// Scalar value of a single-element node.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    fn same_tape(&self, other: &Var<'_>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "operands recorded on different tapes"
        );
    }

    fn binary(
        self,
        other: Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        make: impl FnOnce(usize, usize, Option<Vec<usize>>, Option<Vec<usize>>) -> Op,
    ) -> Result<Var<'t>, TensorError> {
        self.same_tape(&other);
        let (value, ma, mb) = {
            let a = self.value();
            let b = other.value();
            let out_shape = broadcast_shapes(a.shape(), b.shape()).ok_or_else(|| {
                TensorError::ShapeMismatch {
                    op: name,
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                }
            })?;
            let ma = (a.shape() != out_shape.as_slice())
                .then(|| broadcast_index_map(a.shape(), &out_shape));
            let mb = (b.shape() != out_shape.as_slice())
                .then(|| broadcast_index_map(b.shape(), &out_shape));
            let n: usize = out_shape.iter().product();
            let (ad, bd) = (a.data(), b.data());
            let data: Vec<f64> = (0..n)
                .map(|i| {
                    let x = ad[ma.as_ref().map_or(i, |m| m[i])];
                    let y = bd[mb.as_ref().map_or(i, |m| m[i])];
                    f(x, y)
                })
                .collect();
            (Tensor::new(out_shape, data)?, ma, mb)
        };
        let rg = self.tape.requires(&[self.id, other.id]);
        Ok(self.tape.push(value, make(self.id, other.id, ma, mb), rg))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.binary(other, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.binary(other, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.binary(other, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.same_tape(&other);
        let (value, m, k, n) = {
            let a = self.value();
            let b = other.value();
            if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(TensorError::ShapeMismatch {
                    op: "matmul",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let mut out = vec![0.0; m * n];
            matmul_nn(a.data(), b.data(), &mut out, m, k, n);
            (Tensor::new(vec![m, n], out)?, m, k, n)
        };
        let rg = self.tape.requires(&[self.id, other.id]);
        Ok(self.tape.push(value, Op::MatMul { a: self.id, b: other.id, m, k, n }, rg))
    }

    fn unary(self, f: impl Fn(f64) -> f64, op: Op) -> Var<'t> {
        let value = self.value().map(f);
        let rg = self.requires_grad();
        self.tape.push(value, op, rg)
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(|x| x.max(0.0), Op::Relu(self.id))
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'t> {
        self.unary(move |x| if x > 0.0 { x } else { slope * x }, Op::LeakyRelu(self.id, slope))
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(f64::tanh, Op::Tanh(self.id))
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(f64::exp, Op::Exp(self.id))
    }

    pub fn log(self) -> Result<Var<'t>, TensorError> {
        if let Some(&bad) = self.value().data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
            return Err(TensorError::Domain { op: "log", value: bad });
        }
        Ok(self.unary(f64::ln, Op::Log(self.id)))
    }

    pub fn softplus(self) -> Var<'t> {
        self.unary(softplus, Op::Softplus(self.id))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(move |x| c * x, Op::Scale(self.id, c))
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(self) -> Var<'t> {
        let value = Tensor::scalar(self.value().data().iter().sum());
        let rg = self.requires_grad();
        self.tape.push(value, Op::Sum(self.id), rg)
    }

    pub fn mean(self) -> Result<Var<'t>, TensorError> {
        let n = self.value().len();
        if n == 0 {
            return Err(TensorError::Empty("mean"));
        }
        let value = Tensor::scalar(self.value().data().iter().sum::<f64>() / n as f64);
        let rg = self.requires_grad();
        Ok(self.tape.push(value, Op::Mean(self.id), rg))
    }

    fn check_axis(&self, op: &'static str, axis: usize) -> Result<Vec<usize>, TensorError> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(TensorError::Axis { op, axis, shape });
        }
        Ok(shape)
    }

    /// Sums over `axis`, removing it from the shape.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>, TensorError> {
        let shape = self.check_axis("sum_axis", axis)?;
        let (outer, axis_len, inner) = axis_split(&shape, axis);
        let value = {
            let x = self.value();
            let x = x.data();
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for j in 0..axis_len {
                    for i in 0..inner {
                        out[o * inner + i] += x[(o * axis_len + j) * inner + i];
                    }
                }
            }
            let mut out_shape = shape.clone();
            out_shape.remove(axis);
            Tensor::new(out_shape, out)?
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(value, Op::SumAxis { a: self.id, outer, axis_len, inner }, rg))
    }

    /// Scales every fibre along `axis` to unit Euclidean norm.
    pub fn l2_normalize(self, axis: usize) -> Result<Var<'t>, TensorError> {
        let shape = self.check_axis("l2_normalize", axis)?;
        let (outer, axis_len, inner) = axis_split(&shape, axis);
        let (value, norms) = {
            let x = self.value();
            let x = x.data();
            let mut out = vec![0.0; x.len()];
            let mut norms = vec![0.0; outer * inner];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |j: usize| (o * axis_len + j) * inner + i;
                    let norm = (0..axis_len).map(|j| x[idx(j)] * x[idx(j)]).sum::<f64>().sqrt();
                    if norm <= 0.0 || !norm.is_finite() {
                        return Err(TensorError::Domain { op: "l2_normalize", value: norm });
                    }
                    norms[o * inner + i] = norm;
                    for j in 0..axis_len {
                        out[idx(j)] = x[idx(j)] / norm;
                    }
                }
            }
            (Tensor::new(shape, out)?, norms)
        };
        let rg = self.requires_grad();
        Ok(self
            .tape
            .push(value, Op::L2Normalize { a: self.id, outer, axis_len, inner, norms }, rg))
    }

    /// Row-wise log-softmax of a 2-D tensor.
    pub fn log_softmax(self) -> Result<Var<'t>, TensorError> {
        let shape = self.shape();
        if shape.len() != 2 || shape[1] == 0 {
            return Err(TensorError::Axis { op: "log_softmax", axis: 1, shape });
        }
        let cols = shape[1];
        let value = {
            let x = self.value();
            let mut out = Vec::with_capacity(x.len());
            for row in x.data().chunks(cols) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                out.extend(row.iter().map(|v| v - lse));
            }
            Tensor::new(shape, out)?
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(value, Op::LogSoftmax { a: self.id, cols }, rg))
    }

    /// Matrix transpose of a 2-D tensor.
    pub fn transpose(self) -> Result<Var<'t>, TensorError> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(TensorError::Axis { op: "transpose", axis: 1, shape });
        }
        let (rows, cols) = (shape[0], shape[1]);
        let value = {
            let x = self.value();
            let x = x.data();
            let mut out = vec![0.0; rows * cols];
            for r in 0..rows {
                for c in 0..cols {
                    out[c * rows + r] = x[r * cols + c];
                }
            }
            Tensor::new(vec![cols, rows], out)?
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(value, Op::Transpose { a: self.id, rows, cols }, rg))
    }

    /// Half-open range `[start, end)` along `axis`, copied.
    pub fn slice(self, axis: usize, start: usize, end: usize) -> Result<Var<'t>, TensorError> {
        let shape = self.check_axis("slice", axis)?;
        if start > end || end > shape[axis] {
            return Err(TensorError::Range { op: "slice", start, end, shape });
        }
        let (outer, axis_len, inner) = axis_split(&shape, axis);
        let value = {
            let x = self.value();
            let x = x.data();
            let mut out = Vec::with_capacity(outer * (end - start) * inner);
            for o in 0..outer {
                out.extend_from_slice(&x[(o * axis_len + start) * inner..(o * axis_len + end) * inner]);
            }
            let mut out_shape = shape.clone();
            out_shape[axis] = end - start;
            Tensor::new(out_shape, out)?
        };
        let rg = self.requires_grad();
        Ok(self
            .tape
            .push(value, Op::Slice { a: self.id, outer, axis_len, inner, start, end }, rg))
    }

    pub fn broadcast_to(self, shape: &[usize]) -> Result<Var<'t>, TensorError> {
        let src = self.shape();
        match broadcast_shapes(&src, shape) {
            Some(s) if s == shape => {}
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "broadcast",
                    lhs: src,
                    rhs: shape.to_vec(),
                })
            }
        }
        let map = broadcast_index_map(&src, shape);
        let value = {
            let x = self.value();
            let data = map.iter().map(|&i| x.data()[i]).collect();
            Tensor::new(shape.to_vec(), data)?
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(value, Op::Broadcast(self.id, map), rg))
    }
}

/// Joins `parts` along `axis`; all other extents must agree.
pub fn concat<'t>(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>, TensorError> {
    let first = parts.first().ok_or(TensorError::Empty("concat"))?;
    let tape = first.tape;
    let base = first.check_axis("concat", axis)?;
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        first.same_tape(p);
        let s = p.shape();
        let compatible = s.len() == base.len()
            && s.iter().zip(&base).enumerate().all(|(d, (x, y))| d == axis || x == y);
        if !compatible {
            return Err(TensorError::ShapeMismatch { op: "concat", lhs: base, rhs: s });
        }
        widths.push(s[axis]);
    }
    let (outer, _, inner) = axis_split(&base, axis);
    let total: usize = widths.iter().sum();
    let value = {
        let mut out = Vec::with_capacity(outer * total * inner);
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        for o in 0..outer {
            for (v, &w) in values.iter().zip(&widths) {
                out.extend_from_slice(&v.data()[o * w * inner..(o + 1) * w * inner]);
            }
        }
        let mut shape = base.clone();
        shape[axis] = total;
        Tensor::new(shape, out)?
    };
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    let rg = tape.requires(&ids);
    let parts = ids.into_iter().zip(widths).collect();
    Ok(tape.push(value, Op::Concat { parts, outer, inner }, rg))
}
