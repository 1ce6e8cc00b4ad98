//! Reverse-mode automatic differentiation on a flat Wengert tape.
//!
//! Operations execute eagerly: each call validates shapes, computes the output
//! value, and appends one node to the tape. Node ids are indices into the node
//! list, so parents always precede children and `backward` is a single reverse
//! sweep that visits every node exactly once. A tape is built fresh for every
//! forward evaluation; ids must not be carried across rebuilds (doing so is
//! caught as a stale-node error when the index is out of range).
//!
//! Everything is `f64`. Shapes are limited to scalars, vectors and matrices;
//! the only broadcast is matrix + row-vector (bias addition).

use std::fmt;

use crate::error::{Error, Result};

// ---------------------------------------------------------------------------
// Shapes and tensors
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Scalar,
    Vector(usize),
    Matrix(usize, usize),
}

impl Shape {
    /// Number of elements.
    pub fn len(&self) -> usize {
        match *self {
            Shape::Scalar => 1,
            Shape::Vector(n) => n,
            Shape::Matrix(r, c) => r * c,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Shape::Scalar => write!(f, "scalar"),
            Shape::Vector(n) => write!(f, "vector[{n}]"),
            Shape::Matrix(r, c) => write!(f, "matrix[{r}x{c}]"),
        }
    }
}

/// Dense row-major value container used for node values and gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    data: Vec<f64>,
    shape: Shape,
}

impl Tensor {
    pub fn scalar(v: f64) -> Self {
        Tensor {
            data: vec![v],
            shape: Shape::Scalar,
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        let shape = Shape::Vector(data.len());
        Tensor { data, shape }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::InvalidArg {
                ctx: "tensor",
                msg: format!("matrix {rows}x{cols} needs {} values, got {}", rows * cols, data.len()),
            });
        }
        Ok(Tensor {
            data,
            shape: Shape::Matrix(rows, cols),
        })
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            data: vec![0.0; shape.len()],
            shape,
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> Result<f64> {
        if self.shape != Shape::Scalar {
            return Err(Error::InvalidArg {
                ctx: "tensor",
                msg: format!("item() on non-scalar {}", self.shape),
            });
        }
        Ok(self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

// ---------------------------------------------------------------------------
// Tape nodes
// ---------------------------------------------------------------------------

/// Index of a node on the tape that produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf { trainable: bool },
    Add,
    /// Matrix + row-vector broadcast (bias addition).
    AddRow,
    /// Multiplication by a compile-time constant.
    Scale(f64),
    /// Scalar node times tensor node; parents are `[scalar, tensor]`.
    Mul,
    /// Elementwise product of two same-shape tensors.
    ElemMul,
    MatMul,
    Relu,
    Tanh,
    Abs,
    Log,
    Exp,
    /// Rowwise on matrices, whole-vector on vectors.
    Softmax,
    Sum,
    Mean,
    /// Extracts one element (flat index) as a scalar.
    Select(usize),
    /// Fused softmax cross-entropy against integer labels, mean over rows.
    CrossEntropy(Vec<usize>),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    parents: Vec<NodeId>,
    value: Tensor,
    grad: Vec<f64>,
}

/// The tape itself. See the module docs for the usage contract.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, parents: Vec<NodeId>, value: Tensor) -> NodeId {
        let grad = vec![0.0; value.shape().len()];
        self.nodes.push(Node {
            op,
            parents,
            value,
            grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn node(&self, id: NodeId) -> Result<&Node> {
        self.nodes.get(id.0).ok_or(Error::StaleNode {
            index: id.0,
            len: self.nodes.len(),
        })
    }

    /// Value computed at `id`.
    pub fn value(&self, id: NodeId) -> Result<&Tensor> {
        Ok(&self.node(id)?.value)
    }

    /// Gradient accumulated at `id` by the last `backward` call.
    pub fn grad(&self, id: NodeId) -> Result<&[f64]> {
        Ok(&self.node(id)?.grad)
    }

    // ----- Leaves -----

    /// Trainable leaf: receives gradient in `backward`.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf { trainable: true }, Vec::new(), value)
    }

    /// Non-trainable leaf: `backward` leaves its gradient untouched.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf { trainable: false }, Vec::new(), value)
    }

    // ----- Elementwise arithmetic -----

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.node(a)?.value.shape(), self.node(b)?.value.shape());
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: sa,
                rhs: sb,
            });
        }
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(Op::Add, vec![a, b], Tensor { data, shape: sa }))
    }

    /// Adds a row vector to every row of a matrix (bias broadcast).
    pub fn add_row(&mut self, m: NodeId, v: NodeId) -> Result<NodeId> {
        let (sm, sv) = (self.node(m)?.value.shape(), self.node(v)?.value.shape());
        let (rows, cols) = match sm {
            Shape::Matrix(r, c) => (r, c),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "add_row",
                    lhs: sm,
                    rhs: sv,
                })
            }
        };
        if sv != Shape::Vector(cols) {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs: sm,
                rhs: sv,
            });
        }
        let mv = self.nodes[m.0].value.data();
        let vv = self.nodes[v.0].value.data();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(mv[r * cols + c] + vv[c]);
            }
        }
        Ok(self.push(Op::AddRow, vec![m, v], Tensor { data, shape: sm }))
    }

    /// Multiplies by a constant factor.
    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        let shape = self.node(a)?.value.shape();
        let data = self.nodes[a.0].value.data().iter().map(|x| x * factor).collect();
        Ok(self.push(Op::Scale(factor), vec![a], Tensor { data, shape }))
    }

    /// Scalar node times tensor node.
    pub fn mul(&mut self, scalar: NodeId, tensor: NodeId) -> Result<NodeId> {
        let ss = self.node(scalar)?.value.shape();
        let st = self.node(tensor)?.value.shape();
        if ss != Shape::Scalar {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: ss,
                rhs: st,
            });
        }
        let s = self.nodes[scalar.0].value.data()[0];
        let data = self.nodes[tensor.0].value.data().iter().map(|x| s * x).collect();
        Ok(self.push(Op::Mul, vec![scalar, tensor], Tensor { data, shape: st }))
    }

    pub fn elem_mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.node(a)?.value.shape(), self.node(b)?.value.shape());
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op: "elem_mul",
                lhs: sa,
                rhs: sb,
            });
        }
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(Op::ElemMul, vec![a, b], Tensor { data, shape: sa }))
    }

    // ----- Linear algebra -----

    /// Matrix-matrix or matrix-vector product.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.node(a)?.value.shape(), self.node(b)?.value.shape());
        match (sa, sb) {
            (Shape::Matrix(r, k), Shape::Matrix(k2, c)) if k == k2 => {
                let av = self.nodes[a.0].value.data();
                let bv = self.nodes[b.0].value.data();
                let mut data = vec![0.0; r * c];
                for i in 0..r {
                    for kk in 0..k {
                        let aik = av[i * k + kk];
                        if aik == 0.0 {
                            continue;
                        }
                        for j in 0..c {
                            data[i * c + j] += aik * bv[kk * c + j];
                        }
                    }
                }
                Ok(self.push(Op::MatMul, vec![a, b], Tensor {
                    data,
                    shape: Shape::Matrix(r, c),
                }))
            }
            (Shape::Matrix(r, k), Shape::Vector(k2)) if k == k2 => {
                let av = self.nodes[a.0].value.data();
                let bv = self.nodes[b.0].value.data();
                let mut data = vec![0.0; r];
                for i in 0..r {
                    let mut acc = 0.0;
                    for kk in 0..k {
                        acc += av[i * k + kk] * bv[kk];
                    }
                    data[i] = acc;
                }
                Ok(self.push(Op::MatMul, vec![a, b], Tensor {
                    data,
                    shape: Shape::Vector(r),
                }))
            }
            _ => Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            }),
        }
    }

    // ----- Unary elementwise -----

    fn unary(&mut self, a: NodeId, op: Op, f: impl Fn(f64) -> f64) -> Result<NodeId> {
        let shape = self.node(a)?.value.shape();
        let data = self.nodes[a.0].value.data().iter().map(|x| f(*x)).collect();
        Ok(self.push(op, vec![a], Tensor { data, shape }))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Relu, |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Tanh, f64::tanh)
    }

    pub fn abs(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Abs, f64::abs)
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Log, f64::ln)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Exp, f64::exp)
    }

    // ----- Softmax and reductions -----

    /// Numerically stable softmax: rowwise on matrices, whole on vectors.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let shape = self.node(a)?.value.shape();
        let (rows, cols) = match shape {
            Shape::Vector(n) => (1, n),
            Shape::Matrix(r, c) => (r, c),
            Shape::Scalar => {
                return Err(Error::ShapeMismatch {
                    op: "softmax",
                    lhs: shape,
                    rhs: shape,
                })
            }
        };
        if cols == 0 {
            return Err(Error::EmptyData { ctx: "softmax" });
        }
        let src = self.nodes[a.0].value.data();
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for (j, x) in row.iter().enumerate() {
                let e = (x - max).exp();
                data[r * cols + j] = e;
                denom += e;
            }
            for j in 0..cols {
                data[r * cols + j] /= denom;
            }
        }
        Ok(self.push(Op::Softmax, vec![a], Tensor { data, shape }))
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.node(a)?;
        let s: f64 = self.nodes[a.0].value.data().iter().sum();
        Ok(self.push(Op::Sum, vec![a], Tensor::scalar(s)))
    }

    /// Mean of all elements, as a scalar node.
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.node(a)?.value.shape().len();
        if n == 0 {
            return Err(Error::EmptyData { ctx: "mean" });
        }
        let s: f64 = self.nodes[a.0].value.data().iter().sum();
        Ok(self.push(Op::Mean, vec![a], Tensor::scalar(s / n as f64)))
    }

    /// Extracts the element at flat index `i` as a scalar node.
    pub fn select(&mut self, a: NodeId, i: usize) -> Result<NodeId> {
        let n = self.node(a)?.value.shape().len();
        if i >= n {
            return Err(Error::InvalidArg {
                ctx: "select",
                msg: format!("index {i} out of range for {} elements", n),
            });
        }
        let v = self.nodes[a.0].value.data()[i];
        Ok(self.push(Op::Select(i), vec![a], Tensor::scalar(v)))
    }

    /// Softmax cross-entropy between logit rows and integer labels, averaged
    /// over rows. Computed in log-sum-exp form, so the loss is finite for all
    /// finite logits.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let shape = self.node(logits)?.value.shape();
        let (rows, cols) = match shape {
            Shape::Matrix(r, c) => (r, c),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "cross_entropy",
                    lhs: shape,
                    rhs: Shape::Vector(labels.len()),
                })
            }
        };
        if labels.len() != rows || rows == 0 {
            return Err(Error::InvalidArg {
                ctx: "cross_entropy",
                msg: format!("{rows} logit rows vs {} labels", labels.len()),
            });
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= cols) {
            return Err(Error::InvalidArg {
                ctx: "cross_entropy",
                msg: format!("label {bad} out of range for {cols} classes"),
            });
        }
        let src = self.nodes[logits.0].value.data();
        let mut total = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = &src[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[label];
        }
        let loss = total / rows as f64;
        Ok(self.push(
            Op::CrossEntropy(labels.to_vec()),
            vec![logits],
            Tensor::scalar(loss),
        ))
    }

    // ----- Forward / backward -----

    /// Reads the value of a scalar root (the "forward result").
    pub fn forward_scalar(&self, root: NodeId) -> Result<f64> {
        let node = self.node(root)?;
        if node.value.shape() != Shape::Scalar {
            return Err(Error::NonScalarRoot {
                index: root.0,
                shape: node.value.shape(),
            });
        }
        Ok(node.value.data()[0])
    }

    /// Reverse sweep from a scalar root. Clears all gradients, seeds the root
    /// with 1, then walks the tape once in reverse topological order. After it
    /// returns, `grad` is populated for every node on a path from a trainable
    /// leaf to the root; non-trainable leaves are left untouched (zero).
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        let node = self.node(root)?;
        if node.value.shape() != Shape::Scalar {
            return Err(Error::NonScalarRoot {
                index: root.0,
                shape: node.value.shape(),
            });
        }
        for n in &mut self.nodes {
            for g in &mut n.grad {
                *g = 0.0;
            }
        }
        self.nodes[root.0].grad[0] = 1.0;

        for i in (0..=root.0).rev() {
            // Split off the current node's gradient to appease the borrow
            // checker while accumulating into (earlier) parents.
            let (head, tail) = self.nodes.split_at_mut(i);
            let node = &tail[0];
            match &node.op {
                Op::Leaf { .. } => {}
                Op::Add => {
                    let [a, b] = [node.parents[0], node.parents[1]];
                    accumulate(&mut head[a.0], &node.grad, |g, _| g);
                    accumulate(&mut head[b.0], &node.grad, |g, _| g);
                }
                Op::AddRow => {
                    let [m, v] = [node.parents[0], node.parents[1]];
                    let cols = match head[v.0].value.shape() {
                        Shape::Vector(c) => c,
                        _ => unreachable!("add_row validated shapes"),
                    };
                    accumulate(&mut head[m.0], &node.grad, |g, _| g);
                    if is_trainable_path(&head[v.0]) {
                        for (j, g) in node.grad.iter().enumerate() {
                            head[v.0].grad[j % cols] += g;
                        }
                    }
                }
                Op::Scale(f) => {
                    let a = node.parents[0];
                    let f = *f;
                    accumulate(&mut head[a.0], &node.grad, |g, _| f * g);
                }
                Op::Mul => {
                    let [s, t] = [node.parents[0], node.parents[1]];
                    let sv = head[s.0].value.data()[0];
                    if is_trainable_path(&head[s.0]) {
                        let mut acc = 0.0;
                        for (g, tv) in node.grad.iter().zip(head[t.0].value.data()) {
                            acc += g * tv;
                        }
                        head[s.0].grad[0] += acc;
                    }
                    accumulate(&mut head[t.0], &node.grad, |g, _| sv * g);
                }
                Op::ElemMul => {
                    let [a, b] = [node.parents[0], node.parents[1]];
                    if is_trainable_path(&head[a.0]) {
                        let bd: Vec<f64> = head[b.0].value.data().to_vec();
                        for (j, g) in node.grad.iter().enumerate() {
                            head[a.0].grad[j] += g * bd[j];
                        }
                    }
                    if is_trainable_path(&head[b.0]) {
                        let ad: Vec<f64> = head[a.0].value.data().to_vec();
                        for (j, g) in node.grad.iter().enumerate() {
                            head[b.0].grad[j] += g * ad[j];
                        }
                    }
                }
                Op::MatMul => {
                    let [a, b] = [node.parents[0], node.parents[1]];
                    let sa = head[a.0].value.shape();
                    let sb = head[b.0].value.shape();
                    match (sa, sb) {
                        (Shape::Matrix(r, k), Shape::Matrix(_, c)) => {
                            if is_trainable_path(&head[a.0]) {
                                let bd: Vec<f64> = head[b.0].value.data().to_vec();
                                for i in 0..r {
                                    for kk in 0..k {
                                        let mut acc = 0.0;
                                        for j in 0..c {
                                            acc += node.grad[i * c + j] * bd[kk * c + j];
                                        }
                                        head[a.0].grad[i * k + kk] += acc;
                                    }
                                }
                            }
                            if is_trainable_path(&head[b.0]) {
                                let ad: Vec<f64> = head[a.0].value.data().to_vec();
                                for kk in 0..k {
                                    for j in 0..c {
                                        let mut acc = 0.0;
                                        for i in 0..r {
                                            acc += ad[i * k + kk] * node.grad[i * c + j];
                                        }
                                        head[b.0].grad[kk * c + j] += acc;
                                    }
                                }
                            }
                        }
                        (Shape::Matrix(r, k), Shape::Vector(_)) => {
                            if is_trainable_path(&head[a.0]) {
                                let bd: Vec<f64> = head[b.0].value.data().to_vec();
                                for i in 0..r {
                                    for kk in 0..k {
                                        head[a.0].grad[i * k + kk] += node.grad[i] * bd[kk];
                                    }
                                }
                            }
                            if is_trainable_path(&head[b.0]) {
                                let ad: Vec<f64> = head[a.0].value.data().to_vec();
                                for kk in 0..k {
                                    let mut acc = 0.0;
                                    for i in 0..r {
                                        acc += ad[i * k + kk] * node.grad[i];
                                    }
                                    head[b.0].grad[kk] += acc;
                                }
                            }
                        }
                        _ => unreachable!("matmul validated shapes"),
                    }
                }
                Op::Relu => {
                    let a = node.parents[0];
                    if is_trainable_path(&head[a.0]) {
                        let xs: Vec<f64> = head[a.0].value.data().to_vec();
                        for (j, g) in node.grad.iter().enumerate() {
                            if xs[j] > 0.0 {
                                head[a.0].grad[j] += g;
                            }
                        }
                    }
                }
                Op::Tanh => {
                    let a = node.parents[0];
                    let ys = node.value.data();
                    accumulate_indexed(&mut head[a.0], &node.grad, |j, g| g * (1.0 - ys[j] * ys[j]));
                }
                Op::Abs => {
                    let a = node.parents[0];
                    if is_trainable_path(&head[a.0]) {
                        let xs: Vec<f64> = head[a.0].value.data().to_vec();
                        for (j, g) in node.grad.iter().enumerate() {
                            // Subgradient 0 at the kink.
                            head[a.0].grad[j] += g * if xs[j] > 0.0 {
                                1.0
                            } else if xs[j] < 0.0 {
                                -1.0
                            } else {
                                0.0
                            };
                        }
                    }
                }
                Op::Log => {
                    let a = node.parents[0];
                    if is_trainable_path(&head[a.0]) {
                        let xs: Vec<f64> = head[a.0].value.data().to_vec();
                        for (j, g) in node.grad.iter().enumerate() {
                            head[a.0].grad[j] += g / xs[j];
                        }
                    }
                }
                Op::Exp => {
                    let a = node.parents[0];
                    let ys = node.value.data();
                    accumulate_indexed(&mut head[a.0], &node.grad, |j, g| g * ys[j]);
                }
                Op::Softmax => {
                    let a = node.parents[0];
                    if is_trainable_path(&head[a.0]) {
                        let (rows, cols) = match node.value.shape() {
                            Shape::Vector(n) => (1, n),
                            Shape::Matrix(r, c) => (r, c),
                            Shape::Scalar => unreachable!("softmax validated shapes"),
                        };
                        let ys = node.value.data();
                        for r in 0..rows {
                            let mut dot = 0.0;
                            for j in 0..cols {
                                dot += node.grad[r * cols + j] * ys[r * cols + j];
                            }
                            for j in 0..cols {
                                let idx = r * cols + j;
                                head[a.0].grad[idx] += ys[idx] * (node.grad[idx] - dot);
                            }
                        }
                    }
                }
                Op::Sum => {
                    let a = node.parents[0];
                    let g = node.grad[0];
                    if is_trainable_path(&head[a.0]) {
                        for slot in head[a.0].grad.iter_mut() {
                            *slot += g;
                        }
                    }
                }
                Op::Mean => {
                    let a = node.parents[0];
                    let n = head[a.0].value.shape().len() as f64;
                    let g = node.grad[0] / n;
                    if is_trainable_path(&head[a.0]) {
                        for slot in head[a.0].grad.iter_mut() {
                            *slot += g;
                        }
                    }
                }
                Op::Select(idx) => {
                    let a = node.parents[0];
                    let idx = *idx;
                    if is_trainable_path(&head[a.0]) {
                        head[a.0].grad[idx] += node.grad[0];
                    }
                }
                Op::CrossEntropy(labels) => {
                    let a = node.parents[0];
                    if is_trainable_path(&head[a.0]) {
                        let (rows, cols) = match head[a.0].value.shape() {
                            Shape::Matrix(r, c) => (r, c),
                            _ => unreachable!("cross_entropy validated shapes"),
                        };
                        let g = node.grad[0] / rows as f64;
                        let xs: Vec<f64> = head[a.0].value.data().to_vec();
                        for (r, &label) in labels.iter().enumerate() {
                            let row = &xs[r * cols..(r + 1) * cols];
                            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                            let denom: f64 = row.iter().map(|x| (x - max).exp()).sum();
                            for j in 0..cols {
                                let p = (row[j] - max).exp() / denom;
                                let target = if j == label { 1.0 } else { 0.0 };
                                head[a.0].grad[r * cols + j] += g * (p - target);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// True when gradient should be accumulated into this node: everything except
/// non-trainable leaves (constants), which backward leaves untouched.
fn is_trainable_path(node: &Node) -> bool {
    !matches!(node.op, Op::Leaf { trainable: false })
}

fn accumulate(parent: &mut Node, grad: &[f64], f: impl Fn(f64, usize) -> f64) {
    if !is_trainable_path(parent) {
        return;
    }
    for (j, g) in grad.iter().enumerate() {
        parent.grad[j] += f(*g, j);
    }
}

fn accumulate_indexed(parent: &mut Node, grad: &[f64], f: impl Fn(usize, f64) -> f64) {
    if !is_trainable_path(parent) {
        return;
    }
    for (j, g) in grad.iter().enumerate() {
        parent.grad[j] += f(j, *g);
    }
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    /// Straight-line reimplementation of a two-layer net, no tape involved:
    /// relu(x W1 + b1) W2 + b2 -> mean softmax cross-entropy.
    fn straight_line_mlp(
        x: &[f64],
        (bsz, din): (usize, usize),
        w1: &[f64],
        b1: &[f64],
        h: usize,
        w2: &[f64],
        b2: &[f64],
        classes: usize,
        labels: &[usize],
    ) -> f64 {
        let mut total = 0.0;
        for r in 0..bsz {
            let mut hid = vec![0.0; h];
            for j in 0..h {
                let mut acc = b1[j];
                for k in 0..din {
                    acc += x[r * din + k] * w1[k * h + j];
                }
                hid[j] = acc.max(0.0);
            }
            let mut logits = vec![0.0; classes];
            for j in 0..classes {
                let mut acc = b2[j];
                for k in 0..h {
                    acc += hid[k] * w2[k * classes + j];
                }
                logits[j] = acc;
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - logits[labels[r]];
        }
        total / bsz as f64
    }

    #[test]
    fn mlp_forward_matches_straight_line_oracle() {
        let (bsz, din, h, classes) = (3, 2, 4, 3);
        // Fixed pseudo-random values; any values exercise the same code path.
        let x: Vec<f64> = (0..bsz * din).map(|i| (i as f64 * 0.7).sin()).collect();
        let w1: Vec<f64> = (0..din * h).map(|i| (i as f64 * 1.3).cos() * 0.5).collect();
        let b1: Vec<f64> = (0..h).map(|i| 0.1 * i as f64 - 0.2).collect();
        let w2: Vec<f64> = (0..h * classes).map(|i| (i as f64 * 0.9).sin() * 0.5).collect();
        let b2: Vec<f64> = (0..classes).map(|i| 0.05 * i as f64).collect();
        let labels = vec![0, 2, 1];

        let mut t = Tape::new();
        let xn = t.constant(Tensor::matrix(bsz, din, x.clone()).unwrap());
        let w1n = t.leaf(Tensor::matrix(din, h, w1.clone()).unwrap());
        let b1n = t.leaf(Tensor::vector(b1.clone()));
        let w2n = t.leaf(Tensor::matrix(h, classes, w2.clone()).unwrap());
        let b2n = t.leaf(Tensor::vector(b2.clone()));
        let z1 = t.matmul(xn, w1n).unwrap();
        let z1 = t.add_row(z1, b1n).unwrap();
        let a1 = t.relu(z1).unwrap();
        let z2 = t.matmul(a1, w2n).unwrap();
        let z2 = t.add_row(z2, b2n).unwrap();
        let loss = t.cross_entropy(z2, &labels).unwrap();

        let expected = straight_line_mlp(&x, (bsz, din), &w1, &b1, h, &w2, &b2, classes, &labels);
        assert_close(t.forward_scalar(loss).unwrap(), expected, 1e-12);
    }

    #[test]
    fn cross_entropy_gradient_at_uniform_logits() {
        // One row of three equal logits, true class 0: grad = p - onehot.
        let mut t = Tape::new();
        let logits = t.leaf(Tensor::matrix(1, 3, vec![0.0, 0.0, 0.0]).unwrap());
        let loss = t.cross_entropy(logits, &[0]).unwrap();
        t.backward(loss).unwrap();
        let g = t.grad(logits).unwrap();
        assert_close(g[0], -2.0 / 3.0, 1e-12);
        assert_close(g[1], 1.0 / 3.0, 1e-12);
        assert_close(g[2], 1.0 / 3.0, 1e-12);
        // Loss itself is ln 3 at uniform logits.
        assert_close(t.forward_scalar(loss).unwrap(), 3.0_f64.ln(), 1e-12);
    }

    #[test]
    fn softmax_of_log_integers_then_weighted_sum() {
        // softmax([ln 1, ln 2, ln 3]) = [1/6, 2/6, 3/6]; dot with [1,2,3] = 7/3.
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0_f64.ln(), 2.0_f64.ln(), 3.0_f64.ln()]));
        let sm = t.softmax(x).unwrap();
        let v = t.value(sm).unwrap().data().to_vec();
        assert_close(v[0], 1.0 / 6.0, 1e-12);
        assert_close(v[1], 2.0 / 6.0, 1e-12);
        assert_close(v[2], 3.0 / 6.0, 1e-12);
        let w = t.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let prod = t.elem_mul(sm, w).unwrap();
        let dot = t.sum(prod).unwrap();
        assert_close(t.forward_scalar(dot).unwrap(), (1.0 + 4.0 + 9.0) / 6.0, 1e-12);
    }

    #[test]
    fn elementwise_square_gradient_is_two_x() {
        let xs = vec![-1.5, 0.25, 3.0];
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(xs.clone()));
        let sq = t.elem_mul(x, x).unwrap();
        let s = t.sum(sq).unwrap();
        t.backward(s).unwrap();
        let g = t.grad(x).unwrap();
        for (gi, xi) in g.iter().zip(&xs) {
            assert_close(*gi, 2.0 * xi, 1e-12);
        }
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        // grad(a*L1 + b*L2) == a*grad(L1) + b*grad(L2), shared input leaf.
        let xs = vec![0.3, -0.7, 1.1, 0.4];
        let (a, b) = (2.5, -0.75);

        let build = |t: &mut Tape, x: NodeId| -> (NodeId, NodeId) {
            let e = t.exp(x).unwrap();
            let l1 = t.sum(e).unwrap();
            let sq = t.elem_mul(x, x).unwrap();
            let l2 = t.mean(sq).unwrap();
            (l1, l2)
        };

        let mut t1 = Tape::new();
        let x1 = t1.leaf(Tensor::vector(xs.clone()));
        let (l1, _) = build(&mut t1, x1);
        t1.backward(l1).unwrap();
        let g1 = t1.grad(x1).unwrap().to_vec();

        let mut t2 = Tape::new();
        let x2 = t2.leaf(Tensor::vector(xs.clone()));
        let (_, l2) = build(&mut t2, x2);
        t2.backward(l2).unwrap();
        let g2 = t2.grad(x2).unwrap().to_vec();

        let mut t3 = Tape::new();
        let x3 = t3.leaf(Tensor::vector(xs.clone()));
        let (l1c, l2c) = build(&mut t3, x3);
        let l1s = t3.scale(l1c, a).unwrap();
        let l2s = t3.scale(l2c, b).unwrap();
        let combined = t3.add(l1s, l2s).unwrap();
        t3.backward(combined).unwrap();
        let gc = t3.grad(x3).unwrap();

        for j in 0..xs.len() {
            assert_close(gc[j], a * g1[j] + b * g2[j], 1e-10);
        }
    }

    #[test]
    fn relu_and_abs_subgradient_at_zero_is_zero() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![0.0, -2.0, 2.0]));
        let r = t.relu(x).unwrap();
        let s = t.sum(r).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[0.0, 0.0, 1.0]);

        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![0.0, -2.0, 2.0]));
        let a = t.abs(x).unwrap();
        let s = t.sum(a).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[0.0, -1.0, 1.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]));
        let c = t.constant(Tensor::vector(vec![3.0, 4.0]));
        let p = t.elem_mul(x, c).unwrap();
        let s = t.sum(p).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[3.0, 4.0]);
        assert_eq!(t.grad(c).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn shape_mismatch_reports_op_and_shapes() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::vector(vec![1.0, 2.0]));
        let b = t.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let err = t.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("add"), "{msg}");
        assert!(msg.contains("vector[2]") && msg.contains("vector[3]"), "{msg}");
    }

    #[test]
    fn stale_node_id_is_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(1.0));
        let y = t.exp(x).unwrap();
        // Rebuild the tape (fresh forward pass); the old id no longer exists.
        let mut t = Tape::new();
        let _ = t.leaf(Tensor::scalar(1.0));
        assert!(matches!(t.backward(y), Err(Error::StaleNode { .. })));
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(
            t.backward(x),
            Err(Error::NonScalarRoot { .. })
        ));
    }

    #[test]
    fn cross_entropy_is_finite_for_extreme_logits() {
        let mut t = Tape::new();
        let logits = t.leaf(Tensor::matrix(2, 3, vec![1e300, -1e300, 0.0, 700.0, -700.0, 0.0]).unwrap());
        let loss = t.cross_entropy(logits, &[1, 0]).unwrap();
        assert!(t.forward_scalar(loss).unwrap().is_finite());
    }

    #[test]
    fn cross_entropy_rejects_bad_labels() {
        let mut t = Tape::new();
        let logits = t.leaf(Tensor::matrix(1, 3, vec![0.0; 3]).unwrap());
        assert!(t.cross_entropy(logits, &[3]).is_err());
        assert!(t.cross_entropy(logits, &[0, 1]).is_err());
    }

    #[test]
    fn matmul_matrix_vector_matches_by_hand() {
        let mut t = Tape::new();
        let m = t.leaf(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let v = t.leaf(Tensor::vector(vec![1.0, 0.0, -1.0]));
        let out = t.matmul(m, v).unwrap();
        assert_eq!(t.value(out).unwrap().data(), &[-2.0, -2.0]);
        let s = t.sum(out).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(v).unwrap(), &[5.0, 7.0, 9.0]);
        assert_eq!(t.grad(m).unwrap(), &[1.0, 0.0, -1.0, 1.0, 0.0, -1.0]);
    }

    #[test]
    fn select_and_mul_compose_a_weighted_mixture() {
        // mixture = w0 * t0 + w1 * t1 with weights taken from a softmax row.
        let mut t = Tape::new();
        let logits = t.leaf(Tensor::vector(vec![0.0, 0.0]));
        let w = t.softmax(logits).unwrap();
        let w0 = t.select(w, 0).unwrap();
        let w1 = t.select(w, 1).unwrap();
        let t0 = t.constant(Tensor::vector(vec![2.0, 4.0]));
        let t1 = t.constant(Tensor::vector(vec![-2.0, 0.0]));
        let m0 = t.mul(w0, t0).unwrap();
        let m1 = t.mul(w1, t1).unwrap();
        let mix = t.add(m0, m1).unwrap();
        assert_eq!(t.value(mix).unwrap().data(), &[0.0, 2.0]);
        let s = t.sum(mix).unwrap();
        t.backward(s).unwrap();
        // d(sum)/d(logit_j) via softmax: w_j * (sum_j - dot) with sum_0 = 6, sum_1 = -2.
        let g = t.grad(logits).unwrap();
        assert_close(g[0], 0.5 * (6.0 - 2.0), 1e-12);
        assert_close(g[1], 0.5 * (-2.0 - 2.0), 1e-12);
    }
}
