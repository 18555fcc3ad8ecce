//! Define-by-run reverse-mode differentiation over dense 2-D tensors.
//!
//! Every operation on a [`Var`] appends a node to its [`Tape`]; calling
//! [`Tape::backward`] on a scalar node walks the tape in reverse and applies
//! each node's vector-Jacobian product. Tensors are always treated as
//! `rows x cols`; scalars are `1 x 1`.

use std::cell::RefCell;
use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use thiserror::Error;

use crate::spectral::SparseMatrix;
use crate::tensor::{gemm, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFiniteValue { op: &'static str },
    #[error("backward root must be a scalar, got {rows} x {cols}")]
    NonScalarRoot { rows: usize, cols: usize },
}

pub type GradResult<T> = Result<T, GradError>;

fn mismatch(op: &'static str, detail: String) -> GradError {
    GradError::ShapeMismatch { op, detail }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    Matmul(usize, usize),
    SparseMatmul(Arc<SparseMatrix>, usize),
    Relu(usize),
    Abs(usize),
    Square(usize),
    Sqrt(usize, f64),
    MaxRows { input: usize, argmax: Vec<usize> },
    MaxCols { input: usize, argmax: Vec<usize> },
    Sum(usize),
    SumRows(usize),
    SumCols(usize),
    Mean(usize),
    Concat { inputs: Vec<usize>, axis: usize },
    Slice { input: usize, axis: usize, start: usize },
    Broadcast(usize),
    AddRow(usize, usize),
    GatherRows { input: usize, index: Vec<usize> },
    Reshape(usize),
    SoftmaxCrossEntropy { logits: usize, labels: Vec<usize>, probs: Vec<f64> },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Record of operations for one forward pass. Not shared across threads.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({}, {:?})", self.id, self.shape())
    }
}

fn as_matrix(t: Tensor) -> Tensor {
    if t.shape().len() == 2 {
        t
    } else {
        let (r, c) = (t.rows(), t.cols());
        t.reshaped(vec![r, c])
    }
}

fn as_matrix_arc(t: Arc<Tensor>) -> Arc<Tensor> {
    if t.shape().len() == 2 {
        t
    } else {
        Arc::new(as_matrix(Arc::unwrap_or_clone(t)))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> GradResult<Var<'_>> {
        if !value.is_finite() {
            return Err(GradError::NonFiniteValue { op: name });
        }
        self.push_arc(Arc::new(value), op, requires_grad)
    }

    fn push_arc(&self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> GradResult<Var<'_>> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    /// Differentiable input.
    pub fn leaf(&self, value: impl Into<Arc<Tensor>>) -> GradResult<Var<'_>> {
        let value = as_matrix_arc(value.into());
        if !value.is_finite() {
            return Err(GradError::NonFiniteValue { op: "leaf" });
        }
        self.push_arc(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, value: impl Into<Arc<Tensor>>) -> GradResult<Var<'_>> {
        let value = as_matrix_arc(value.into());
        if !value.is_finite() {
            return Err(GradError::NonFiniteValue { op: "constant" });
        }
        self.push_arc(value, Op::Constant, false)
    }

    fn value(&self, id: usize) -> Arc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Hash of every piecewise-linear branch taken in the forward pass: relu
    /// and abs signs and the arg-max of every max reduction. Two evaluations
    /// with equal signatures lie on the same smooth piece.
    pub fn kink_signature(&self) -> u64 {
        let nodes = self.nodes.borrow();
        let mut h = DefaultHasher::new();
        for (i, node) in nodes.iter().enumerate() {
            match &node.op {
                Op::Relu(x) | Op::Abs(x) => {
                    i.hash(&mut h);
                    for v in nodes[*x].value.data() {
                        (*v > 0.0, *v < 0.0).hash(&mut h);
                    }
                }
                Op::MaxRows { argmax, .. } | Op::MaxCols { argmax, .. } => {
                    i.hash(&mut h);
                    argmax.hash(&mut h);
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Smallest absolute input to any relu or abs node, and the smallest gap
    /// between the winner and runner-up of any max reduction.
    pub fn kink_margin(&self) -> f64 {
        let nodes = self.nodes.borrow();
        let mut margin = f64::INFINITY;
        for node in nodes.iter() {
            match &node.op {
                Op::Relu(x) | Op::Abs(x) => {
                    for v in nodes[*x].value.data() {
                        margin = margin.min(v.abs());
                    }
                }
                Op::MaxRows { input, argmax } => {
                    let t = &nodes[*input].value;
                    let (r, c) = (t.rows(), t.cols());
                    let groups = node.value.rows();
                    let per = r / groups;
                    for g in 0..groups {
                        for j in 0..c {
                            let best = argmax[g * c + j];
                            let bv = t.data()[best * c + j];
                            for i in g * per..(g + 1) * per {
                                if i != best {
                                    margin = margin.min(bv - t.data()[i * c + j]);
                                }
                            }
                        }
                    }
                }
                Op::MaxCols { input, argmax } => {
                    let t = &nodes[*input].value;
                    let c = t.cols();
                    for (i, &best) in argmax.iter().enumerate() {
                        let row = t.row(i);
                        for (j, v) in row.iter().enumerate() {
                            if j != best {
                                margin = margin.min(row[best] - v);
                            }
                        }
                    }
                    let _ = c;
                }
                _ => {}
            }
        }
        margin
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var<'_>) -> GradResult<Gradients> {
        let nodes = self.nodes.borrow();
        let shape = nodes[root.id].value.shape().to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(GradError::NonScalarRoot {
                rows: nodes[root.id].value.rows(),
                cols: nodes[root.id].value.cols(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[root.id] = Some(vec![1.0]);

        fn acc(grads: &mut [Option<Vec<f64>>], id: usize, g: Vec<f64>) {
            match &mut grads[id] {
                Some(existing) => {
                    for (e, x) in existing.iter_mut().zip(g) {
                        *e += x;
                    }
                }
                slot @ None => *slot = Some(g),
            }
        }
        fn acc_with(grads: &mut [Option<Vec<f64>>], id: usize, len: usize, f: impl FnOnce(&mut [f64])) {
            let slot = grads[id].get_or_insert_with(|| vec![0.0; len]);
            f(slot);
        }

        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let out = &node.value;
            let needs = |i: usize| nodes[i].requires_grad;
            match &node.op {
                Op::Leaf | Op::Constant => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    if needs(*b) {
                        acc(&mut grads, *b, g.clone());
                    }
                    if needs(*a) {
                        acc(&mut grads, *a, g);
                    }
                }
                Op::Sub(a, b) => {
                    if needs(*b) {
                        acc(&mut grads, *b, g.iter().map(|x| -x).collect());
                    }
                    if needs(*a) {
                        acc(&mut grads, *a, g);
                    }
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                    if needs(*a) {
                        acc(&mut grads, *a, g.iter().zip(vb.data()).map(|(g, y)| g * y).collect());
                    }
                    if needs(*b) {
                        acc(&mut grads, *b, g.iter().zip(va.data()).map(|(g, x)| g * x).collect());
                    }
                }
                Op::Div(a, b) => {
                    let vb = &nodes[*b].value;
                    if needs(*a) {
                        acc(&mut grads, *a, g.iter().zip(vb.data()).map(|(g, y)| g / y).collect());
                    }
                    if needs(*b) {
                        acc(
                            &mut grads,
                            *b,
                            g.iter().zip(out.data()).zip(vb.data()).map(|((g, q), y)| -g * q / y).collect(),
                        );
                    }
                }
                Op::Scale(a, s) => acc(&mut grads, *a, g.iter().map(|x| x * s).collect()),
                Op::Offset(a) => acc(&mut grads, *a, g),
                Op::Matmul(a, b) => {
                    let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                    let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                    let nnz = g.iter().filter(|x| **x != 0.0).count();
                    let sparse = nnz * 8 < m * n;
                    if needs(*a) {
                        acc_with(&mut grads, *a, m * k, |da| {
                            if sparse {
                                let bd = vb.data();
                                for i in 0..m {
                                    for j in 0..n {
                                        let gij = g[i * n + j];
                                        if gij != 0.0 {
                                            let row = &mut da[i * k..(i + 1) * k];
                                            for (t, r) in row.iter_mut().enumerate() {
                                                *r += gij * bd[t * n + j];
                                            }
                                        }
                                    }
                                }
                            } else {
                                gemm(m, n, k, &g, false, vb.data(), true, da, 1.0);
                            }
                        });
                    }
                    if needs(*b) {
                        acc_with(&mut grads, *b, k * n, |db| {
                            if sparse {
                                let ad = va.data();
                                for i in 0..m {
                                    for j in 0..n {
                                        let gij = g[i * n + j];
                                        if gij != 0.0 {
                                            for t in 0..k {
                                                db[t * n + j] += gij * ad[i * k + t];
                                            }
                                        }
                                    }
                                }
                            } else {
                                gemm(k, m, n, va.data(), true, &g, false, db, 1.0);
                            }
                        });
                    }
                }
                Op::SparseMatmul(s, x) => {
                    let d = out.cols();
                    acc(&mut grads, *x, s.mul_dense_transposed(&g, d));
                }
                Op::Relu(x) => {
                    let vx = &nodes[*x].value;
                    acc(
                        &mut grads,
                        *x,
                        g.iter().zip(vx.data()).map(|(g, v)| if *v > 0.0 { *g } else { 0.0 }).collect(),
                    );
                }
                Op::Abs(x) => {
                    let vx = &nodes[*x].value;
                    acc(
                        &mut grads,
                        *x,
                        g.iter()
                            .zip(vx.data())
                            .map(|(g, v)| {
                                if *v > 0.0 {
                                    *g
                                } else if *v < 0.0 {
                                    -g
                                } else {
                                    0.0
                                }
                            })
                            .collect(),
                    );
                }
                Op::Square(x) => {
                    let vx = &nodes[*x].value;
                    acc(&mut grads, *x, g.iter().zip(vx.data()).map(|(g, v)| 2.0 * g * v).collect());
                }
                Op::Sqrt(x, eps) => {
                    acc(
                        &mut grads,
                        *x,
                        g.iter().zip(out.data()).map(|(g, y)| 0.5 * g / y.max(*eps)).collect(),
                    );
                }
                Op::MaxRows { input, argmax } => {
                    let c = out.cols();
                    let len = nodes[*input].value.len();
                    acc_with(&mut grads, *input, len, |dx| {
                        for (o, &src) in argmax.iter().enumerate() {
                            dx[src * c + o % c] += g[o];
                        }
                    });
                }
                Op::MaxCols { input, argmax } => {
                    let c = nodes[*input].value.cols();
                    let len = nodes[*input].value.len();
                    acc_with(&mut grads, *input, len, |dx| {
                        for (i, &j) in argmax.iter().enumerate() {
                            dx[i * c + j] += g[i];
                        }
                    });
                }
                Op::Sum(x) => {
                    let len = nodes[*x].value.len();
                    acc(&mut grads, *x, vec![g[0]; len]);
                }
                Op::Mean(x) => {
                    let len = nodes[*x].value.len();
                    acc(&mut grads, *x, vec![g[0] / len as f64; len]);
                }
                Op::SumRows(x) => {
                    // [r, c] -> [1, c]
                    let vx = &nodes[*x].value;
                    let (r, c) = (vx.rows(), vx.cols());
                    let mut dx = Vec::with_capacity(r * c);
                    for _ in 0..r {
                        dx.extend_from_slice(&g);
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::SumCols(x) => {
                    // [r, c] -> [r, 1]
                    let vx = &nodes[*x].value;
                    let c = vx.cols();
                    acc(&mut grads, *x, g.iter().flat_map(|&gi| std::iter::repeat_n(gi, c)).collect());
                }
                Op::Concat { inputs, axis } => {
                    let oc = out.cols();
                    let mut offset = 0;
                    for &inp in inputs {
                        let vi = &nodes[inp].value;
                        let (r, c) = (vi.rows(), vi.cols());
                        if needs(inp) {
                            let piece: Vec<f64> = if *axis == 0 {
                                g[offset * oc..(offset + r) * oc].to_vec()
                            } else {
                                (0..r).flat_map(|i| g[i * oc + offset..i * oc + offset + c].iter().copied()).collect()
                            };
                            acc(&mut grads, inp, piece);
                        }
                        offset += if *axis == 0 { r } else { c };
                    }
                }
                Op::Slice { input, axis, start } => {
                    let vi = &nodes[*input].value;
                    let (ic, len) = (vi.cols(), vi.len());
                    let (r, c) = (out.rows(), out.cols());
                    acc_with(&mut grads, *input, len, |dx| {
                        for i in 0..r {
                            for j in 0..c {
                                let (si, sj) = if *axis == 0 { (i + start, j) } else { (i, j + start) };
                                dx[si * ic + sj] += g[i * c + j];
                            }
                        }
                    });
                }
                Op::Broadcast(x) => {
                    let vx = &nodes[*x].value;
                    let (xr, xc) = (vx.rows(), vx.cols());
                    let (r, c) = (out.rows(), out.cols());
                    acc_with(&mut grads, *x, xr * xc, |dx| {
                        for i in 0..r {
                            for j in 0..c {
                                let si = if xr == 1 { 0 } else { i };
                                let sj = if xc == 1 { 0 } else { j };
                                dx[si * xc + sj] += g[i * c + j];
                            }
                        }
                    });
                }
                Op::GatherRows { input, index } => {
                    let vi = &nodes[*input].value;
                    let c = vi.cols();
                    acc_with(&mut grads, *input, vi.len(), |dx| {
                        for (o, &src) in index.iter().enumerate() {
                            for j in 0..c {
                                dx[src * c + j] += g[o * c + j];
                            }
                        }
                    });
                }
                Op::AddRow(x, bias) => {
                    if needs(*bias) {
                        let c = out.cols();
                        acc_with(&mut grads, *bias, c, |db| {
                            for row in g.chunks_exact(c) {
                                for (d, v) in db.iter_mut().zip(row) {
                                    *d += v;
                                }
                            }
                        });
                    }
                    if needs(*x) {
                        acc(&mut grads, *x, g);
                    }
                }
                Op::Reshape(x) => acc(&mut grads, *x, g),
                Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                    let b = labels.len();
                    let c = probs.len() / b;
                    let scale = g[0] / b as f64;
                    let mut dx: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                    for (i, &l) in labels.iter().enumerate() {
                        dx[i * c + l] -= scale;
                    }
                    acc(&mut grads, *logits, dx);
                }
            }
        }
        Ok(Gradients {
            shapes: nodes.iter().map(|n| (n.value.rows(), n.value.cols())).collect(),
            grads,
        })
    }
}

/// Gradients of a root with respect to every leaf reached by the sweep.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient for `v`; exactly zero when `v` does not influence the root.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        let (r, c) = self.shapes[v.id];
        match &self.grads[v.id] {
            Some(g) => Tensor::new(vec![r, c], g.clone()),
            None => Tensor::zeros(vec![r, c]),
        }
    }

    /// Moves the gradient out, leaving nothing behind.
    pub fn take(&mut self, v: Var<'_>) -> Tensor {
        let (r, c) = self.shapes[v.id];
        match self.grads[v.id].take() {
            Some(g) => Tensor::new(vec![r, c], g),
            None => Tensor::zeros(vec![r, c]),
        }
    }
}

// fallible, so these cannot be the std operator traits
#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn shape(&self) -> (usize, usize) {
        let v = self.value();
        (v.rows(), v.cols())
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires(self.id)
    }

    fn unary(self, name: &'static str, value: Tensor, op: Op) -> GradResult<Var<'t>> {
        self.tape.push(value, op, self.requires_grad(), name)
    }

    fn same_shape(self, other: Var<'t>, op: &'static str) -> GradResult<(Arc<Tensor>, Arc<Tensor>)> {
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(mismatch(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        Ok((a, b))
    }

    fn binary(self, other: Var<'t>, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> GradResult<Var<'t>> {
        let (a, b) = self.same_shape(other, name)?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(Tensor::new(a.shape().to_vec(), data), op, rg, name)
    }

    pub fn add(self, other: Var<'t>) -> GradResult<Var<'t>> {
        self.binary(other, "add", |x, y| x + y, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t>) -> GradResult<Var<'t>> {
        self.binary(other, "sub", |x, y| x - y, Op::Sub(self.id, other.id))
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'t>) -> GradResult<Var<'t>> {
        self.binary(other, "mul", |x, y| x * y, Op::Mul(self.id, other.id))
    }

    /// Elementwise quotient.
    pub fn div(self, other: Var<'t>) -> GradResult<Var<'t>> {
        self.binary(other, "div", |x, y| x / y, Op::Div(self.id, other.id))
    }

    pub fn scale(self, s: f64) -> GradResult<Var<'t>> {
        self.unary("scale", self.value().map(|x| x * s), Op::Scale(self.id, s))
    }

    /// Adds a constant to every entry.
    pub fn offset(self, c: f64) -> GradResult<Var<'t>> {
        self.unary("offset", self.value().map(|x| x + c), Op::Offset(self.id))
    }

    pub fn matmul(self, other: Var<'t>) -> GradResult<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let (m, k) = (a.rows(), a.cols());
        let (k2, n) = (b.rows(), b.cols());
        if k != k2 {
            return Err(mismatch("matmul", format!("{m}x{k} * {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, a.data(), false, b.data(), false, &mut out, 0.0);
        let rg = self.requires_grad() || other.requires_grad();
        self.tape
            .push(Tensor::new(vec![m, n], out), Op::Matmul(self.id, other.id), rg, "matmul")
    }

    /// `s * self` for a constant sparse `s`.
    pub fn sparse_left_mul(self, s: Arc<SparseMatrix>) -> GradResult<Var<'t>> {
        let x = self.value();
        if x.rows() != s.dim() {
            return Err(mismatch("sparse_matmul", format!("{} x {} * {:?}", s.dim(), s.dim(), x.shape())));
        }
        let d = x.cols();
        let out = Tensor::new(vec![x.rows(), d], s.mul_dense(x.data(), d));
        self.unary("sparse_matmul", out, Op::SparseMatmul(s, self.id))
    }

    pub fn relu(self) -> GradResult<Var<'t>> {
        self.unary("relu", self.value().map(|x| x.max(0.0)), Op::Relu(self.id))
    }

    pub fn abs(self) -> GradResult<Var<'t>> {
        self.unary("abs", self.value().map(f64::abs), Op::Abs(self.id))
    }

    pub fn square(self) -> GradResult<Var<'t>> {
        self.unary("square", self.value().map(|x| x * x), Op::Square(self.id))
    }

    /// `sqrt(max(x, 0))`; the derivative uses `max(sqrt(x), eps)` in its
    /// denominator so it stays finite at zero.
    pub fn sqrt(self, eps: f64) -> GradResult<Var<'t>> {
        self.unary("sqrt", self.value().map(|x| x.max(0.0).sqrt()), Op::Sqrt(self.id, eps))
    }

    /// Column-wise max over consecutive groups of `rows / groups` rows:
    /// `[groups * m, c] -> [groups, c]`. Ties go to the lowest row.
    pub fn max_rows_grouped(self, groups: usize) -> GradResult<Var<'t>> {
        let x = self.value();
        let (r, c) = (x.rows(), x.cols());
        if groups == 0 || r % groups != 0 || r == 0 {
            return Err(mismatch("max_over_axis", format!("{r} rows into {groups} groups")));
        }
        let per = r / groups;
        let d = x.data();
        let mut vals = vec![f64::NEG_INFINITY; groups * c];
        let mut argmax = vec![0usize; groups * c];
        for gi in 0..groups {
            let (v, a) = (&mut vals[gi * c..(gi + 1) * c], &mut argmax[gi * c..(gi + 1) * c]);
            for i in gi * per..(gi + 1) * per {
                for (j, &xv) in d[i * c..(i + 1) * c].iter().enumerate() {
                    if xv > v[j] {
                        v[j] = xv;
                        a[j] = i;
                    }
                }
            }
        }
        self.unary(
            "max_over_axis",
            Tensor::new(vec![groups, c], vals),
            Op::MaxRows { input: self.id, argmax },
        )
    }

    /// Max over an axis; ties resolved to the lowest index.
    /// Axis 0 gives `[1, c]`, axis 1 gives `[r, 1]`.
    pub fn max_over_axis(self, axis: usize) -> GradResult<Var<'t>> {
        match axis {
            0 => self.max_rows_grouped(1),
            1 => {
                let x = self.value();
                let (r, c) = (x.rows(), x.cols());
                if c == 0 {
                    return Err(mismatch("max_over_axis", "empty rows".into()));
                }
                let mut vals = Vec::with_capacity(r);
                let mut argmax = Vec::with_capacity(r);
                for i in 0..r {
                    let row = x.row(i);
                    let mut best = 0;
                    for j in 1..c {
                        if row[j] > row[best] {
                            best = j;
                        }
                    }
                    vals.push(row[best]);
                    argmax.push(best);
                }
                self.unary(
                    "max_over_axis",
                    Tensor::new(vec![r, 1], vals),
                    Op::MaxCols { input: self.id, argmax },
                )
            }
            _ => Err(mismatch("max_over_axis", format!("axis {axis}"))),
        }
    }

    pub fn sum(self) -> GradResult<Var<'t>> {
        let s = self.value().data().iter().sum();
        self.unary("sum", Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(self) -> GradResult<Var<'t>> {
        let x = self.value();
        let s = x.data().iter().sum::<f64>() / x.len() as f64;
        self.unary("mean", Tensor::scalar(s), Op::Mean(self.id))
    }

    /// Axis 0: `[r, c] -> [1, c]`; axis 1: `[r, c] -> [r, 1]`.
    pub fn sum_axis(self, axis: usize) -> GradResult<Var<'t>> {
        let x = self.value();
        let (r, c) = (x.rows(), x.cols());
        match axis {
            0 => {
                let mut out = vec![0.0; c];
                for i in 0..r {
                    for (o, v) in out.iter_mut().zip(x.row(i)) {
                        *o += v;
                    }
                }
                self.unary("sum_axis", Tensor::new(vec![1, c], out), Op::SumRows(self.id))
            }
            1 => {
                let out = (0..r).map(|i| x.row(i).iter().sum()).collect();
                self.unary("sum_axis", Tensor::new(vec![r, 1], out), Op::SumCols(self.id))
            }
            _ => Err(mismatch("sum_axis", format!("axis {axis}"))),
        }
    }

    pub fn concat(parts: &[Var<'t>], axis: usize) -> GradResult<Var<'t>> {
        let first = parts.first().ok_or_else(|| mismatch("concat", "no inputs".into()))?;
        let tape = first.tape;
        let vals: Vec<Arc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let (r0, c0) = (vals[0].rows(), vals[0].cols());
        let out = match axis {
            0 => {
                if vals.iter().any(|v| v.cols() != c0) {
                    return Err(mismatch("concat", "column counts differ".into()));
                }
                let rows = vals.iter().map(|v| v.rows()).sum();
                let data = vals.iter().flat_map(|v| v.data().iter().copied()).collect();
                Tensor::new(vec![rows, c0], data)
            }
            1 => {
                if vals.iter().any(|v| v.rows() != r0) {
                    return Err(mismatch("concat", "row counts differ".into()));
                }
                let cols: usize = vals.iter().map(|v| v.cols()).sum();
                let mut data = Vec::with_capacity(r0 * cols);
                for i in 0..r0 {
                    for v in &vals {
                        data.extend_from_slice(v.row(i));
                    }
                }
                Tensor::new(vec![r0, cols], data)
            }
            _ => return Err(mismatch("concat", format!("axis {axis}"))),
        };
        let rg = parts.iter().any(|p| p.requires_grad());
        tape.push(
            out,
            Op::Concat {
                inputs: parts.iter().map(|p| p.id).collect(),
                axis,
            },
            rg,
            "concat",
        )
    }

    /// Half-open range `start..end` along `axis`.
    pub fn slice(self, axis: usize, start: usize, end: usize) -> GradResult<Var<'t>> {
        let x = self.value();
        let (r, c) = (x.rows(), x.cols());
        let limit = if axis == 0 { r } else { c };
        if axis > 1 || start > end || end > limit {
            return Err(mismatch("slice", format!("{start}..{end} on axis {axis} of {r}x{c}")));
        }
        let out = if axis == 0 {
            Tensor::new(vec![end - start, c], x.data()[start * c..end * c].to_vec())
        } else {
            let data = (0..r).flat_map(|i| x.row(i)[start..end].iter().copied()).collect();
            Tensor::new(vec![r, end - start], data)
        };
        self.unary("slice", out, Op::Slice { input: self.id, axis, start })
    }

    /// Repeats a `[1, c]`, `[r, 1]` or `[1, 1]` tensor to `[rows, cols]`.
    pub fn broadcast(self, rows: usize, cols: usize) -> GradResult<Var<'t>> {
        let x = self.value();
        let (xr, xc) = (x.rows(), x.cols());
        if !((xr == 1 || xr == rows) && (xc == 1 || xc == cols)) {
            return Err(mismatch("broadcast", format!("{xr}x{xc} to {rows}x{cols}")));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            let si = if xr == 1 { 0 } else { i };
            if xc == 1 {
                data.extend(std::iter::repeat_n(x.data()[si], cols));
            } else {
                data.extend_from_slice(x.row(si));
            }
        }
        self.unary("broadcast", Tensor::new(vec![rows, cols], data), Op::Broadcast(self.id))
    }

    pub fn gather_rows(self, index: Vec<usize>) -> GradResult<Var<'t>> {
        let x = self.value();
        let (r, c) = (x.rows(), x.cols());
        if let Some(&bad) = index.iter().find(|&&i| i >= r) {
            return Err(mismatch("gather_rows", format!("row {bad} of {r}")));
        }
        let data = index.iter().flat_map(|&i| x.row(i).iter().copied()).collect();
        let out = Tensor::new(vec![index.len(), c], data);
        self.unary("gather_rows", out, Op::GatherRows { input: self.id, index })
    }

    pub fn reshape(self, rows: usize, cols: usize) -> GradResult<Var<'t>> {
        let x = self.value();
        if rows * cols != x.len() {
            return Err(mismatch("reshape", format!("{} values into {rows}x{cols}", x.len())));
        }
        let out = Tensor::new(vec![rows, cols], x.data().to_vec());
        self.unary("reshape", out, Op::Reshape(self.id))
    }

    /// Mean softmax cross-entropy of `[b, c]` logits against class labels.
    pub fn softmax_cross_entropy(self, labels: &[usize]) -> GradResult<Var<'t>> {
        let x = self.value();
        let (b, c) = (x.rows(), x.cols());
        if labels.len() != b || labels.iter().any(|&l| l >= c) {
            return Err(mismatch("softmax_cross_entropy", format!("{} labels for {b}x{c}", labels.len())));
        }
        let mut probs = Vec::with_capacity(b * c);
        let mut loss = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            let row = x.row(i);
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            probs.extend(row.iter().map(|v| (v - m).exp() / z));
            loss += z.ln() + m - row[l];
        }
        self.unary(
            "softmax_cross_entropy",
            Tensor::scalar(loss / b as f64),
            Op::SoftmaxCrossEntropy {
                logits: self.id,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    /// Adds a `[1, c]` bias row to every row.
    pub fn add_row(self, bias: Var<'t>) -> GradResult<Var<'t>> {
        let (x, b) = (self.value(), bias.value());
        if b.rows() != 1 || b.cols() != x.cols() {
            return Err(mismatch("add_row", format!("{:?} + {:?}", x.shape(), b.shape())));
        }
        let mut data = x.data().to_vec();
        for row in data.chunks_exact_mut(b.cols()) {
            for (d, v) in row.iter_mut().zip(b.data()) {
                *d += v;
            }
        }
        let rg = self.requires_grad() || bias.requires_grad();
        self.tape.push(
            Tensor::new(vec![x.rows(), x.cols()], data),
            Op::AddRow(self.id, bias.id),
            rg,
            "add_row",
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(r: usize, c: usize, d: &[f64]) -> Tensor {
        Tensor::new(vec![r, c], d.to_vec())
    }

    #[test]
    fn relu_at_negative_input() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(-1.5)).unwrap();
        let y = x.relu().unwrap();
        assert_eq!(y.item(), 0.0);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).item(), 0.0);
    }

    #[test]
    fn max_tie_routes_to_lowest_index() {
        let tape = Tape::new();
        let x = tape.leaf(t(1, 3, &[3.0, 7.0, 7.0])).unwrap();
        let m = x.max_over_axis(1).unwrap();
        assert_eq!(m.item(), 7.0);
        let g = tape.backward(m).unwrap();
        assert_eq!(g.wrt(x).data(), &[0.0, 1.0, 0.0]);

        let tape = Tape::new();
        let x = tape.leaf(t(3, 1, &[3.0, 7.0, 7.0])).unwrap();
        let m = x.max_over_axis(0).unwrap();
        let g = tape.backward(m).unwrap();
        assert_eq!(g.wrt(x).data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn sqrt_derivative_matches_finite_difference() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(4.0)).unwrap();
        let y = x.sqrt(1e-12).unwrap();
        let g = tape.backward(y).unwrap().wrt(x).item();
        let h = 1e-5;
        let fd = ((4.0f64 + h).sqrt() - (4.0f64 - h).sqrt()) / (2.0 * h);
        assert!((g - 0.25).abs() < 1e-12);
        assert!((g - fd).abs() < 1e-6);
    }

    #[test]
    fn quadratic_gradient() {
        let tape = Tape::new();
        let data = [1.0, -2.0, 0.5, 3.0];
        let x = tape.leaf(t(2, 2, &data)).unwrap();
        let y = x.square().unwrap().sum().unwrap();
        let g = tape.backward(y).unwrap().wrt(x);
        assert_eq!(g.data(), &[2.0, -4.0, 1.0, 6.0]);
    }

    #[test]
    fn unused_leaf_has_zero_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(t(1, 2, &[1.0, 2.0])).unwrap();
        let unused = tape.leaf(t(2, 2, &[1.0; 4])).unwrap();
        let y = x.sum().unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(unused).data(), &[0.0; 4]);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(t(1, 2, &[1.0, 2.0])).unwrap();
        assert!(matches!(tape.backward(x), Err(GradError::NonScalarRoot { rows: 1, cols: 2 })));
    }

    #[test]
    fn shape_and_finiteness_errors() {
        let tape = Tape::new();
        let a = tape.leaf(t(2, 3, &[1.0; 6])).unwrap();
        let b = tape.leaf(t(2, 3, &[1.0; 6])).unwrap();
        assert!(matches!(a.matmul(b), Err(GradError::ShapeMismatch { op: "matmul", .. })));
        assert!(matches!(a.add(b.slice(1, 0, 2).unwrap()), Err(GradError::ShapeMismatch { .. })));
        let big = tape.leaf(Tensor::scalar(1e200)).unwrap();
        assert!(matches!(big.square(), Err(GradError::NonFiniteValue { op: "square" })));
        assert!(tape.leaf(Tensor::scalar(f64::NAN)).is_err());
    }

    #[test]
    fn matmul_sparse_and_dense_paths_agree() {
        // One dense upstream, one sparse upstream (through a max reduction).
        let a = t(3, 2, &[1.0, 2.0, -1.0, 0.5, 3.0, -2.0]);
        let b = t(2, 4, &[0.5, -1.0, 2.0, 1.0, 1.5, 0.25, -0.5, 2.0]);
        let tape = Tape::new();
        let va = tape.leaf(a.clone()).unwrap();
        let vb = tape.leaf(b.clone()).unwrap();
        let c = va.matmul(vb).unwrap();
        let m = c.max_over_axis(0).unwrap().sum().unwrap();
        let g = tape.backward(m).unwrap();
        // reference via dense product with explicit routing
        let cv = a.matmul(&b);
        let mut dc = vec![0.0; 12];
        for j in 0..4 {
            let best = (0..3).fold(0, |bi, i| if cv.get(i, j) > cv.get(bi, j) { i } else { bi });
            dc[best * 4 + j] = 1.0;
        }
        let dc = t(3, 4, &dc);
        let da = dc.matmul(&b.transpose());
        let db = a.transpose().matmul(&dc);
        for (x, y) in g.wrt(va).data().iter().zip(da.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in g.wrt(vb).data().iter().zip(db.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_cross_entropy_value() {
        let tape = Tape::new();
        let x = tape.leaf(t(1, 2, &[0.0, 0.0])).unwrap();
        let l = x.softmax_cross_entropy(&[1]).unwrap();
        assert!((l.item() - 2f64.ln()).abs() < 1e-15);
        let g = tape.backward(l).unwrap().wrt(x);
        assert_eq!(g.data(), &[0.5, -0.5]);
    }
}
