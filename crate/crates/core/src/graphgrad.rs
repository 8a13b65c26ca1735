//! Reverse-mode automatic differentiation over a flat operation tape.
//!
//! A [`Tape`] records eagerly evaluated operations on f64 [`Tensor`]s. Nodes
//! are appended in topological order, so [`Tape::backward`] is a single
//! reverse sweep. Parameters live outside the tape and are bound per step as
//! leaf nodes; a fresh tape is built for every training step since sequence
//! lengths vary.

use thiserror::Error;

/// Dense row-major f64 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self, TapeError> {
        if shape.iter().any(|&d| d == 0) {
            return Err(TapeError::InvalidShape {
                reason: format!("zero-sized dimension in {shape:?}"),
            });
        }
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(TapeError::InvalidShape {
                reason: format!("shape {shape:?} holds {expected} values, got {}", values.len()),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(TapeError::NonFinite { op: "tensor construction" });
        }
        Ok(Tensor { shape, values })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor { shape: shape.to_vec(), values: vec![0.0; len] }
    }

    pub fn scalar(v: f64) -> Result<Self, TapeError> {
        Tensor::new(vec![1], vec![v])
    }

    pub fn vector(values: Vec<f64>) -> Result<Self, TapeError> {
        let n = values.len();
        Tensor::new(vec![n], values)
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self, TapeError> {
        Tensor::new(vec![rows, cols], values)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// A scalar is any single-element tensor.
    pub fn is_scalar(&self) -> bool {
        self.values.len() == 1
    }

    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.values[0]
    }
}

/// Operation kinds the tape can record.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    /// Input, constant or parameter; receives a gradient but has no inputs.
    Leaf,
    MatMul,
    Add,
    /// Elementwise multiply.
    Mul,
    Sigmoid,
    Tanh,
    Relu,
    /// Concatenation of two vectors.
    Concat,
    /// Contiguous slice of a vector.
    Slice { start: usize, len: usize },
    /// Row gather from a matrix; a single row yields a vector.
    GatherRows { rows: Vec<usize> },
    /// Row-wise log-softmax (a vector counts as one row).
    LogSoftmax,
    Sum,
    Mean,
    /// Scale a vector to unit L2 norm; zero-norm input is a hard error.
    L2Normalize,
    ScalarMul { factor: f64 },
    /// max(x, 0) elementwise; the subgradient at exactly 0 is 0, which is the
    /// convention the hinge losses rely on.
    ClampMinZero,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul => "matmul",
            Op::Add => "add",
            Op::Mul => "elementwise-multiply",
            Op::Sigmoid => "sigmoid",
            Op::Tanh => "tanh",
            Op::Relu => "relu",
            Op::Concat => "concat",
            Op::Slice { .. } => "slice",
            Op::GatherRows { .. } => "gather-rows",
            Op::LogSoftmax => "log-softmax",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::L2Normalize => "l2-normalize",
            Op::ScalarMul { .. } => "scalar-multiply",
            Op::ClampMinZero => "clamp-min-zero",
        }
    }
}

#[derive(Debug, Error)]
pub enum TapeError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: unsupported input shape {shape:?}")]
    UnsupportedShape { op: &'static str, shape: Vec<usize> },
    #[error("{op}: expected {expected} inputs, got {got}")]
    WrongArity { op: &'static str, expected: usize, got: usize },
    #[error("{op}: index {index} out of range for bound {bound}")]
    IndexOutOfRange { op: &'static str, index: usize, bound: usize },
    #[error("invalid tensor: {reason}")]
    InvalidShape { reason: String },
    #[error("{op} produced non-finite values")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("l2-normalize of a zero-norm vector")]
    ZeroNorm,
    #[error("node id {0} not on this tape")]
    UnknownNode(usize),
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
    grad: Option<Tensor>,
}

/// Recorded computation graph. Node ids are dense and creation-ordered.
#[derive(Debug, Default)]
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

    /// Bind an input, constant or parameter value as a leaf node.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op: Op::Leaf, inputs: Vec::new(), value, grad: None });
        id
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last backward pass; `None` before any backward.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    fn input_value(&self, ids: &[NodeId], i: usize) -> &Tensor {
        &self.nodes[ids[i].0].value
    }

    /// Record one operation; validates arity and shapes, evaluates eagerly.
    pub fn record(&mut self, op: Op, inputs: &[NodeId]) -> Result<NodeId, TapeError> {
        for id in inputs {
            if id.0 >= self.nodes.len() {
                return Err(TapeError::UnknownNode(id.0));
            }
        }
        let value = self.eval(&op, inputs)?;
        if value.values.iter().any(|v| !v.is_finite()) {
            return Err(TapeError::NonFinite { op: op.name() });
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, inputs: inputs.to_vec(), value, grad: None });
        Ok(id)
    }

    fn expect_arity(op: &Op, inputs: &[NodeId], n: usize) -> Result<(), TapeError> {
        if inputs.len() != n {
            return Err(TapeError::WrongArity { op: op.name(), expected: n, got: inputs.len() });
        }
        Ok(())
    }

    fn eval(&self, op: &Op, inputs: &[NodeId]) -> Result<Tensor, TapeError> {
        match op {
            Op::Leaf => Err(TapeError::UnsupportedShape { op: "leaf", shape: vec![] }),
            Op::MatMul => {
                Self::expect_arity(op, inputs, 2)?;
                let a = self.input_value(inputs, 0);
                let b = self.input_value(inputs, 1);
                matmul(a, b)
            }
            Op::Add | Op::Mul => {
                Self::expect_arity(op, inputs, 2)?;
                let a = self.input_value(inputs, 0);
                let b = self.input_value(inputs, 1);
                if a.shape != b.shape {
                    return Err(TapeError::ShapeMismatch {
                        op: op.name(),
                        lhs: a.shape.clone(),
                        rhs: b.shape.clone(),
                    });
                }
                let values = if matches!(op, Op::Add) {
                    a.values.iter().zip(&b.values).map(|(x, y)| x + y).collect()
                } else {
                    a.values.iter().zip(&b.values).map(|(x, y)| x * y).collect()
                };
                Ok(Tensor { shape: a.shape.clone(), values })
            }
            Op::Sigmoid | Op::Tanh | Op::Relu | Op::ClampMinZero => {
                Self::expect_arity(op, inputs, 1)?;
                let a = self.input_value(inputs, 0);
                let f: fn(f64) -> f64 = match op {
                    Op::Sigmoid => sigmoid,
                    Op::Tanh => f64::tanh,
                    _ => |x| if x > 0.0 { x } else { 0.0 },
                };
                Ok(Tensor { shape: a.shape.clone(), values: a.values.iter().map(|&x| f(x)).collect() })
            }
            Op::ScalarMul { factor } => {
                Self::expect_arity(op, inputs, 1)?;
                let a = self.input_value(inputs, 0);
                Ok(Tensor {
                    shape: a.shape.clone(),
                    values: a.values.iter().map(|x| x * factor).collect(),
                })
            }
            Op::Concat => {
                Self::expect_arity(op, inputs, 2)?;
                let a = self.input_value(inputs, 0);
                let b = self.input_value(inputs, 1);
                if a.shape.len() != 1 || b.shape.len() != 1 {
                    return Err(TapeError::ShapeMismatch {
                        op: "concat",
                        lhs: a.shape.clone(),
                        rhs: b.shape.clone(),
                    });
                }
                let mut values = a.values.clone();
                values.extend_from_slice(&b.values);
                let n = values.len();
                Ok(Tensor { shape: vec![n], values })
            }
            Op::Slice { start, len } => {
                Self::expect_arity(op, inputs, 1)?;
                let a = self.input_value(inputs, 0);
                if a.shape.len() != 1 {
                    return Err(TapeError::UnsupportedShape { op: "slice", shape: a.shape.clone() });
                }
                if start + len > a.values.len() || *len == 0 {
                    return Err(TapeError::IndexOutOfRange {
                        op: "slice",
                        index: start + len,
                        bound: a.values.len(),
                    });
                }
                Ok(Tensor { shape: vec![*len], values: a.values[*start..start + len].to_vec() })
            }
            Op::GatherRows { rows } => {
                Self::expect_arity(op, inputs, 1)?;
                let a = self.input_value(inputs, 0);
                if a.shape.len() != 2 {
                    return Err(TapeError::UnsupportedShape {
                        op: "gather-rows",
                        shape: a.shape.clone(),
                    });
                }
                let (r, c) = (a.shape[0], a.shape[1]);
                let mut values = Vec::with_capacity(rows.len() * c);
                for &row in rows {
                    if row >= r {
                        return Err(TapeError::IndexOutOfRange {
                            op: "gather-rows",
                            index: row,
                            bound: r,
                        });
                    }
                    values.extend_from_slice(&a.values[row * c..(row + 1) * c]);
                }
                let shape = if rows.len() == 1 { vec![c] } else { vec![rows.len(), c] };
                Ok(Tensor { shape, values })
            }
            Op::LogSoftmax => {
                Self::expect_arity(op, inputs, 1)?;
                let a = self.input_value(inputs, 0);
                let cols = match a.shape.len() {
                    1 => a.shape[0],
                    2 => a.shape[1],
                    _ => {
                        return Err(TapeError::UnsupportedShape {
                            op: "log-softmax",
                            shape: a.shape.clone(),
                        })
                    }
                };
                let mut values = Vec::with_capacity(a.values.len());
                for row in a.values.chunks_exact(cols) {
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                    values.extend(row.iter().map(|x| x - lse));
                }
                Ok(Tensor { shape: a.shape.clone(), values })
            }
            Op::Sum | Op::Mean => {
                Self::expect_arity(op, inputs, 1)?;
                let a = self.input_value(inputs, 0);
                let total: f64 = a.values.iter().sum();
                let v = if matches!(op, Op::Sum) { total } else { total / a.values.len() as f64 };
                Ok(Tensor { shape: vec![1], values: vec![v] })
            }
            Op::L2Normalize => {
                Self::expect_arity(op, inputs, 1)?;
                let a = self.input_value(inputs, 0);
                if a.shape.len() != 1 {
                    return Err(TapeError::UnsupportedShape {
                        op: "l2-normalize",
                        shape: a.shape.clone(),
                    });
                }
                let norm = a.values.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm == 0.0 {
                    return Err(TapeError::ZeroNorm);
                }
                Ok(Tensor {
                    shape: a.shape.clone(),
                    values: a.values.iter().map(|x| x / norm).collect(),
                })
            }
        }
    }

    // Convenience wrappers.

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        self.record(Op::MatMul, &[a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        self.record(Op::Add, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        self.record(Op::Mul, &[a, b])
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        self.record(Op::Sigmoid, &[a])
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        self.record(Op::Tanh, &[a])
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        self.record(Op::Relu, &[a])
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        self.record(Op::Concat, &[a, b])
    }

    pub fn slice(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId, TapeError> {
        self.record(Op::Slice { start, len }, &[a])
    }

    pub fn gather_rows(&mut self, a: NodeId, rows: &[usize]) -> Result<NodeId, TapeError> {
        self.record(Op::GatherRows { rows: rows.to_vec() }, &[a])
    }

    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        self.record(Op::LogSoftmax, &[a])
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        self.record(Op::Sum, &[a])
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        self.record(Op::Mean, &[a])
    }

    pub fn l2_normalize(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        self.record(Op::L2Normalize, &[a])
    }

    pub fn scalar_mul(&mut self, a: NodeId, factor: f64) -> Result<NodeId, TapeError> {
        self.record(Op::ScalarMul { factor }, &[a])
    }

    pub fn clamp_min_zero(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        self.record(Op::ClampMinZero, &[a])
    }

    /// Reverse sweep from a scalar loss. Every node ends up with a gradient;
    /// leaves not reachable from the loss hold zeros.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), TapeError> {
        if loss.0 >= self.nodes.len() {
            return Err(TapeError::UnknownNode(loss.0));
        }
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(TapeError::NonScalarLoss(self.nodes[loss.0].value.shape.clone()));
        }
        let mut grads: Vec<Vec<f64>> =
            self.nodes.iter().map(|n| vec![0.0; n.value.values.len()]).collect();
        grads[loss.0][0] = 1.0;

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if node.inputs.is_empty() {
                continue;
            }
            let out_grad = std::mem::take(&mut grads[id]);
            match &node.op {
                Op::Leaf => {}
                Op::MatMul => {
                    let a = &self.nodes[node.inputs[0].0].value;
                    let b = &self.nodes[node.inputs[1].0].value;
                    let (ga, gb) = matmul_grad(a, b, &out_grad);
                    accumulate(&mut grads[node.inputs[0].0], &ga);
                    accumulate(&mut grads[node.inputs[1].0], &gb);
                }
                Op::Add => {
                    accumulate(&mut grads[node.inputs[0].0], &out_grad);
                    accumulate(&mut grads[node.inputs[1].0], &out_grad);
                }
                Op::Mul => {
                    let a = self.nodes[node.inputs[0].0].value.values.clone();
                    let b = self.nodes[node.inputs[1].0].value.values.clone();
                    for (g, (&og, &bv)) in
                        grads[node.inputs[0].0].iter_mut().zip(out_grad.iter().zip(b.iter()))
                    {
                        *g += og * bv;
                    }
                    for (g, (&og, &av)) in
                        grads[node.inputs[1].0].iter_mut().zip(out_grad.iter().zip(a.iter()))
                    {
                        *g += og * av;
                    }
                }
                Op::Sigmoid => {
                    let y = &node.value.values;
                    for (i, g) in grads[node.inputs[0].0].iter_mut().enumerate() {
                        *g += out_grad[i] * y[i] * (1.0 - y[i]);
                    }
                }
                Op::Tanh => {
                    let y = &node.value.values;
                    for (i, g) in grads[node.inputs[0].0].iter_mut().enumerate() {
                        *g += out_grad[i] * (1.0 - y[i] * y[i]);
                    }
                }
                Op::Relu | Op::ClampMinZero => {
                    let x = &self.nodes[node.inputs[0].0].value.values;
                    for (i, g) in grads[node.inputs[0].0].iter_mut().enumerate() {
                        if x[i] > 0.0 {
                            *g += out_grad[i];
                        }
                    }
                }
                Op::ScalarMul { factor } => {
                    for (i, g) in grads[node.inputs[0].0].iter_mut().enumerate() {
                        *g += out_grad[i] * factor;
                    }
                }
                Op::Concat => {
                    let na = self.nodes[node.inputs[0].0].value.values.len();
                    for (i, g) in grads[node.inputs[0].0].iter_mut().enumerate() {
                        *g += out_grad[i];
                    }
                    for (i, g) in grads[node.inputs[1].0].iter_mut().enumerate() {
                        *g += out_grad[na + i];
                    }
                }
                Op::Slice { start, .. } => {
                    let ga = &mut grads[node.inputs[0].0];
                    for (i, og) in out_grad.iter().enumerate() {
                        ga[start + i] += og;
                    }
                }
                Op::GatherRows { rows } => {
                    let c = node.value.shape[node.value.shape.len() - 1];
                    let ga = &mut grads[node.inputs[0].0];
                    for (k, &row) in rows.iter().enumerate() {
                        for j in 0..c {
                            ga[row * c + j] += out_grad[k * c + j];
                        }
                    }
                }
                Op::LogSoftmax => {
                    let y = &node.value.values;
                    let shape = &node.value.shape;
                    let cols = shape[shape.len() - 1];
                    let ga = &mut grads[node.inputs[0].0];
                    for r in 0..y.len() / cols {
                        let base = r * cols;
                        let total: f64 = out_grad[base..base + cols].iter().sum();
                        for j in 0..cols {
                            ga[base + j] += out_grad[base + j] - y[base + j].exp() * total;
                        }
                    }
                }
                Op::Sum => {
                    let g0 = out_grad[0];
                    for g in grads[node.inputs[0].0].iter_mut() {
                        *g += g0;
                    }
                }
                Op::Mean => {
                    let n = self.nodes[node.inputs[0].0].value.values.len() as f64;
                    let g0 = out_grad[0] / n;
                    for g in grads[node.inputs[0].0].iter_mut() {
                        *g += g0;
                    }
                }
                Op::L2Normalize => {
                    let x = &self.nodes[node.inputs[0].0].value.values;
                    let y = &node.value.values;
                    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let dot: f64 = y.iter().zip(out_grad.iter()).map(|(a, b)| a * b).sum();
                    for (i, g) in grads[node.inputs[0].0].iter_mut().enumerate() {
                        *g += (out_grad[i] - y[i] * dot) / norm;
                    }
                }
            }
            grads[id] = out_grad;
        }

        for (node, g) in self.nodes.iter_mut().zip(grads) {
            node.grad = Some(Tensor { shape: node.value.shape.clone(), values: g });
        }
        Ok(())
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn accumulate(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, TapeError> {
    let mismatch = || TapeError::ShapeMismatch {
        op: "matmul",
        lhs: a.shape.clone(),
        rhs: b.shape.clone(),
    };
    if a.shape.len() != 2 {
        return Err(mismatch());
    }
    let (m, k) = (a.shape[0], a.shape[1]);
    match b.shape.len() {
        // [m,k] x [k] -> [m]
        1 => {
            if b.shape[0] != k {
                return Err(mismatch());
            }
            let mut values = Vec::with_capacity(m);
            for row in a.values.chunks_exact(k) {
                values.push(dot(row, &b.values));
            }
            Ok(Tensor { shape: vec![m], values })
        }
        // [m,k] x [k,n] -> [m,n]
        2 => {
            if b.shape[0] != k {
                return Err(mismatch());
            }
            let n = b.shape[1];
            let mut values = vec![0.0; m * n];
            for (i, row) in a.values.chunks_exact(k).enumerate() {
                let out = &mut values[i * n..(i + 1) * n];
                for (l, &av) in row.iter().enumerate() {
                    let brow = &b.values[l * n..(l + 1) * n];
                    for (o, &bv) in out.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
            Ok(Tensor { shape: vec![m, n], values })
        }
        _ => Err(mismatch()),
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn matmul_grad(a: &Tensor, b: &Tensor, out_grad: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (m, k) = (a.shape[0], a.shape[1]);
    let mut ga = vec![0.0; a.values.len()];
    let mut gb = vec![0.0; b.values.len()];
    if b.shape.len() == 1 {
        // c[m] = A[m,k] b[k]
        for i in 0..m {
            let og = out_grad[i];
            let arow = &a.values[i * k..(i + 1) * k];
            let garow = &mut ga[i * k..(i + 1) * k];
            for l in 0..k {
                garow[l] += og * b.values[l];
                gb[l] += og * arow[l];
            }
        }
    } else {
        let n = b.shape[1];
        // dA = dC B^T ; dB = A^T dC
        for i in 0..m {
            let ogrow = &out_grad[i * n..(i + 1) * n];
            let arow = &a.values[i * k..(i + 1) * k];
            let garow = &mut ga[i * k..(i + 1) * k];
            for l in 0..k {
                let brow = &b.values[l * n..(l + 1) * n];
                garow[l] += dot(ogrow, brow);
                let gbrow = &mut gb[l * n..(l + 1) * n];
                let av = arow[l];
                for (g, &og) in gbrow.iter_mut().zip(ogrow) {
                    *g += av * og;
                }
            }
        }
    }
    (ga, gb)
}

/// Binds successive chunks of a flat point as leaves of arbitrary shape, so a
/// gradient check can cover functions of several tensors at once.
pub struct PointBinder<'a> {
    tape: &'a mut Tape,
    point: &'a [f64],
    offset: usize,
    leaves: Vec<NodeId>,
}

impl<'a> PointBinder<'a> {
    /// Carve the next `product(shape)` coordinates off the point.
    pub fn leaf(&mut self, shape: &[usize]) -> Result<NodeId, TapeError> {
        let n: usize = shape.iter().product();
        if self.offset + n > self.point.len() {
            return Err(TapeError::IndexOutOfRange {
                op: "grad-check leaf",
                index: self.offset + n,
                bound: self.point.len(),
            });
        }
        let t = Tensor::new(shape.to_vec(), self.point[self.offset..self.offset + n].to_vec())?;
        self.offset += n;
        let id = self.tape.leaf(t);
        self.leaves.push(id);
        Ok(id)
    }

    pub fn tape(&mut self) -> &mut Tape {
        self.tape
    }
}

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error("non-finite evaluation at coordinate {coordinate}")]
    NonFiniteEval { coordinate: usize },
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error("scalar function consumed {consumed} coordinates, point has {point}")]
    UnusedCoordinates { consumed: usize, point: usize },
}

/// Compare the tape gradient of a scalar function against central finite
/// differences. Returns the max over coordinates of
/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn grad_check<F>(build: F, point: &[f64], epsilon: f64) -> Result<f64, GradCheckError>
where
    F: Fn(&mut PointBinder) -> Result<NodeId, TapeError>,
{
    assert!(epsilon > 0.0, "epsilon must be positive");

    let run = |coords: &[f64], with_grad: bool| -> Result<(f64, Vec<f64>), GradCheckError> {
        let mut tape = Tape::new();
        let mut binder = PointBinder { tape: &mut tape, point: coords, offset: 0, leaves: Vec::new() };
        let loss = build(&mut binder)?;
        let consumed = binder.offset;
        let leaves = binder.leaves;
        if consumed != coords.len() {
            return Err(GradCheckError::UnusedCoordinates { consumed, point: coords.len() });
        }
        if !tape.value(loss).is_scalar() {
            return Err(TapeError::NonScalarLoss(tape.value(loss).shape().to_vec()).into());
        }
        let v = tape.value(loss).item();
        let mut grad = Vec::new();
        if with_grad {
            tape.backward(loss)?;
            for id in leaves {
                grad.extend_from_slice(tape.grad(id).expect("backward ran").values());
            }
        }
        Ok((v, grad))
    };

    let (_, analytic) = run(point, true)?;
    let mut worst = 0.0f64;
    let mut perturbed = point.to_vec();
    for i in 0..point.len() {
        let orig = perturbed[i];
        perturbed[i] = orig + epsilon;
        let up = run(&perturbed, false).map_err(|e| match e {
            GradCheckError::Tape(TapeError::NonFinite { .. }) => {
                GradCheckError::NonFiniteEval { coordinate: i }
            }
            other => other,
        })?.0;
        perturbed[i] = orig - epsilon;
        let down = run(&perturbed, false).map_err(|e| match e {
            GradCheckError::Tape(TapeError::NonFinite { .. }) => {
                GradCheckError::NonFiniteEval { coordinate: i }
            }
            other => other,
        })?.0;
        perturbed[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(GradCheckError::NonFiniteEval { coordinate: i });
        }
        let numeric = (up - down) / (2.0 * epsilon);
        let denom = (analytic[i].abs() + numeric.abs()).max(1e-8);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn leaf_vec(tape: &mut Tape, v: &[f64]) -> NodeId {
        tape.leaf(Tensor::vector(v.to_vec()).unwrap())
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut tape = Tape::new();
        let x = leaf_vec(&mut tape, &[0.0]);
        let y = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(y).values(), &[0.5]);
    }

    #[test]
    fn matmul_identity_preserves_column() {
        let mut tape = Tape::new();
        let eye = tape.leaf(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let v = leaf_vec(&mut tape, &[3.0, -1.0]);
        let y = tape.matmul(eye, v).unwrap();
        assert_eq!(tape.value(y).values(), &[3.0, -1.0]);
    }

    #[test]
    fn log_softmax_uniform() {
        let mut tape = Tape::new();
        let x = leaf_vec(&mut tape, &[1.0, 1.0, 1.0, 1.0]);
        let y = tape.log_softmax(x).unwrap();
        let expect = -(4.0f64).ln();
        for &v in tape.value(y).values() {
            assert!((v - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn sum_backward_is_all_ones() {
        let mut tape = Tape::new();
        let x = leaf_vec(&mut tape, &[1.0, -2.0, 0.5, 7.0]);
        let loss = tape.sum(x).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().values(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn tanh_grad_at_zero_is_one() {
        let mut tape = Tape::new();
        let x = leaf_vec(&mut tape, &[0.0]);
        let y = tape.tanh(x).unwrap();
        let loss = tape.sum(y).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().values(), &[1.0]);
    }

    #[test]
    fn log_softmax_xent_grad_sums_to_zero_per_row() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::matrix(3, 4, (0..12).map(|i| i as f64 * 0.3 - 1.0).collect()).unwrap());
        let lsm = tape.log_softmax(logits).unwrap();
        // pick one target per row through a mask
        let mut mask = vec![0.0; 12];
        mask[2] = -1.0;
        mask[4 + 1] = -1.0;
        mask[8] = -1.0;
        let m = tape.leaf(Tensor::matrix(3, 4, mask).unwrap());
        let prod = tape.mul(lsm, m).unwrap();
        let loss = tape.sum(prod).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(logits).unwrap().values();
        for r in 0..3 {
            let row_sum: f64 = g[r * 4..(r + 1) * 4].iter().sum();
            assert!(row_sum.abs() < 1e-12, "row {r} grad sum {row_sum}");
        }
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let mut tape = Tape::new();
        let a = leaf_vec(&mut tape, &[1.0, 2.0]);
        let b = leaf_vec(&mut tape, &[1.0, 2.0, 3.0]);
        let err = tape.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2]") && msg.contains("[3]"), "{msg}");
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = leaf_vec(&mut tape, &[1.0, 2.0]);
        assert!(matches!(tape.backward(x), Err(TapeError::NonScalarLoss(_))));
    }

    #[test]
    fn normalize_zero_vector_is_an_error() {
        let mut tape = Tape::new();
        let x = leaf_vec(&mut tape, &[0.0, 0.0]);
        assert!(matches!(tape.l2_normalize(x), Err(TapeError::ZeroNorm)));
    }

    #[test]
    fn grad_check_quadratic() {
        let err = grad_check(
            |b| {
                let x = b.leaf(&[1])?;
                let sq = b.tape().mul(x, x)?;
                b.tape().sum(sq)
            },
            &[3.0],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "relative error {err}");
    }

    #[test]
    fn grad_check_two_layer_tanh_network() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        // 4 -> 8 -> 1 dense tanh net: 4*8 + 8*1 + 8 + 1 + input 4 = 53 live
        // coordinates; pad weights to reach 64 parameters total.
        let point: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let err = grad_check(
            |b| {
                let w1 = b.leaf(&[8, 4])?;
                let x = b.leaf(&[4])?;
                let b1 = b.leaf(&[8])?;
                let w2 = b.leaf(&[1, 8])?;
                let b2 = b.leaf(&[1])?;
                let pad = b.leaf(&[11])?;
                let t = b.tape();
                let h = t.matmul(w1, x)?;
                let h = t.add(h, b1)?;
                let h = t.tanh(h)?;
                let o = t.matmul(w2, h)?;
                let o = t.add(o, b2)?;
                let o = t.tanh(o)?;
                let pad_sq = t.mul(pad, pad)?;
                let pad_sum = t.sum(pad_sq)?;
                let both = t.concat(o, pad_sum)?;
                t.sum(both)
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn grad_check_normalize_dot_fixed_direction() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let x: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
            if x.iter().map(|v| v * v).sum::<f64>().sqrt() < 0.3 {
                continue;
            }
            let u: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let u2 = u.clone();
            let err = grad_check(
                move |b| {
                    let x = b.leaf(&[6])?;
                    let t = b.tape();
                    let y = t.l2_normalize(x)?;
                    let u = t.leaf(Tensor::vector(u2.clone()).unwrap());
                    let p = t.mul(y, u)?;
                    t.sum(p)
                },
                &x,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "relative error {err}");
        }
    }

    #[test]
    fn normalize_grad_orthogonal_to_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let x: Vec<f64> = (0..8).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let u: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut tape = Tape::new();
            let xid = leaf_vec(&mut tape, &x);
            let y = tape.l2_normalize(xid).unwrap();
            let uid = leaf_vec(&mut tape, &u);
            let p = tape.mul(y, uid).unwrap();
            let loss = tape.sum(p).unwrap();
            let ynorm = tape.value(y).values().to_vec();
            tape.backward(loss).unwrap();
            let g = tape.grad(xid).unwrap().values();
            let dot: f64 = g.iter().zip(&ynorm).map(|(a, b)| a * b).sum();
            assert!(dot.abs() < 1e-8, "projection residual {dot}");
        }
    }

    #[test]
    fn replay_is_bit_identical() {
        let build = |tape: &mut Tape| {
            let w = tape.leaf(Tensor::matrix(3, 3, (0..9).map(|i| (i as f64).sin()).collect()).unwrap());
            let x = tape.leaf(Tensor::vector(vec![0.3, -1.2, 2.2]).unwrap());
            let h = tape.matmul(w, x).unwrap();
            let h = tape.tanh(h).unwrap();
            let n = tape.l2_normalize(h).unwrap();
            let loss = tape.mean(n).unwrap();
            tape.backward(loss).unwrap();
            (tape.value(loss).values().to_vec(), tape.grad(w).unwrap().values().to_vec(), tape.grad(x).unwrap().values().to_vec())
        };
        let mut t1 = Tape::new();
        let mut t2 = Tape::new();
        assert_eq!(build(&mut t1), build(&mut t2));
    }

    #[test]
    fn clamp_min_zero_has_zero_subgradient_at_zero() {
        let mut tape = Tape::new();
        let x = leaf_vec(&mut tape, &[0.0, -1.0, 2.0]);
        let y = tape.clamp_min_zero(x).unwrap();
        let loss = tape.sum(y).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().values(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn gather_rows_accumulates_repeated_rows() {
        let mut tape = Tape::new();
        let m = tape.leaf(Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let g = tape.gather_rows(m, &[1, 1, 0]).unwrap();
        assert_eq!(tape.value(g).shape(), &[3, 2]);
        assert_eq!(tape.value(g).values(), &[3.0, 4.0, 3.0, 4.0, 1.0, 2.0]);
        let loss = tape.sum(g).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(m).unwrap().values(), &[1.0, 1.0, 2.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn single_row_gather_is_a_vector() {
        let mut tape = Tape::new();
        let m = tape.leaf(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let g = tape.gather_rows(m, &[1]).unwrap();
        assert_eq!(tape.value(g).shape(), &[3]);
        assert_eq!(tape.value(g).values(), &[4.0, 5.0, 6.0]);
    }
}
