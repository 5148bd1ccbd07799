//! Reverse-mode differentiation over dense `f64` arrays.
//!
//! A [`Graph`] is a tape: every operation appends a node whose parents have
//! strictly smaller indices, so walking the tape backwards is a valid
//! topological order and each node is visited exactly once per
//! [`Graph::backward`] call.
//!
//! Shapes are explicit. The only implicit broadcast is scalar-with-array
//! ([`Graph::scale`]); row-vector broadcasts go through the named
//! [`Graph::add_row`], [`Graph::mul_row`] and [`Graph::repeat_row`] ops.
//!
//! Masked log-probabilities are represented by [`MASKED_LOGPROB`] rather
//! than `-inf`, which keeps downstream arithmetic finite.

use thiserror::Error;

/// Log-probability assigned to masked positions by [`Graph::log_softmax`].
pub const MASKED_LOGPROB: f64 = -1e30;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("log_softmax: every position is masked")]
    EmptySupport,
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
}

fn dim_err(op: &'static str, detail: impl Into<String>) -> DiffError {
    DiffError::Dimension {
        op,
        detail: detail.into(),
    }
}

/// Dense row-major array. A scalar has an empty shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Array {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self, DiffError> {
        if shape.iter().any(|&d| d == 0) {
            return Err(dim_err("array", format!("zero-sized dimension in {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(dim_err(
                "array",
                format!("shape {shape:?} needs {expected} values, got {}", values.len()),
            ));
        }
        Ok(Self { shape, values })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            values: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: Vec::new(),
            values: vec![v],
        }
    }

    /// 1-D array. Panics on an empty input.
    pub fn vector(values: Vec<f64>) -> Self {
        assert!(!values.is_empty(), "empty vector");
        Self {
            shape: vec![values.len()],
            values,
        }
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self, DiffError> {
        Self::new(vec![rows, cols], values)
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

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    /// The single value of a one-element array.
    pub fn item(&self) -> f64 {
        assert_eq!(self.values.len(), 1, "item() on array of shape {:?}", self.shape);
        self.values[0]
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    fn rows_cols(&self, op: &'static str) -> Result<(usize, usize), DiffError> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(dim_err(op, format!("expected a matrix, got shape {s:?}"))),
        }
    }

    fn add_assign(&mut self, other: &Array) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Tanh,
    Relu,
    Exp,
    Log,
    Square,
    Neg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Binary(Binary, NodeId, NodeId),
    Unary(Elementwise, NodeId),
    Scale(NodeId, f64),
    MatMul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    RepeatRow(NodeId),
    GatherRows(NodeId, Vec<usize>),
    MeanRows(NodeId),
    ConcatCols(Vec<NodeId>),
    Concat(Vec<NodeId>),
    SliceRows(NodeId, usize),
    MaxPoolRows(NodeId, Vec<usize>),
    LogSoftmax(NodeId, Option<Vec<bool>>),
    Pick(NodeId, usize),
    Sum(NodeId),
    Dot(NodeId, NodeId),
    Reshape(NodeId),
    WindowSum(NodeId, usize),
    ClampMin(NodeId, f64),
}

#[derive(Debug)]
struct Node {
    value: Array,
    op: Op,
    requires_grad: bool,
}

/// A single-threaded computation tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Array>>,
}

impl Gradients {
    /// Gradient for `id`, or `None` when nothing flowed into it.
    pub fn get(&self, id: NodeId) -> Option<&Array> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Takes ownership of the gradient for `id`, leaving `None` behind.
    pub fn take(&mut self, id: NodeId) -> Option<Array> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
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

    pub fn value(&self, id: NodeId) -> &Array {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Array, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Array) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Array) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Same values as `a`; gradients do not flow back through the result.
    pub fn detach(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a.0].value.clone();
        self.constant(value)
    }

    pub fn binary(&mut self, kind: Binary, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape != vb.shape {
            return Err(dim_err(
                "binary",
                format!("{:?} vs {:?}", va.shape, vb.shape),
            ));
        }
        let values = va
            .values
            .iter()
            .zip(&vb.values)
            .map(|(x, y)| match kind {
                Binary::Add => x + y,
                Binary::Sub => x - y,
                Binary::Mul => x * y,
            })
            .collect();
        let value = Array {
            shape: va.shape.clone(),
            values,
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Binary(kind, a, b), rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn unary(&mut self, kind: Elementwise, a: NodeId) -> Result<NodeId, DiffError> {
        let va = &self.nodes[a.0].value;
        if kind == Elementwise::Log {
            if let Some(bad) = va.values.iter().find(|&&v| !(v > 0.0)) {
                return Err(DiffError::Domain {
                    op: "log",
                    detail: format!("non-positive input {bad}"),
                });
            }
        }
        let f: fn(f64) -> f64 = match kind {
            Elementwise::Tanh => f64::tanh,
            Elementwise::Relu => |x| x.max(0.0),
            Elementwise::Exp => f64::exp,
            Elementwise::Log => f64::ln,
            Elementwise::Square => |x| x * x,
            Elementwise::Neg => |x| -x,
        };
        let value = Array {
            shape: va.shape.clone(),
            values: va.values.iter().map(|&x| f(x)).collect(),
        };
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Unary(kind, a), rg))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(Elementwise::Tanh, a).expect("tanh is total")
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(Elementwise::Relu, a).expect("relu is total")
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(Elementwise::Exp, a).expect("exp is total")
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.unary(Elementwise::Log, a)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.unary(Elementwise::Square, a).expect("square is total")
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.unary(Elementwise::Neg, a).expect("neg is total")
    }

    /// Multiply every element by a scalar constant.
    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let va = &self.nodes[a.0].value;
        let value = Array {
            shape: va.shape.clone(),
            values: va.values.iter().map(|x| x * c).collect(),
        };
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, k) = va.rows_cols("matmul")?;
        let (k2, n) = vb.rows_cols("matmul")?;
        if k != k2 {
            return Err(dim_err("matmul", format!("[{m}x{k}] x [{k2}x{n}]")));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(&va.values, &vb.values, &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Array {
                shape: vec![m, n],
                values: out,
            },
            Op::MatMul(a, b),
            rg,
        ))
    }

    fn row_op_check(&self, a: NodeId, r: NodeId, op: &'static str) -> Result<(usize, usize), DiffError> {
        let (n, d) = self.nodes[a.0].value.rows_cols(op)?;
        let vr = &self.nodes[r.0].value;
        if vr.shape != [d] {
            return Err(dim_err(op, format!("row of shape {:?} for [{n}x{d}]", vr.shape)));
        }
        Ok((n, d))
    }

    /// `a[i, j] + r[j]` for a matrix `a` and vector `r`.
    pub fn add_row(&mut self, a: NodeId, r: NodeId) -> Result<NodeId, DiffError> {
        let (_, d) = self.row_op_check(a, r, "add_row")?;
        let (va, vr) = (&self.nodes[a.0].value, &self.nodes[r.0].value);
        let values = va
            .values
            .iter()
            .enumerate()
            .map(|(i, x)| x + vr.values[i % d])
            .collect();
        let value = Array {
            shape: va.shape.clone(),
            values,
        };
        let rg = self.rg(&[a, r]);
        Ok(self.push(value, Op::AddRow(a, r), rg))
    }

    /// `a[i, j] * r[j]` for a matrix `a` and vector `r`.
    pub fn mul_row(&mut self, a: NodeId, r: NodeId) -> Result<NodeId, DiffError> {
        let (_, d) = self.row_op_check(a, r, "mul_row")?;
        let (va, vr) = (&self.nodes[a.0].value, &self.nodes[r.0].value);
        let values = va
            .values
            .iter()
            .enumerate()
            .map(|(i, x)| x * vr.values[i % d])
            .collect();
        let value = Array {
            shape: va.shape.clone(),
            values,
        };
        let rg = self.rg(&[a, r]);
        Ok(self.push(value, Op::MulRow(a, r), rg))
    }

    /// Stack `n` copies of vector `r` into an `[n x d]` matrix.
    pub fn repeat_row(&mut self, r: NodeId, n: usize) -> Result<NodeId, DiffError> {
        let vr = &self.nodes[r.0].value;
        if vr.shape.len() != 1 || n == 0 {
            return Err(dim_err("repeat_row", format!("{:?} x {n}", vr.shape)));
        }
        let d = vr.shape[0];
        let mut values = Vec::with_capacity(n * d);
        for _ in 0..n {
            values.extend_from_slice(&vr.values);
        }
        let rg = self.rg(&[r]);
        Ok(self.push(
            Array {
                shape: vec![n, d],
                values,
            },
            Op::RepeatRow(r),
            rg,
        ))
    }

    /// Rows of `table` selected by `ids` (embedding lookup).
    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId, DiffError> {
        let vt = &self.nodes[table.0].value;
        let (rows, d) = vt.rows_cols("gather_rows")?;
        if ids.is_empty() {
            return Err(dim_err("gather_rows", "no ids"));
        }
        let mut values = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= rows {
                return Err(dim_err("gather_rows", format!("row {i} of {rows}")));
            }
            values.extend_from_slice(&vt.values[i * d..(i + 1) * d]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Array {
                shape: vec![ids.len(), d],
                values,
            },
            Op::GatherRows(table, ids.to_vec()),
            rg,
        ))
    }

    /// Column means of a matrix, as a vector.
    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        let va = &self.nodes[a.0].value;
        let (n, d) = va.rows_cols("mean_rows")?;
        let mut values = vec![0.0; d];
        for row in va.values.chunks_exact(d) {
            for (acc, x) in values.iter_mut().zip(row) {
                *acc += x;
            }
        }
        let inv = 1.0 / n as f64;
        values.iter_mut().for_each(|v| *v *= inv);
        let rg = self.rg(&[a]);
        Ok(self.push(Array::vector(values), Op::MeanRows(a), rg))
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, DiffError> {
        if parts.is_empty() {
            return Err(dim_err("concat_cols", "no inputs"));
        }
        let mut widths = Vec::with_capacity(parts.len());
        let (n, _) = self.nodes[parts[0].0].value.rows_cols("concat_cols")?;
        for p in parts {
            let (r, c) = self.nodes[p.0].value.rows_cols("concat_cols")?;
            if r != n {
                return Err(dim_err("concat_cols", format!("row counts {n} vs {r}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut values = Vec::with_capacity(n * total);
        for i in 0..n {
            for (p, &w) in parts.iter().zip(&widths) {
                values.extend_from_slice(&self.nodes[p.0].value.values[i * w..(i + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Array {
                shape: vec![n, total],
                values,
            },
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    /// Concatenate scalars and vectors into one vector.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId, DiffError> {
        if parts.is_empty() {
            return Err(dim_err("concat", "no inputs"));
        }
        let mut values = Vec::new();
        for p in parts {
            let v = &self.nodes[p.0].value;
            if v.shape.len() > 1 {
                return Err(dim_err("concat", format!("shape {:?}", v.shape)));
            }
            values.extend_from_slice(&v.values);
        }
        let rg = self.rg(parts);
        Ok(self.push(Array::vector(values), Op::Concat(parts.to_vec()), rg))
    }

    /// Rows `start..end` along the leading axis (works for vectors and matrices).
    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId, DiffError> {
        let va = &self.nodes[a.0].value;
        let Some(&lead) = va.shape.first() else {
            return Err(dim_err("slice_rows", "scalar input"));
        };
        if start >= end || end > lead {
            return Err(dim_err("slice_rows", format!("{start}..{end} of {lead}")));
        }
        let stride: usize = va.shape[1..].iter().product();
        let mut shape = va.shape.clone();
        shape[0] = end - start;
        let values = va.values[start * stride..end * stride].to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(Array { shape, values }, Op::SliceRows(a, start), rg))
    }

    /// Columnwise maximum of an `[n x d]` matrix. Ties go to the lowest row.
    pub fn max_pool_rows(&mut self, h: NodeId) -> Result<NodeId, DiffError> {
        let vh = &self.nodes[h.0].value;
        let (n, d) = vh.rows_cols("max_pool_rows")?;
        let mut best = vh.values[..d].to_vec();
        let mut argmax = vec![0usize; d];
        for i in 1..n {
            let row = &vh.values[i * d..(i + 1) * d];
            for j in 0..d {
                if row[j] > best[j] {
                    best[j] = row[j];
                    argmax[j] = i;
                }
            }
        }
        let rg = self.rg(&[h]);
        Ok(self.push(Array::vector(best), Op::MaxPoolRows(h, argmax), rg))
    }

    /// Log-softmax of a score vector. Masked positions (`mask[i] == true`)
    /// receive [`MASKED_LOGPROB`] and no gradient.
    pub fn log_softmax(&mut self, scores: NodeId, mask: Option<&[bool]>) -> Result<NodeId, DiffError> {
        let vs = &self.nodes[scores.0].value;
        if vs.shape.len() != 1 {
            return Err(dim_err("log_softmax", format!("shape {:?}", vs.shape)));
        }
        if let Some(m) = mask {
            if m.len() != vs.len() {
                return Err(dim_err("log_softmax", format!("mask {} vs {}", m.len(), vs.len())));
            }
        }
        let masked = |i: usize| mask.is_some_and(|m| m[i]);
        let max = (0..vs.len())
            .filter(|&i| !masked(i))
            .map(|i| vs.values[i])
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(DiffError::EmptySupport);
        }
        let sum: f64 = (0..vs.len())
            .filter(|&i| !masked(i))
            .map(|i| (vs.values[i] - max).exp())
            .sum();
        let lse = max + sum.ln();
        let values = (0..vs.len())
            .map(|i| if masked(i) { MASKED_LOGPROB } else { vs.values[i] - lse })
            .collect();
        let rg = self.rg(&[scores]);
        Ok(self.push(
            Array::vector(values),
            Op::LogSoftmax(scores, mask.map(|m| m.to_vec())),
            rg,
        ))
    }

    /// Element `index` of a vector, as a scalar.
    pub fn pick(&mut self, a: NodeId, index: usize) -> Result<NodeId, DiffError> {
        let va = &self.nodes[a.0].value;
        if va.shape.len() != 1 || index >= va.len() {
            return Err(dim_err("pick", format!("index {index} of {:?}", va.shape)));
        }
        let v = va.values[index];
        let rg = self.rg(&[a]);
        Ok(self.push(Array::scalar(v), Op::Pick(a, index), rg))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v: f64 = self.nodes[a.0].value.values.iter().sum();
        let rg = self.rg(&[a]);
        self.push(Array::scalar(v), Op::Sum(a), rg)
    }

    /// Inner product of two same-shaped arrays.
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape != vb.shape {
            return Err(dim_err("dot", format!("{:?} vs {:?}", va.shape, vb.shape)));
        }
        let v = va.values.iter().zip(&vb.values).map(|(x, y)| x * y).sum();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Array::scalar(v), Op::Dot(a, b), rg))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId, DiffError> {
        let va = &self.nodes[a.0].value;
        let value = Array::new(shape.to_vec(), va.values.clone())?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// `out[s] = a[s] + a[s+1] + ... + a[min(s+width, n) - 1]` for a vector,
    /// computed with prefix sums.
    pub fn window_sum(&mut self, a: NodeId, width: usize) -> Result<NodeId, DiffError> {
        let va = &self.nodes[a.0].value;
        if va.shape.len() != 1 || width == 0 {
            return Err(dim_err("window_sum", format!("{:?} width {width}", va.shape)));
        }
        let prefix = prefix_sums(&va.values);
        let n = va.len();
        let values = (0..n).map(|s| prefix[(s + width).min(n)] - prefix[s]).collect();
        let rg = self.rg(&[a]);
        Ok(self.push(Array::vector(values), Op::WindowSum(a, width), rg))
    }

    /// `max(a, floor)` elementwise; clamped elements pass no gradient.
    pub fn clamp_min(&mut self, a: NodeId, floor: f64) -> NodeId {
        let va = &self.nodes[a.0].value;
        let value = Array {
            shape: va.shape.clone(),
            values: va.values.iter().map(|x| x.max(floor)).collect(),
        };
        let rg = self.rg(&[a]);
        self.push(value, Op::ClampMin(a, floor), rg)
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, DiffError> {
        let lv = &self.nodes[loss.0].value;
        if !lv.is_scalar() {
            return Err(DiffError::NotScalar(lv.shape.clone()));
        }
        let mut grads: Vec<Option<Array>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Array::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Array>], id: NodeId, contribution: Array) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(existing) => existing.add_assign(&contribution),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn with_values(&self, id: NodeId, values: Vec<f64>) -> Array {
        Array {
            shape: self.nodes[id.0].value.shape.clone(),
            values,
        }
    }

    fn propagate(&self, node: &Node, g: &Array, grads: &mut [Option<Array>]) {
        let gv = &g.values;
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => {
                let (va, vb) = (&self.nodes[a.0].value.values, &self.nodes[b.0].value.values);
                let (ga, gb): (Vec<f64>, Vec<f64>) = match kind {
                    Binary::Add => (gv.clone(), gv.clone()),
                    Binary::Sub => (gv.clone(), gv.iter().map(|x| -x).collect()),
                    Binary::Mul => (
                        gv.iter().zip(vb).map(|(g, y)| g * y).collect(),
                        gv.iter().zip(va).map(|(g, x)| g * x).collect(),
                    ),
                };
                let ga = self.with_values(*a, ga);
                let gb = self.with_values(*b, gb);
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Unary(kind, a) => {
                let x = &self.nodes[a.0].value.values;
                let y = &node.value.values;
                let ga: Vec<f64> = match kind {
                    Elementwise::Tanh => gv.iter().zip(y).map(|(g, t)| g * (1.0 - t * t)).collect(),
                    Elementwise::Relu => gv
                        .iter()
                        .zip(x)
                        .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                        .collect(),
                    Elementwise::Exp => gv.iter().zip(y).map(|(g, e)| g * e).collect(),
                    Elementwise::Log => gv.iter().zip(x).map(|(g, v)| g / v).collect(),
                    Elementwise::Square => gv.iter().zip(x).map(|(g, v)| 2.0 * g * v).collect(),
                    Elementwise::Neg => gv.iter().map(|g| -g).collect(),
                };
                let ga = self.with_values(*a, ga);
                self.accumulate(grads, *a, ga);
            }
            Op::Scale(a, c) => {
                let ga = self.with_values(*a, gv.iter().map(|x| x * c).collect());
                self.accumulate(grads, *a, ga);
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k) = (va.shape[0], va.shape[1]);
                let n = vb.shape[1];
                if self.nodes[a.0].requires_grad {
                    // dA = G Bᵀ
                    let mut ga = vec![0.0; m * k];
                    for i in 0..m {
                        let grow = &gv[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &vb.values[p * n..(p + 1) * n];
                            ga[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    let ga = self.with_values(*a, ga);
                    self.accumulate(grads, *a, ga);
                }
                if self.nodes[b.0].requires_grad {
                    // dB = Aᵀ G
                    let mut gb = vec![0.0; k * n];
                    for i in 0..m {
                        let grow = &gv[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = va.values[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            for (acc, x) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *acc += aip * x;
                            }
                        }
                    }
                    let gb = self.with_values(*b, gb);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::AddRow(a, r) => {
                let d = self.nodes[r.0].value.len();
                let mut gr = vec![0.0; d];
                for row in gv.chunks_exact(d) {
                    for (acc, x) in gr.iter_mut().zip(row) {
                        *acc += x;
                    }
                }
                let ga = self.with_values(*a, gv.clone());
                let gr = self.with_values(*r, gr);
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *r, gr);
            }
            Op::MulRow(a, r) => {
                let va = &self.nodes[a.0].value.values;
                let vr = &self.nodes[r.0].value.values;
                let d = vr.len();
                let mut gr = vec![0.0; d];
                let mut ga = Vec::with_capacity(gv.len());
                for (i, (gx, x)) in gv.iter().zip(va).enumerate() {
                    ga.push(gx * vr[i % d]);
                    gr[i % d] += gx * x;
                }
                let ga = self.with_values(*a, ga);
                let gr = self.with_values(*r, gr);
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *r, gr);
            }
            Op::RepeatRow(r) => {
                let d = self.nodes[r.0].value.len();
                let mut gr = vec![0.0; d];
                for row in gv.chunks_exact(d) {
                    for (acc, x) in gr.iter_mut().zip(row) {
                        *acc += x;
                    }
                }
                let gr = self.with_values(*r, gr);
                self.accumulate(grads, *r, gr);
            }
            Op::GatherRows(table, ids) => {
                let vt = &self.nodes[table.0].value;
                let d = vt.shape[1];
                let mut gt = vec![0.0; vt.len()];
                for (row, &i) in gv.chunks_exact(d).zip(ids) {
                    for (acc, x) in gt[i * d..(i + 1) * d].iter_mut().zip(row) {
                        *acc += x;
                    }
                }
                let gt = self.with_values(*table, gt);
                self.accumulate(grads, *table, gt);
            }
            Op::MeanRows(a) => {
                let n = self.nodes[a.0].value.shape[0];
                let inv = 1.0 / n as f64;
                let mut ga = Vec::with_capacity(n * gv.len());
                for _ in 0..n {
                    ga.extend(gv.iter().map(|x| x * inv));
                }
                let ga = self.with_values(*a, ga);
                self.accumulate(grads, *a, ga);
            }
            Op::ConcatCols(parts) => {
                let n = node.value.shape[0];
                let total = node.value.shape[1];
                let mut offset = 0;
                for p in parts {
                    let w = self.nodes[p.0].value.shape[1];
                    let mut gp = Vec::with_capacity(n * w);
                    for i in 0..n {
                        gp.extend_from_slice(&gv[i * total + offset..i * total + offset + w]);
                    }
                    offset += w;
                    let gp = self.with_values(*p, gp);
                    self.accumulate(grads, *p, gp);
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.nodes[p.0].value.len();
                    let gp = self.with_values(*p, gv[offset..offset + len].to_vec());
                    offset += len;
                    self.accumulate(grads, *p, gp);
                }
            }
            Op::SliceRows(a, start) => {
                let va = &self.nodes[a.0].value;
                let stride: usize = va.shape[1..].iter().product();
                let mut ga = vec![0.0; va.len()];
                ga[start * stride..start * stride + gv.len()].copy_from_slice(gv);
                let ga = self.with_values(*a, ga);
                self.accumulate(grads, *a, ga);
            }
            Op::MaxPoolRows(h, argmax) => {
                let vh = &self.nodes[h.0].value;
                let d = vh.shape[1];
                let mut gh = vec![0.0; vh.len()];
                for (j, &i) in argmax.iter().enumerate() {
                    gh[i * d + j] += gv[j];
                }
                let gh = self.with_values(*h, gh);
                self.accumulate(grads, *h, gh);
            }
            Op::LogSoftmax(s, mask) => {
                let y = &node.value.values;
                let masked = |i: usize| mask.as_ref().is_some_and(|m| m[i]);
                let total: f64 = (0..y.len()).filter(|&i| !masked(i)).map(|i| gv[i]).sum();
                let gs = (0..y.len())
                    .map(|i| if masked(i) { 0.0 } else { gv[i] - y[i].exp() * total })
                    .collect();
                let gs = self.with_values(*s, gs);
                self.accumulate(grads, *s, gs);
            }
            Op::Pick(a, index) => {
                let mut ga = vec![0.0; self.nodes[a.0].value.len()];
                ga[*index] = gv[0];
                let ga = self.with_values(*a, ga);
                self.accumulate(grads, *a, ga);
            }
            Op::Sum(a) => {
                let ga = self.with_values(*a, vec![gv[0]; self.nodes[a.0].value.len()]);
                self.accumulate(grads, *a, ga);
            }
            Op::Dot(a, b) => {
                let (va, vb) = (&self.nodes[a.0].value.values, &self.nodes[b.0].value.values);
                let ga = self.with_values(*a, vb.iter().map(|y| y * gv[0]).collect());
                let gb = self.with_values(*b, va.iter().map(|x| x * gv[0]).collect());
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Reshape(a) => {
                let ga = self.with_values(*a, gv.clone());
                self.accumulate(grads, *a, ga);
            }
            Op::WindowSum(a, width) => {
                // a[e] feeds out[s] for s in (e - width, e].
                let n = gv.len();
                let prefix = prefix_sums(gv);
                let ga = (0..n)
                    .map(|e| prefix[e + 1] - prefix[(e + 1).saturating_sub(*width)])
                    .collect();
                let ga = self.with_values(*a, ga);
                self.accumulate(grads, *a, ga);
            }
            Op::ClampMin(a, floor) => {
                let x = &self.nodes[a.0].value.values;
                let ga = gv
                    .iter()
                    .zip(x)
                    .map(|(g, v)| if *v > *floor { *g } else { 0.0 })
                    .collect();
                let ga = self.with_values(*a, ga);
                self.accumulate(grads, *a, ga);
            }
        }
    }
}

fn prefix_sums(values: &[f64]) -> Vec<f64> {
    let mut prefix = Vec::with_capacity(values.len() + 1);
    prefix.push(0.0);
    let mut acc = 0.0;
    for v in values {
        acc += v;
        prefix.push(acc);
    }
    prefix
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (o, x) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += aip * x;
            }
        }
    }
}
