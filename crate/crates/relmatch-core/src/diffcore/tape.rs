//! Reverse-mode differentiation over a recorded operation tape.
//!
//! A `Tape` is an arena of nodes in topological order. Forward primitives
//! append nodes; `backward` walks the arena in reverse, accumulating
//! gradients for every node that (transitively) depends on a parameter.
//! A tape is single-use: after `backward` it refuses to run again.

use super::array::Array;
use crate::error::{Error, Result};

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum UnaryKind {
    Neg,
    Sigmoid,
    Tanh,
    Exp,
    Log,
    Sqrt,
    /// `[x]_+ = max(x, 0)`, subgradient 0 at the kink.
    Relu,
    Abs,
    Scale(f64),
    AddScalar(f64),
    /// `max(x, c)`; gradient passes only where `x > c`.
    ClampMin(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Unary(UnaryKind, NodeId),
    /// Elementwise; one operand may be a scalar, broadcast over the other.
    Binary(BinaryKind, NodeId, NodeId),
    /// `(r x c) . (c x n) -> (r x n)` or `(r x c) . (c) -> (r)`.
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Reshape(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    /// Column means of a matrix: `(r x c) -> (c)`.
    MeanRows(NodeId),
    L2Norm(NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    SliceRows {
        input: NodeId,
        start: usize,
    },
    /// Row lookup by index; duplicate indices accumulate on backward.
    GatherRows {
        input: NodeId,
        indices: Vec<usize>,
    },
    ConcatRows(Vec<NodeId>),
}

struct Node {
    op: Op,
    value: Array,
    requires_grad: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Array>>,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record a trainable leaf; gradients will be available after backward.
    pub fn param(&mut self, value: Array) -> NodeId {
        self.push_leaf(value, true)
    }

    /// Record a non-trainable leaf (inputs, constants).
    pub fn constant(&mut self, value: Array) -> NodeId {
        self.push_leaf(value, false)
    }

    pub fn scalar(&mut self, value: f64) -> NodeId {
        self.constant(Array::scalar(value))
    }

    fn push_leaf(&mut self, value: Array, requires_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad,
        });
        self.grads.push(None);
        id
    }

    pub fn value(&self, id: NodeId) -> &Array {
        &self.nodes[id.0].value
    }

    /// Gradient of the last backward pass; `None` for nodes off the loss path
    /// or not requiring gradient.
    pub fn grad(&self, id: NodeId) -> Option<&Array> {
        self.grads[id.0].as_ref()
    }

    /// Gradient, or zeros of the node's shape when the node was unreachable.
    pub fn grad_or_zeros(&self, id: NodeId) -> Array {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Array::zeros(self.nodes[id.0].value.shape()),
        }
    }

    fn push(&mut self, op: Op, value: Array, op_name: &'static str) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::Unary(_, a)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::MeanRows(a)
            | Op::L2Norm(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::SliceRows { input: a, .. }
            | Op::GatherRows { input: a, .. } => self.nodes[a.0].requires_grad,
            Op::Binary(_, a, b) | Op::MatMul(a, b) => {
                self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad
            }
            Op::ConcatRows(ids) => ids.iter().any(|id| self.nodes[id.0].requires_grad),
        };
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        self.grads.push(None);
        Ok(id)
    }

    // ---- elementwise unary ----------------------------------------------

    fn unary(&mut self, kind: UnaryKind, a: NodeId, name: &'static str) -> Result<NodeId> {
        let x = &self.nodes[a.0].value;
        let value = match kind {
            UnaryKind::Neg => x.map(|v| -v),
            UnaryKind::Sigmoid => x.map(sigmoid),
            UnaryKind::Tanh => x.map(f64::tanh),
            UnaryKind::Exp => x.map(f64::exp),
            UnaryKind::Log => x.map(f64::ln),
            UnaryKind::Sqrt => x.map(f64::sqrt),
            UnaryKind::Relu => x.map(|v| v.max(0.0)),
            UnaryKind::Abs => x.map(f64::abs),
            UnaryKind::Scale(c) => x.map(|v| v * c),
            UnaryKind::AddScalar(c) => x.map(|v| v + c),
            UnaryKind::ClampMin(c) => x.map(|v| v.max(c)),
        };
        self.push(Op::Unary(kind, a), value, name)
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(UnaryKind::Neg, a, "neg")
    }
    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(UnaryKind::Sigmoid, a, "sigmoid")
    }
    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(UnaryKind::Tanh, a, "tanh")
    }
    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(UnaryKind::Exp, a, "exp")
    }
    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(UnaryKind::Log, a, "log")
    }
    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(UnaryKind::Sqrt, a, "sqrt")
    }
    /// Positive part `[x]_+`.
    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(UnaryKind::Relu, a, "relu")
    }
    pub fn abs(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(UnaryKind::Abs, a, "abs")
    }
    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.unary(UnaryKind::Scale(c), a, "scale")
    }
    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.unary(UnaryKind::AddScalar(c), a, "add_scalar")
    }
    pub fn clamp_min(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.unary(UnaryKind::ClampMin(c), a, "clamp_min")
    }

    /// `1 - x`, elementwise.
    pub fn one_minus(&mut self, a: NodeId) -> Result<NodeId> {
        let neg = self.scale(a, -1.0)?;
        self.add_scalar(neg, 1.0)
    }

    // ---- elementwise binary (scalar operands broadcast) ------------------

    fn binary(&mut self, kind: BinaryKind, a: NodeId, b: NodeId, name: &'static str) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let compatible = va.shape() == vb.shape() || va.is_scalar() || vb.is_scalar();
        if !compatible {
            return Err(Error::ShapeMismatch {
                op: name,
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let f = match kind {
            BinaryKind::Add => |x: f64, y: f64| x + y,
            BinaryKind::Sub => |x: f64, y: f64| x - y,
            BinaryKind::Mul => |x: f64, y: f64| x * y,
            BinaryKind::Div => |x: f64, y: f64| x / y,
        };
        let value = if va.shape() == vb.shape() {
            let data = va
                .data()
                .iter()
                .zip(vb.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            Array::from_vec(va.shape().to_vec(), data)?
        } else if vb.is_scalar() {
            let s = vb.scalar_value();
            va.map(|x| f(x, s))
        } else {
            let s = va.scalar_value();
            vb.map(|y| f(s, y))
        };
        self.push(Op::Binary(kind, a, b), value, name)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryKind::Add, a, b, "add")
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryKind::Sub, a, b, "sub")
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryKind::Mul, a, b, "mul")
    }
    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryKind::Div, a, b, "div")
    }

    /// Sum of several same-shaped nodes.
    pub fn add_n(&mut self, ids: &[NodeId]) -> Result<NodeId> {
        let mut acc = ids[0];
        for &id in &ids[1..] {
            acc = self.add(acc, id)?;
        }
        Ok(acc)
    }

    /// Inner product of two vectors (or same-shaped arrays).
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let prod = self.mul(a, b)?;
        self.sum(prod)
    }

    // ---- linear algebra ---------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.ndim() != 2 {
            return Err(Error::BadRank {
                op: "matmul",
                expected: "a 2-D left operand",
                shape: va.shape().to_vec(),
            });
        }
        let (r, c) = (va.shape()[0], va.shape()[1]);
        let value = match vb.ndim() {
            2 => {
                let (c2, n) = (vb.shape()[0], vb.shape()[1]);
                if c != c2 {
                    return Err(Error::ShapeMismatch {
                        op: "matmul",
                        lhs: va.shape().to_vec(),
                        rhs: vb.shape().to_vec(),
                    });
                }
                let mut out = vec![0.0; r * n];
                for i in 0..r {
                    for kk in 0..c {
                        let aik = va.data()[i * c + kk];
                        if aik == 0.0 {
                            continue;
                        }
                        let brow = &vb.data()[kk * n..(kk + 1) * n];
                        let orow = &mut out[i * n..(i + 1) * n];
                        for j in 0..n {
                            orow[j] += aik * brow[j];
                        }
                    }
                }
                Array::from_vec(vec![r, n], out)?
            }
            1 => {
                if c != vb.len() {
                    return Err(Error::ShapeMismatch {
                        op: "matmul",
                        lhs: va.shape().to_vec(),
                        rhs: vb.shape().to_vec(),
                    });
                }
                let mut out = vec![0.0; r];
                for i in 0..r {
                    let row = &va.data()[i * c..(i + 1) * c];
                    out[i] = row.iter().zip(vb.data()).map(|(&x, &y)| x * y).sum();
                }
                Array::vector(out)
            }
            _ => {
                return Err(Error::BadRank {
                    op: "matmul",
                    expected: "a 1-D or 2-D right operand",
                    shape: vb.shape().to_vec(),
                })
            }
        };
        self.push(Op::MatMul(a, b), value, "matmul")
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let v = &self.nodes[a.0].value;
        if v.ndim() != 2 {
            return Err(Error::BadRank {
                op: "transpose",
                expected: "a 2-D operand",
                shape: v.shape().to_vec(),
            });
        }
        let (r, c) = (v.shape()[0], v.shape()[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v.data()[i * c + j];
            }
        }
        let value = Array::from_vec(vec![c, r], out)?;
        self.push(Op::Transpose(a), value, "transpose")
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = &self.nodes[a.0].value;
        if shape.iter().product::<usize>() != v.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: v.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let value = v.clone().reshaped(shape.to_vec());
        self.push(Op::Reshape(a), value, "reshape")
    }

    // ---- reductions -------------------------------------------------------

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.nodes[a.0].value.data().iter().sum();
        self.push(Op::Sum(a), Array::scalar(v), "sum")
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let x = &self.nodes[a.0].value;
        let v = x.data().iter().sum::<f64>() / x.len() as f64;
        self.push(Op::Mean(a), Array::scalar(v), "mean")
    }

    /// Column means of a matrix, i.e. the mean of its row vectors.
    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let v = &self.nodes[a.0].value;
        if v.ndim() != 2 {
            return Err(Error::BadRank {
                op: "mean_rows",
                expected: "a 2-D operand",
                shape: v.shape().to_vec(),
            });
        }
        let (r, c) = (v.shape()[0], v.shape()[1]);
        let mut out = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                out[j] += v.data()[i * c + j];
            }
        }
        for o in &mut out {
            *o /= r as f64;
        }
        self.push(Op::MeanRows(a), Array::vector(out), "mean_rows")
    }

    /// Euclidean norm, as a scalar node. Gradient at the zero array is zero.
    pub fn l2norm(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.nodes[a.0]
            .value
            .data()
            .iter()
            .map(|&x| x * x)
            .sum::<f64>()
            .sqrt();
        self.push(Op::L2Norm(a), Array::scalar(v), "l2norm")
    }

    // ---- softmax ----------------------------------------------------------

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let v = &self.nodes[a.0].value;
        if v.ndim() != 1 {
            return Err(Error::BadRank {
                op: "softmax",
                expected: "a 1-D operand",
                shape: v.shape().to_vec(),
            });
        }
        let value = Array::vector(softmax_vec(v.data()));
        self.push(Op::Softmax(a), value, "softmax")
    }

    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let v = &self.nodes[a.0].value;
        if v.ndim() != 1 {
            return Err(Error::BadRank {
                op: "log_softmax",
                expected: "a 1-D operand",
                shape: v.shape().to_vec(),
            });
        }
        let max = v.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max
            + v.data()
                .iter()
                .map(|&x| (x - max).exp())
                .sum::<f64>()
                .ln();
        let value = v.map(|x| x - lse);
        self.push(Op::LogSoftmax(a), value, "log_softmax")
    }

    // ---- indexing and concatenation ----------------------------------------

    /// Rows `start..start+count` of a matrix, or that element range of a vector.
    pub fn slice_rows(&mut self, a: NodeId, start: usize, count: usize) -> Result<NodeId> {
        let v = &self.nodes[a.0].value;
        let rows = v.shape()[0];
        if start + count > rows || count == 0 {
            return Err(Error::SliceOutOfBounds {
                start,
                count,
                len: rows,
            });
        }
        let stride = v.len() / rows;
        let data = v.data()[start * stride..(start + count) * stride].to_vec();
        let mut shape = v.shape().to_vec();
        shape[0] = count;
        let value = Array::from_vec(shape, data)?;
        self.push(Op::SliceRows { input: a, start }, value, "slice_rows")
    }

    /// Row `i` of a matrix, flattened to a vector.
    pub fn row(&mut self, a: NodeId, i: usize) -> Result<NodeId> {
        let cols = {
            let v = &self.nodes[a.0].value;
            if v.ndim() != 2 {
                return Err(Error::BadRank {
                    op: "row",
                    expected: "a 2-D operand",
                    shape: v.shape().to_vec(),
                });
            }
            v.shape()[1]
        };
        let sliced = self.slice_rows(a, i, 1)?;
        self.reshape(sliced, &[cols])
    }

    /// Matrix rows selected by index, in order. Indices may repeat.
    pub fn gather_rows(&mut self, a: NodeId, indices: &[usize]) -> Result<NodeId> {
        let v = &self.nodes[a.0].value;
        if v.ndim() != 2 {
            return Err(Error::BadRank {
                op: "gather_rows",
                expected: "a 2-D operand",
                shape: v.shape().to_vec(),
            });
        }
        let (rows, cols) = (v.shape()[0], v.shape()[1]);
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            if i >= rows {
                return Err(Error::RowOutOfBounds { index: i, rows });
            }
            data.extend_from_slice(&v.data()[i * cols..(i + 1) * cols]);
        }
        let value = Array::from_vec(vec![indices.len(), cols], data)?;
        self.push(
            Op::GatherRows {
                input: a,
                indices: indices.to_vec(),
            },
            value,
            "gather_rows",
        )
    }

    /// Concatenate along the leading axis: vectors end to end, or matrices
    /// stacked by rows. The same node may appear more than once.
    pub fn concat_rows(&mut self, ids: &[NodeId]) -> Result<NodeId> {
        if ids.is_empty() {
            return Err(Error::BadRank {
                op: "concat_rows",
                expected: "at least one operand",
                shape: vec![],
            });
        }
        let first = self.nodes[ids[0].0].value.shape().to_vec();
        let ndim = first.len();
        let mut lead = 0usize;
        let mut data = Vec::new();
        for &id in ids {
            let v = &self.nodes[id.0].value;
            if v.ndim() != ndim || (ndim == 2 && v.shape()[1] != first[1]) {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: first,
                    rhs: v.shape().to_vec(),
                });
            }
            lead += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let shape = if ndim == 2 {
            vec![lead, first[1]]
        } else {
            vec![lead]
        };
        let value = Array::from_vec(shape, data)?;
        self.push(Op::ConcatRows(ids.to_vec()), value, "concat_rows")
    }

    /// Stack 1-D vectors of equal length into a matrix, one per row.
    pub fn stack_rows(&mut self, ids: &[NodeId]) -> Result<NodeId> {
        let mut rows = Vec::with_capacity(ids.len());
        for &id in ids {
            let n = self.nodes[id.0].value.len();
            rows.push(self.reshape(id, &[1, n])?);
        }
        self.concat_rows(&rows)
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse pass from a scalar loss. Populates gradients for every node
    /// on a parameter path. A second call on the same tape is an error.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardAlreadyRun);
        }
        let shape = self.nodes[loss.0].value.shape();
        if shape != [1] {
            return Err(Error::NonScalarLoss {
                shape: shape.to_vec(),
            });
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(()); // no parameters reachable
        }
        self.grads[loss.0] = Some(Array::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, target: NodeId, contribution: Array) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        match &mut self.grads[target.0] {
            Some(g) => g.add_assign(&contribution),
            slot @ None => *slot = Some(contribution),
        }
    }

    /// Reduce an upstream gradient onto a possibly-scalar operand.
    fn reduce_to(&self, operand: NodeId, elementwise: Array) -> Array {
        let shape = self.nodes[operand.0].value.shape();
        if elementwise.shape() == shape {
            elementwise
        } else {
            debug_assert_eq!(shape, [1]);
            Array::scalar(elementwise.data().iter().sum())
        }
    }

    fn propagate(&mut self, i: usize, g: &Array) {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::Unary(kind, a) => {
                let x = &self.nodes[a.0].value;
                let y = &self.nodes[i].value;
                let dx = match kind {
                    UnaryKind::Neg => g.map(|v| -v),
                    UnaryKind::Sigmoid => zip3(g, y, |gi, yi| gi * yi * (1.0 - yi)),
                    UnaryKind::Tanh => zip3(g, y, |gi, yi| gi * (1.0 - yi * yi)),
                    UnaryKind::Exp => zip3(g, y, |gi, yi| gi * yi),
                    UnaryKind::Log => zip3(g, x, |gi, xi| gi / xi),
                    UnaryKind::Sqrt => zip3(g, y, |gi, yi| gi / (2.0 * yi)),
                    UnaryKind::Relu => zip3(g, x, |gi, xi| if xi > 0.0 { gi } else { 0.0 }),
                    UnaryKind::Abs => zip3(g, x, |gi, xi| gi * sign(xi)),
                    UnaryKind::Scale(c) => g.map(|v| v * c),
                    UnaryKind::AddScalar(_) => g.clone(),
                    UnaryKind::ClampMin(c) => zip3(g, x, |gi, xi| if xi > c { gi } else { 0.0 }),
                };
                self.accumulate(a, dx);
            }
            Op::Binary(kind, a, b) => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (da, db) = match kind {
                    BinaryKind::Add => (g.clone(), g.clone()),
                    BinaryKind::Sub => (g.clone(), g.map(|v| -v)),
                    BinaryKind::Mul => (bcast_mul(g, vb), bcast_mul(g, va)),
                    BinaryKind::Div => {
                        let da = bcast_zip(g, vb, |gi, bi| gi / bi);
                        let db = bcast_zip2(g, va, vb, |gi, ai, bi| -gi * ai / (bi * bi));
                        (da, db)
                    }
                };
                let da = self.reduce_to(a, da);
                let db = self.reduce_to(b, db);
                self.accumulate(a, da);
                self.accumulate(b, db);
            }
            Op::MatMul(a, b) => {
                let va = self.nodes[a.0].value.clone();
                let vb = self.nodes[b.0].value.clone();
                let (r, c) = (va.shape()[0], va.shape()[1]);
                if vb.ndim() == 2 {
                    let n = vb.shape()[1];
                    // dA = g . B^T
                    let mut da = vec![0.0; r * c];
                    for i2 in 0..r {
                        for kk in 0..c {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += g.data()[i2 * n + j] * vb.data()[kk * n + j];
                            }
                            da[i2 * c + kk] = acc;
                        }
                    }
                    // dB = A^T . g
                    let mut db = vec![0.0; c * n];
                    for kk in 0..c {
                        for j in 0..n {
                            let mut acc = 0.0;
                            for i2 in 0..r {
                                acc += va.data()[i2 * c + kk] * g.data()[i2 * n + j];
                            }
                            db[kk * n + j] = acc;
                        }
                    }
                    self.accumulate(a, Array::from_vec(vec![r, c], da).unwrap());
                    self.accumulate(b, Array::from_vec(vec![c, n], db).unwrap());
                } else {
                    // y = A x: dA = g (outer) x, dx = A^T g
                    let mut da = vec![0.0; r * c];
                    for i2 in 0..r {
                        for kk in 0..c {
                            da[i2 * c + kk] = g.data()[i2] * vb.data()[kk];
                        }
                    }
                    let mut db = vec![0.0; c];
                    for kk in 0..c {
                        let mut acc = 0.0;
                        for i2 in 0..r {
                            acc += va.data()[i2 * c + kk] * g.data()[i2];
                        }
                        db[kk] = acc;
                    }
                    self.accumulate(a, Array::from_vec(vec![r, c], da).unwrap());
                    self.accumulate(b, Array::vector(db));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = {
                    let s = self.nodes[i].value.shape();
                    (s[0], s[1])
                };
                let mut dx = vec![0.0; r * c];
                for i2 in 0..r {
                    for j in 0..c {
                        dx[j * r + i2] = g.data()[i2 * c + j];
                    }
                }
                self.accumulate(a, Array::from_vec(vec![c, r], dx).unwrap());
            }
            Op::Reshape(a) => {
                let shape = self.nodes[a.0].value.shape().to_vec();
                self.accumulate(a, g.clone().reshaped(shape));
            }
            Op::Sum(a) => {
                let gs = g.scalar_value();
                let dx = Array::filled(self.nodes[a.0].value.shape(), gs);
                self.accumulate(a, dx);
            }
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.len() as f64;
                let dx = Array::filled(self.nodes[a.0].value.shape(), g.scalar_value() / n);
                self.accumulate(a, dx);
            }
            Op::MeanRows(a) => {
                let (r, c) = {
                    let s = self.nodes[a.0].value.shape();
                    (s[0], s[1])
                };
                let mut dx = vec![0.0; r * c];
                for i2 in 0..r {
                    for j in 0..c {
                        dx[i2 * c + j] = g.data()[j] / r as f64;
                    }
                }
                self.accumulate(a, Array::from_vec(vec![r, c], dx).unwrap());
            }
            Op::L2Norm(a) => {
                let y = self.nodes[i].value.scalar_value();
                let gs = g.scalar_value();
                let dx = if y == 0.0 {
                    Array::zeros(self.nodes[a.0].value.shape())
                } else {
                    self.nodes[a.0].value.map(|xi| gs * xi / y)
                };
                self.accumulate(a, dx);
            }
            Op::Softmax(a) => {
                let y = &self.nodes[i].value;
                let inner: f64 = g.data().iter().zip(y.data()).map(|(&gi, &yi)| gi * yi).sum();
                let dx = zip3(g, y, |gi, yi| yi * (gi - inner));
                self.accumulate(a, dx);
            }
            Op::LogSoftmax(a) => {
                let y = &self.nodes[i].value;
                let gsum: f64 = g.data().iter().sum();
                let dx = zip3(g, y, |gi, yi| gi - yi.exp() * gsum);
                self.accumulate(a, dx);
            }
            Op::SliceRows { input, start, .. } => {
                let v = &self.nodes[input.0].value;
                let stride = v.len() / v.shape()[0];
                let mut dx = Array::zeros(v.shape());
                let off = start * stride;
                dx.data_mut()[off..off + g.len()].copy_from_slice(g.data());
                self.accumulate(input, dx);
            }
            Op::GatherRows { input, indices } => {
                let v = &self.nodes[input.0].value;
                let cols = v.shape()[1];
                let mut dx = Array::zeros(v.shape());
                for (pos, &idx) in indices.iter().enumerate() {
                    let src = &g.data()[pos * cols..(pos + 1) * cols];
                    let dst = &mut dx.data_mut()[idx * cols..(idx + 1) * cols];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
                self.accumulate(input, dx);
            }
            Op::ConcatRows(ids) => {
                let mut off = 0usize;
                for id in ids {
                    let v = &self.nodes[id.0].value;
                    let n = v.len();
                    let shape = v.shape().to_vec();
                    let chunk = g.data()[off..off + n].to_vec();
                    off += n;
                    self.accumulate(id, Array::from_vec(shape, chunk).unwrap());
                }
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Numerically stable softmax of a plain slice.
pub(crate) fn softmax_vec(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|&v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

fn zip3(g: &Array, other: &Array, f: impl Fn(f64, f64) -> f64) -> Array {
    let data = g
        .data()
        .iter()
        .zip(other.data())
        .map(|(&gi, &oi)| f(gi, oi))
        .collect();
    Array::from_vec(g.shape().to_vec(), data).unwrap()
}

/// `g * other` where `other` may be scalar-broadcast against `g`.
fn bcast_mul(g: &Array, other: &Array) -> Array {
    bcast_zip(g, other, |gi, oi| gi * oi)
}

fn bcast_zip(g: &Array, other: &Array, f: impl Fn(f64, f64) -> f64) -> Array {
    if other.is_scalar() && g.len() != 1 {
        let s = other.scalar_value();
        g.map(|gi| f(gi, s))
    } else {
        zip3(g, other, f)
    }
}

/// Three-way zip with scalar broadcast on `a` and `b` against `g`.
fn bcast_zip2(g: &Array, a: &Array, b: &Array, f: impl Fn(f64, f64, f64) -> f64) -> Array {
    let n = g.len();
    let data = (0..n)
        .map(|i| {
            let gi = g.data()[i];
            let ai = a.data()[if a.len() == n { i } else { 0 }];
            let bi = b.data()[if b.len() == n { i } else { 0 }];
            f(gi, ai, bi)
        })
        .collect();
    Array::from_vec(g.shape().to_vec(), data).unwrap()
}
