use std::borrow::Cow;

use serde::{Deserialize, Serialize};

use super::tensor::{matmul_into, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Reduction axis for `sum` and `mean`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Axis {
    /// Reduce over rows: `[r, c] -> [1, c]`.
    Rows,
    /// Reduce over columns: `[r, c] -> [r, 1]`.
    Cols,
}

/// Which operand of an elementwise product acts as a gate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GateOperand {
    Lhs,
    Rhs,
}

/// Softmax nodes are tagged so the modified GIM rule only touches attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SoftmaxRole {
    Attention,
    Output,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LeafKind {
    /// Attributable input; gradients are reported for these.
    Input,
    /// Trainable parameter, identical across reference and target passes.
    Param,
    /// Fixed value such as a mask or a normalisation constant.
    Constant,
}

/// Discriminant of an operation, used for tape alignment checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Mul,
    Affine,
    Relu,
    Sigmoid,
    Tanh,
    Exp,
    Softmax,
    LayerNorm,
    EmbeddingLookup,
    Concat,
    Slice,
    Transpose,
    Sum,
    Mean,
}

/// An operation together with its static parameters.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Leaf(LeafKind),
    MatMul,
    /// Elementwise sum; the right operand may be a `1 x n` row broadcast over rows.
    Add,
    /// Elementwise product with optional gate flag; same broadcasting as `Add`.
    Mul { gate: Option<GateOperand> },
    /// `scale * x + shift` with constant coefficients.
    Affine { scale: f64, shift: f64 },
    Relu,
    Sigmoid,
    Tanh,
    Exp,
    /// Row-wise softmax.
    Softmax { role: SoftmaxRole },
    /// Row-wise normalisation without affine terms.
    LayerNorm { eps: f64 },
    /// Gathers rows of the (single) parent table.
    EmbeddingLookup { indices: Vec<usize> },
    Concat { axis: Axis },
    Slice { axis: Axis, start: usize, len: usize },
    Transpose,
    /// Sum over an axis, or over everything into a scalar.
    Sum { axis: Option<Axis> },
    Mean { axis: Option<Axis> },
}

impl Op {
    pub fn kind(&self) -> OpKind {
        match self {
            Op::Leaf(_) => OpKind::Leaf,
            Op::MatMul => OpKind::MatMul,
            Op::Add => OpKind::Add,
            Op::Mul { .. } => OpKind::Mul,
            Op::Affine { .. } => OpKind::Affine,
            Op::Relu => OpKind::Relu,
            Op::Sigmoid => OpKind::Sigmoid,
            Op::Tanh => OpKind::Tanh,
            Op::Exp => OpKind::Exp,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::EmbeddingLookup { .. } => OpKind::EmbeddingLookup,
            Op::Concat { .. } => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
            Op::Transpose => OpKind::Transpose,
            Op::Sum { .. } => OpKind::Sum,
            Op::Mean { .. } => OpKind::Mean,
        }
    }

    fn name(&self) -> &'static str {
        match self.kind() {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Affine => "affine",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Exp => "exp",
            OpKind::Softmax => "softmax",
            OpKind::LayerNorm => "layer-norm",
            OpKind::EmbeddingLookup => "embedding-lookup",
            OpKind::Concat => "concat",
            OpKind::Slice => "slice",
            OpKind::Transpose => "transpose",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
        }
    }
}

/// Extra forward state kept for backward rules.
#[derive(Clone, Debug, Default)]
pub(crate) enum Saved {
    #[default]
    None,
    /// Per-row `1 / sqrt(var + eps)`.
    LayerNorm { inv_std: Vec<f64> },
}

pub(crate) struct Node<'a> {
    pub(crate) op: Op,
    pub(crate) parents: Vec<NodeId>,
    pub(crate) value: Cow<'a, Tensor>,
    pub(crate) saved: Saved,
}

/// Linear record of one forward pass.
///
/// Parameters may be borrowed from the model for the lifetime of the tape;
/// everything else is owned. Nodes only reference earlier nodes, so the
/// vector order is a topological order.
#[derive(Default)]
pub struct Tape<'a> {
    pub(crate) nodes: Vec<Node<'a>>,
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.0].op
    }

    pub fn parents(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id.0].parents
    }

    pub fn leaf_kind(&self, id: NodeId) -> Option<LeafKind> {
        match self.nodes[id.0].op {
            Op::Leaf(kind) => Some(kind),
            _ => None,
        }
    }

    /// All leaves of the given kind, in recording order.
    pub fn leaves(&self, kind: LeafKind) -> Vec<NodeId> {
        (0..self.nodes.len()).map(NodeId).filter(|id| self.leaf_kind(*id) == Some(kind)).collect()
    }

    fn push(&mut self, op: Op, parents: Vec<NodeId>, value: Cow<'a, Tensor>, saved: Saved) -> NodeId {
        self.nodes.push(Node { op, parents, value, saved });
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf(LeafKind::Input), Vec::new(), Cow::Owned(value), Saved::None)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf(LeafKind::Constant), Vec::new(), Cow::Owned(value), Saved::None)
    }

    /// Registers a parameter without copying it.
    pub fn param(&mut self, value: &'a Tensor) -> NodeId {
        self.push(Op::Leaf(LeafKind::Param), Vec::new(), Cow::Borrowed(value), Saved::None)
    }

    /// Records `op` applied to `inputs` and returns the new node.
    pub fn apply(&mut self, op: Op, inputs: &[NodeId]) -> Result<NodeId> {
        for id in inputs {
            if id.0 >= self.nodes.len() {
                return Err(Error::Shape { op: op.name(), detail: format!("unknown node {}", id.0) });
            }
        }
        let (value, saved) = self.compute(&op, inputs)?;
        let inputs_finite = inputs.iter().all(|id| self.value(*id).is_finite());
        if inputs_finite && !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        Ok(self.push(op, inputs.to_vec(), Cow::Owned(value), saved))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::MatMul, &[a, b])
    }
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Add, &[a, b])
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Mul { gate: None }, &[a, b])
    }
    pub fn mul_gated(&mut self, a: NodeId, b: NodeId, gate: Option<GateOperand>) -> Result<NodeId> {
        self.apply(Op::Mul { gate }, &[a, b])
    }
    pub fn affine(&mut self, a: NodeId, scale: f64, shift: f64) -> Result<NodeId> {
        self.apply(Op::Affine { scale, shift }, &[a])
    }
    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Relu, &[a])
    }
    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Sigmoid, &[a])
    }
    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Tanh, &[a])
    }
    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Exp, &[a])
    }
    pub fn softmax(&mut self, a: NodeId, role: SoftmaxRole) -> Result<NodeId> {
        self.apply(Op::Softmax { role }, &[a])
    }
    pub fn layer_norm(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::LayerNorm { eps: LAYER_NORM_EPS }, &[a])
    }
    pub fn embedding_lookup(&mut self, table: NodeId, indices: Vec<usize>) -> Result<NodeId> {
        self.apply(Op::EmbeddingLookup { indices }, &[table])
    }
    pub fn concat(&mut self, parts: &[NodeId], axis: Axis) -> Result<NodeId> {
        self.apply(Op::Concat { axis }, parts)
    }
    pub fn slice(&mut self, a: NodeId, axis: Axis, start: usize, len: usize) -> Result<NodeId> {
        self.apply(Op::Slice { axis, start, len }, &[a])
    }
    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Transpose, &[a])
    }
    pub fn sum(&mut self, a: NodeId, axis: Option<Axis>) -> Result<NodeId> {
        self.apply(Op::Sum { axis }, &[a])
    }
    pub fn mean(&mut self, a: NodeId, axis: Option<Axis>) -> Result<NodeId> {
        self.apply(Op::Mean { axis }, &[a])
    }

    fn compute(&self, op: &Op, inputs: &[NodeId]) -> Result<(Tensor, Saved)> {
        let name = op.name();
        let arity = |n: usize| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(Error::Shape { op: name, detail: format!("expected {n} inputs, got {}", inputs.len()) })
            }
        };
        let v = |i: usize| self.value(inputs[i]);
        let out = match op {
            Op::Leaf(_) => {
                return Err(Error::Shape { op: name, detail: "leaves are created directly".into() })
            }
            Op::MatMul => {
                arity(2)?;
                let (a, b) = (v(0), v(1));
                if a.cols() != b.rows() {
                    return Err(Error::Shape {
                        op: name,
                        detail: format!("[{} x {}] * [{} x {}]", a.rows(), a.cols(), b.rows(), b.cols()),
                    });
                }
                let (m, k, n) = (a.rows(), a.cols(), b.cols());
                let mut out = vec![0.0; m * n];
                matmul_into(a.data(), b.data(), m, k, n, &mut out);
                Tensor::from_parts(m, n, out)
            }
            Op::Add | Op::Mul { .. } => {
                arity(2)?;
                let (a, b) = (v(0), v(1));
                let bc = broadcast_kind(a, b).ok_or_else(|| Error::Shape {
                    op: name,
                    detail: format!("cannot combine {:?} with {:?}", a.shape(), b.shape()),
                })?;
                let is_add = matches!(op, Op::Add);
                let cols = a.cols();
                let data = a
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| {
                        let y = if bc { b.data()[i % cols] } else { b.data()[i] };
                        if is_add {
                            x + y
                        } else {
                            x * y
                        }
                    })
                    .collect();
                Tensor::new(a.shape().to_vec(), data)?
            }
            Op::Affine { scale, shift } => {
                arity(1)?;
                map_elementwise(v(0), |x| scale * x + shift)
            }
            Op::Relu => {
                arity(1)?;
                map_elementwise(v(0), |x| if x > 0.0 { x } else { 0.0 })
            }
            Op::Sigmoid => {
                arity(1)?;
                map_elementwise(v(0), sigmoid)
            }
            Op::Tanh => {
                arity(1)?;
                map_elementwise(v(0), f64::tanh)
            }
            Op::Exp => {
                arity(1)?;
                map_elementwise(v(0), f64::exp)
            }
            Op::Softmax { .. } => {
                arity(1)?;
                softmax_rows(v(0), 1.0)
            }
            Op::LayerNorm { eps } => {
                arity(1)?;
                let a = v(0);
                let (r, c) = (a.rows(), a.cols());
                if c == 0 {
                    return Err(Error::Shape { op: name, detail: "zero-width rows".into() });
                }
                let mut out = vec![0.0; r * c];
                let mut inv_stds = Vec::with_capacity(r);
                for i in 0..r {
                    let row = a.row_slice(i);
                    let mean = row.iter().sum::<f64>() / c as f64;
                    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    for (o, x) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
                        *o = (x - mean) * inv;
                    }
                    inv_stds.push(inv);
                }
                return Ok((
                    Tensor::new(a.shape().to_vec(), out)?,
                    Saved::LayerNorm { inv_std: inv_stds },
                ));
            }
            Op::EmbeddingLookup { indices } => {
                arity(1)?;
                let table = v(0);
                let c = table.cols();
                let mut out = Vec::with_capacity(indices.len() * c);
                for &ix in indices {
                    if ix >= table.rows() {
                        return Err(Error::Shape {
                            op: name,
                            detail: format!("index {ix} outside table of {} rows", table.rows()),
                        });
                    }
                    out.extend_from_slice(table.row_slice(ix));
                }
                Tensor::from_parts(indices.len(), c, out)
            }
            Op::Concat { axis } => {
                if inputs.is_empty() {
                    return Err(Error::Shape { op: name, detail: "nothing to concatenate".into() });
                }
                let parts: Vec<&Tensor> = (0..inputs.len()).map(v).collect();
                concat(&parts, *axis).ok_or_else(|| Error::Shape {
                    op: name,
                    detail: format!(
                        "incompatible parts {:?}",
                        parts.iter().map(|p| (p.rows(), p.cols())).collect::<Vec<_>>()
                    ),
                })?
            }
            Op::Slice { axis, start, len } => {
                arity(1)?;
                let a = v(0);
                let (r, c) = (a.rows(), a.cols());
                let extent = if *axis == Axis::Rows { r } else { c };
                if start + len > extent {
                    return Err(Error::Shape {
                        op: name,
                        detail: format!("range {start}..{} exceeds extent {extent}", start + len),
                    });
                }
                match axis {
                    Axis::Rows => Tensor::from_parts(*len, c, a.data()[start * c..(start + len) * c].to_vec()),
                    Axis::Cols => {
                        let mut out = Vec::with_capacity(r * len);
                        for i in 0..r {
                            out.extend_from_slice(&a.row_slice(i)[*start..start + len]);
                        }
                        Tensor::from_parts(r, *len, out)
                    }
                }
            }
            Op::Transpose => {
                arity(1)?;
                transpose(v(0))
            }
            Op::Sum { axis } | Op::Mean { axis } => {
                arity(1)?;
                let a = v(0);
                let (r, c) = (a.rows(), a.cols());
                let is_mean = matches!(op, Op::Mean { .. });
                match axis {
                    None => {
                        let n = a.numel();
                        if is_mean && n == 0 {
                            return Err(Error::Shape { op: name, detail: "mean of empty tensor".into() });
                        }
                        let s: f64 = a.data().iter().sum();
                        Tensor::scalar(if is_mean { s / n as f64 } else { s })
                    }
                    Some(Axis::Rows) => {
                        if is_mean && r == 0 {
                            return Err(Error::Shape { op: name, detail: "mean over zero rows".into() });
                        }
                        let mut out = vec![0.0; c];
                        for i in 0..r {
                            for (o, x) in out.iter_mut().zip(a.row_slice(i)) {
                                *o += x;
                            }
                        }
                        if is_mean {
                            out.iter_mut().for_each(|o| *o /= r as f64);
                        }
                        Tensor::from_parts(1, c, out)
                    }
                    Some(Axis::Cols) => {
                        if is_mean && c == 0 {
                            return Err(Error::Shape { op: name, detail: "mean over zero columns".into() });
                        }
                        let out = (0..r)
                            .map(|i| {
                                let s: f64 = a.row_slice(i).iter().sum();
                                if is_mean {
                                    s / c as f64
                                } else {
                                    s
                                }
                            })
                            .collect();
                        Tensor::from_parts(r, 1, out)
                    }
                }
            }
        };
        Ok((out, Saved::None))
    }
}

/// Epsilon added to the variance in layer normalisation.
pub const LAYER_NORM_EPS: f64 = 1e-5;

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `Some(false)` for equal layouts, `Some(true)` when `b` is a row broadcast
/// over the rows of `a`.
pub(crate) fn broadcast_kind(a: &Tensor, b: &Tensor) -> Option<bool> {
    if a.same_layout(b) && a.numel() == b.numel() {
        Some(false)
    } else if b.rows() == 1 && b.cols() == a.cols() {
        Some(true)
    } else {
        None
    }
}

fn map_elementwise(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let data = a.data().iter().map(|&x| f(x)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("shape preserved")
}

/// Row-wise `softmax(x / temperature)`.
pub(crate) fn softmax_rows(a: &Tensor, temperature: f64) -> Tensor {
    let (r, c) = (a.rows(), a.cols());
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = a.row_slice(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let dst = &mut out[i * c..(i + 1) * c];
        let mut total = 0.0;
        for (o, x) in dst.iter_mut().zip(row) {
            *o = ((x - max) / temperature).exp();
            total += *o;
        }
        dst.iter_mut().for_each(|o| *o /= total);
    }
    Tensor::new(a.shape().to_vec(), out).expect("shape preserved")
}

pub(crate) fn transpose(a: &Tensor) -> Tensor {
    let (r, c) = (a.rows(), a.cols());
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a.data()[i * c + j];
        }
    }
    Tensor::from_parts(c, r, out)
}

fn concat(parts: &[&Tensor], axis: Axis) -> Option<Tensor> {
    match axis {
        Axis::Rows => {
            let c = parts[0].cols();
            if parts.iter().any(|p| p.cols() != c) {
                return None;
            }
            let r = parts.iter().map(|p| p.rows()).sum();
            let mut out = Vec::with_capacity(r * c);
            for p in parts {
                out.extend_from_slice(p.data());
            }
            Some(Tensor::from_parts(r, c, out))
        }
        Axis::Cols => {
            let r = parts[0].rows();
            if parts.iter().any(|p| p.rows() != r) {
                return None;
            }
            let c = parts.iter().map(|p| p.cols()).sum();
            let mut out = Vec::with_capacity(r * c);
            for i in 0..r {
                for p in parts {
                    out.extend_from_slice(p.row_slice(i));
                }
            }
            Some(Tensor::from_parts(r, c, out))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_of_small_vector() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::row(vec![-1.0, 0.0, 2.0]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::row(vec![0.0, 0.0]));
        let y = tape.softmax(x, SoftmaxRole::Output).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn layer_norm_of_constant_row_is_zero() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::row(vec![3.0; 5]));
        let y = tape.layer_norm(x).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        match &tape.nodes[y.0].saved {
            Saved::LayerNorm { inv_std } => {
                assert!((inv_std[0] - 1.0 / LAYER_NORM_EPS.sqrt()).abs() < 1e-6);
            }
            Saved::None => panic!("layer norm must save its statistics"),
        }
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut tape = Tape::new();
        let a = tape.input(Tensor::zeros(&[2, 3]));
        let b = tape.input(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("matmul"), "{err}");
        assert!(err.to_string().contains("[2 x 3] * [2 x 3]"), "{err}");
        let c = tape.input(Tensor::zeros(&[3, 2]));
        assert!(tape.add(a, c).is_err());
    }

    #[test]
    fn overflow_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::row(vec![1000.0]));
        assert!(matches!(tape.exp(x), Err(Error::NonFinite { op: "exp" })));
    }

    #[test]
    fn broadcast_add_and_slices() {
        let mut tape = Tape::new();
        let a = tape.input(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.input(Tensor::row(vec![10.0, 20.0]));
        let s = tape.add(a, b).unwrap();
        assert_eq!(tape.value(s).data(), &[11.0, 22.0, 13.0, 24.0]);
        let col = tape.slice(s, Axis::Cols, 1, 1).unwrap();
        assert_eq!(tape.value(col).data(), &[22.0, 24.0]);
        let both = tape.concat(&[a, s], Axis::Cols).unwrap();
        assert_eq!(tape.value(both).shape(), &[2, 4]);
        let m = tape.mean(both, Some(Axis::Rows)).unwrap();
        assert_eq!(tape.value(m).data(), &[2.0, 3.0, 12.0, 23.0]);
        let t = tape.transpose(a).unwrap();
        assert_eq!(tape.value(t).data(), &[1.0, 3.0, 2.0, 4.0]);
    }

    #[test]
    fn embedding_lookup_gathers_rows() {
        let table = Tensor::matrix(3, 2, vec![0.0, 0.0, 1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut tape = Tape::new();
        let t = tape.param(&table);
        let e = tape.embedding_lookup(t, vec![2, 1, 2]).unwrap();
        assert_eq!(tape.value(e).data(), &[3.0, 4.0, 1.0, 2.0, 3.0, 4.0]);
        assert!(tape.embedding_lookup(t, vec![3]).is_err());
    }
}
