//! Reverse-mode differentiation over dense tensors.
//!
//! A [`Tape`] records a closed set of primitive operations in topological
//! order. Shapes are inferred while the tape is built, so a tape that was
//! constructed successfully can only fail at evaluation time because of a
//! binding with the wrong shape or a non-finite intermediate value.
//!
//! Evaluation is generic over [`Real`](crate::tensor::Real): training runs a
//! tape in `f32` and [`check_gradient`] re-runs the very same tape in `f64`.

mod check;
mod eval;

pub use check::check_gradient;
pub use eval::{Bindings, Evaluation, Gradients};

use thiserror::Error;

use crate::tensor::{element_count, Real, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("node {node} ({op}): shape mismatch {detail}")]
    NodeShape {
        node: usize,
        op: &'static str,
        detail: String,
    },
    #[error("node {node} ({op}) produced a non-finite value")]
    NonFinite { node: usize, op: &'static str },
    #[error("input node {0} is not bound")]
    Unbound(usize),
    #[error("gradient target node {node} has shape {shape:?}, expected a scalar")]
    NotScalar { node: usize, shape: Vec<usize> },
    #[error("unknown node {0}")]
    UnknownNode(usize),
    #[error("invalid argument: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The primitive set. Every encoder and loss in this crate compiles to these.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    /// A value supplied through [`Bindings`] at evaluation time.
    Input,
    /// A value frozen into the tape; never differentiated.
    Constant(Tensor<f64>),
    /// `a · b`, or `a · bᵀ` when `transpose_rhs` is set.
    MatMul {
        transpose_rhs: bool,
    },
    Add,
    Sub,
    Mul,
    /// `a[r, c] + v[c]` for every row `r`.
    AddRow,
    Sigmoid,
    Tanh,
    /// `max(0, x)` elementwise; applies equally to scalar-shaped tensors.
    Relu,
    /// `max(x, c)` elementwise.
    MaxConst(f64),
    /// Sum of all entries, producing a scalar.
    Sum,
    /// `Σ x²`, producing a scalar.
    SquaredNorm,
    /// Each row divided by its L2 norm; zero rows stay zero.
    NormalizeRows,
    Abs,
    /// Row gather, used for embedding lookup and for picking score entries.
    GatherRows(Vec<usize>),
    SliceRows {
        start: usize,
        end: usize,
    },
    SliceCols {
        start: usize,
        end: usize,
    },
    /// Concatenation of rank-2 tensors along `axis` (0 = rows, 1 = columns).
    Concat {
        axis: usize,
    },
    /// Multiplication by a constant.
    Scale(f64),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Constant(_) => "constant",
            Op::MatMul { .. } => "matmul",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::AddRow => "add_row",
            Op::Sigmoid => "sigmoid",
            Op::Tanh => "tanh",
            Op::Relu => "relu",
            Op::MaxConst(_) => "max_const",
            Op::Sum => "sum",
            Op::SquaredNorm => "squared_norm",
            Op::NormalizeRows => "normalize_rows",
            Op::Abs => "abs",
            Op::GatherRows(_) => "gather_rows",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::Concat { .. } => "concat",
            Op::Scale(_) => "scale",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Node {
    pub op: Op,
    pub inputs: Vec<NodeId>,
    pub shape: Vec<usize>,
}

/// A recorded computation. Nodes only ever reference earlier nodes, so the
/// node list is a topological order and the graph is acyclic by construction.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Ids of all input nodes in recording order.
    pub fn inputs(&self) -> Vec<NodeId> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Input))
            .map(|(i, _)| NodeId(i))
            .collect()
    }

    fn check_id(&self, id: NodeId) -> Result<()> {
        if id.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(AutodiffError::UnknownNode(id.0))
        }
    }

    fn mismatch(&self, op: &Op, detail: String) -> AutodiffError {
        AutodiffError::NodeShape {
            node: self.nodes.len(),
            op: op.name(),
            detail,
        }
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>) -> Result<NodeId> {
        for &i in &inputs {
            self.check_id(i)?;
        }
        let shape = self.infer_shape(&op, &inputs)?;
        self.nodes.push(Node { op, inputs, shape });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn infer_shape(&self, op: &Op, inputs: &[NodeId]) -> Result<Vec<usize>> {
        let s = |k: usize| self.shape(inputs[k]).to_vec();
        let rank2 = |shape: &[usize]| -> Result<(usize, usize)> {
            if shape.len() == 2 {
                Ok((shape[0], shape[1]))
            } else {
                Err(self.mismatch(op, format!("expected a matrix, got {shape:?}")))
            }
        };
        match op {
            Op::Input | Op::Constant(_) => {
                unreachable!("leaf shapes are set by their constructors")
            }
            Op::MatMul { transpose_rhs } => {
                let (m, k) = rank2(&s(0))?;
                let (p, q) = rank2(&s(1))?;
                let (inner, n) = if *transpose_rhs { (q, p) } else { (p, q) };
                if k != inner {
                    return Err(self.mismatch(op, format!("{:?} x {:?}", s(0), s(1))));
                }
                Ok(vec![m, n])
            }
            Op::Add | Op::Sub | Op::Mul => {
                if s(0) != s(1) {
                    return Err(self.mismatch(op, format!("{:?} vs {:?}", s(0), s(1))));
                }
                Ok(s(0))
            }
            Op::AddRow => {
                let (_, c) = rank2(&s(0))?;
                let row = s(1);
                let ok = row == [c] || row == [1, c];
                if !ok {
                    return Err(self.mismatch(op, format!("{:?} + row {:?}", s(0), row)));
                }
                Ok(s(0))
            }
            Op::Sigmoid | Op::Tanh | Op::Relu | Op::MaxConst(_) | Op::Abs | Op::Scale(_) => {
                Ok(s(0))
            }
            Op::Sum | Op::SquaredNorm => Ok(Vec::new()),
            Op::NormalizeRows => {
                rank2(&s(0))?;
                Ok(s(0))
            }
            Op::GatherRows(idx) => {
                let (r, c) = rank2(&s(0))?;
                if idx.is_empty() {
                    return Err(self.mismatch(op, "empty index list".into()));
                }
                if let Some(bad) = idx.iter().find(|&&i| i >= r) {
                    return Err(self.mismatch(op, format!("row {bad} out of {r}")));
                }
                Ok(vec![idx.len(), c])
            }
            Op::SliceRows { start, end } => {
                let (r, c) = rank2(&s(0))?;
                if start >= end || *end > r {
                    return Err(self.mismatch(op, format!("rows {start}..{end} of {r}")));
                }
                Ok(vec![end - start, c])
            }
            Op::SliceCols { start, end } => {
                let (r, c) = rank2(&s(0))?;
                if start >= end || *end > c {
                    return Err(self.mismatch(op, format!("cols {start}..{end} of {c}")));
                }
                Ok(vec![r, end - start])
            }
            Op::Concat { axis } => {
                if inputs.is_empty() || *axis > 1 {
                    return Err(
                        self.mismatch(op, format!("{} inputs on axis {axis}", inputs.len()))
                    );
                }
                let shapes: Vec<(usize, usize)> = (0..inputs.len())
                    .map(|k| rank2(&s(k)))
                    .collect::<Result<_>>()?;
                let (r0, c0) = shapes[0];
                if *axis == 0 {
                    if shapes.iter().any(|&(_, c)| c != c0) {
                        return Err(self.mismatch(op, format!("column counts {shapes:?}")));
                    }
                    Ok(vec![shapes.iter().map(|s| s.0).sum(), c0])
                } else {
                    if shapes.iter().any(|&(r, _)| r != r0) {
                        return Err(self.mismatch(op, format!("row counts {shapes:?}")));
                    }
                    Ok(vec![r0, shapes.iter().map(|s| s.1).sum()])
                }
            }
        }
    }

    pub fn input(&mut self, shape: &[usize]) -> Result<NodeId> {
        if shape.contains(&0) {
            return Err(AutodiffError::Shape(format!(
                "zero extent in input shape {shape:?}"
            )));
        }
        self.nodes.push(Node {
            op: Op::Input,
            inputs: Vec::new(),
            shape: shape.to_vec(),
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn constant<T: Real>(&mut self, value: &Tensor<T>) -> NodeId {
        let shape = value.shape().to_vec();
        self.nodes.push(Node {
            op: Op::Constant(value.cast()),
            inputs: Vec::new(),
            shape,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(
            Op::MatMul {
                transpose_rhs: false,
            },
            vec![a, b],
        )
    }

    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(
            Op::MatMul {
                transpose_rhs: true,
            },
            vec![a, b],
        )
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add, vec![a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Sub, vec![a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Mul, vec![a, b])
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        self.push(Op::AddRow, vec![a, row])
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Sigmoid, vec![a])
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Tanh, vec![a])
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Relu, vec![a])
    }

    pub fn max_const(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.push(Op::MaxConst(c), vec![a])
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Sum, vec![a])
    }

    pub fn squared_norm(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::SquaredNorm, vec![a])
    }

    pub fn normalize_rows(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::NormalizeRows, vec![a])
    }

    pub fn abs(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Abs, vec![a])
    }

    pub fn gather_rows(&mut self, a: NodeId, rows: Vec<usize>) -> Result<NodeId> {
        self.push(Op::GatherRows(rows), vec![a])
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        self.push(Op::SliceRows { start, end }, vec![a])
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        self.push(Op::SliceCols { start, end }, vec![a])
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        self.push(Op::Concat { axis }, parts.to_vec())
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.push(Op::Scale(c), vec![a])
    }

    /// Row sums of a matrix as an `r × 1` column, via a product with a ones column.
    pub fn row_sums(&mut self, a: NodeId) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 {
            return Err(AutodiffError::Shape(format!(
                "row_sums needs a matrix, got {shape:?}"
            )));
        }
        let ones = self.constant(&Tensor::<f64>::filled(&[shape[1], 1], 1.0));
        self.matmul(a, ones)
    }

    pub(crate) fn value_count(&self, id: NodeId) -> usize {
        element_count(self.shape(id))
    }
}
