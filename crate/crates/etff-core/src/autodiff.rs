//! Reverse-mode differentiation over a recorded tape of matrix operations.
//!
//! Values are dense 2-D `f64` arrays (scalars are 1×1). Every operation
//! evaluates eagerly when recorded; [`Tape::grad_nodes`] walks the recording
//! backwards and builds the adjoints *as tape nodes*, so gradients are
//! themselves differentiable. That property is what lets a force-matching
//! loss — a function of `-dΦ/dr` — be differentiated with respect to model
//! parameters with the same machinery.
//!
//! Determinism: all reductions run in a fixed order, so identical recordings
//! produce bitwise-identical values and gradients.

use ndarray::Array2;
use std::rc::Rc;
use thiserror::Error;

/// Epsilon used inside guarded Euclidean norms: `||v||_eps = sqrt(sum v^2 + EPS)`.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("gradient source must be a 1x1 scalar, got shape ({0}, {1})")]
    NotScalar(usize, usize),
    #[error("non-finite gradient entry at node {node}, flat index {index}")]
    NonFiniteGradient { node: usize, index: usize },
    #[error("stale recording: leaf node {0} was overwritten after operations were recorded")]
    StaleRecording(usize),
}

/// Handle to one node of a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Scalar model output together with the tape node it came from.
#[derive(Debug, Clone, Copy)]
pub struct DiffScalar {
    pub value: f64,
    pub node: NodeId,
}

/// Which gradients to extract from a recording.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Wrt {
    Positions,
    Params,
    Both,
}

/// Gradients of a scalar with respect to the recording's inputs.
/// `d_params` is flattened row-major per tensor, concatenated in parameter
/// order.
#[derive(Debug, Clone)]
pub struct GradientResult {
    pub d_positions: Option<Array2<f64>>,
    pub d_params: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Neg(NodeId),
    Mul(NodeId, NodeId),
    Recip(NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Exp(NodeId),
    Sqrt(NodeId),
    Sigmoid(NodeId),
    Sin(NodeId),
    Cos(NodeId),
    SumAll(NodeId),
    BroadcastScalar(NodeId),
    SumRows(NodeId),
    BroadcastRow(NodeId),
    SumCols(NodeId),
    BroadcastCol(NodeId),
    GatherRows(NodeId, Rc<Vec<usize>>),
    ScatterAddRows(NodeId, Rc<Vec<usize>>),
    SliceCols(NodeId, usize),
    PadCols(NodeId, usize),
    GroupSumRows(NodeId, usize),
    RepeatRows(NodeId, usize),
    GroupSumCols(NodeId, usize),
    RepeatColsGrouped(NodeId, usize),
    Reshape(NodeId),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Append-only recording of a computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    stale_leaf: Option<usize>,
    has_ops: bool,
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
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

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        let v = &self.nodes[id.0].value;
        debug_assert_eq!(v.dim(), (1, 1));
        v[[0, 0]]
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> NodeId {
        if !matches!(op, Op::Leaf) {
            self.has_ops = true;
        }
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Records an input node. Leaves are the only nodes gradients can be
    /// requested for.
    pub fn leaf(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// 1×1 constant.
    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.leaf(Array2::from_elem((1, 1), v))
    }

    /// Overwrites a leaf's value. Allowed freely before any operation is
    /// recorded; afterwards it invalidates the recording and any gradient
    /// call fails with [`DiffError::StaleRecording`].
    pub fn set_leaf(&mut self, id: NodeId, value: Array2<f64>) {
        assert!(
            matches!(self.nodes[id.0].op, Op::Leaf),
            "set_leaf target must be a leaf"
        );
        if self.has_ops {
            self.stale_leaf.get_or_insert(id.0);
        }
        self.nodes[id.0].value = value;
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = {
            let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
            assert_eq!(va.dim(), vb.dim(), "add shape mismatch");
            va + vb
        };
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = {
            let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
            assert_eq!(va.dim(), vb.dim(), "sub shape mismatch");
            va - vb
        };
        self.push(v, Op::Sub(a, b))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| -x);
        self.push(v, Op::Neg(a))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = {
            let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
            assert_eq!(va.dim(), vb.dim(), "mul shape mismatch");
            va * vb
        };
        self.push(v, Op::Mul(a, b))
    }

    /// Elementwise reciprocal.
    pub fn recip(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| 1.0 / x);
        self.push(v, Op::Recip(a))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| c * x);
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| x + c);
        self.push(v, Op::AddConst(a))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = {
            let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
            assert_eq!(va.ncols(), vb.nrows(), "matmul inner dim mismatch");
            va.dot(vb)
        };
        self.push(v, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(f64::sqrt);
        self.push(v, Op::Sqrt(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(stable_sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn sin(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(f64::sin);
        self.push(v, Op::Sin(a))
    }

    pub fn cos(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(f64::cos);
        self.push(v, Op::Cos(a))
    }

    /// Sum of all entries, as a 1×1 node.
    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.nodes[a.0].value.sum();
        self.push(Array2::from_elem((1, 1), s), Op::SumAll(a))
    }

    /// Fills `shape` with the single entry of a 1×1 node.
    pub fn broadcast_scalar(&mut self, a: NodeId, shape: (usize, usize)) -> NodeId {
        let v = {
            let va = &self.nodes[a.0].value;
            assert_eq!(va.dim(), (1, 1), "broadcast_scalar needs a 1x1 source");
            Array2::from_elem(shape, va[[0, 0]])
        };
        self.push(v, Op::BroadcastScalar(a))
    }

    /// Collapses rows: n×d → 1×d.
    pub fn sum_rows(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a.0].value;
        let d = va.ncols();
        let mut out = Array2::zeros((1, d));
        for row in va.outer_iter() {
            for (c, x) in row.iter().enumerate() {
                out[[0, c]] += x;
            }
        }
        self.push(out, Op::SumRows(a))
    }

    /// Repeats a 1×d row n times.
    pub fn broadcast_row(&mut self, a: NodeId, n: usize) -> NodeId {
        let v = {
            let va = &self.nodes[a.0].value;
            assert_eq!(va.nrows(), 1, "broadcast_row needs a 1xd source");
            let d = va.ncols();
            Array2::from_shape_fn((n, d), |(_, c)| va[[0, c]])
        };
        self.push(v, Op::BroadcastRow(a))
    }

    /// Collapses columns: n×d → n×1.
    pub fn sum_cols(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a.0].value;
        let n = va.nrows();
        let mut out = Array2::zeros((n, 1));
        for (r, row) in va.outer_iter().enumerate() {
            out[[r, 0]] = row.iter().sum();
        }
        self.push(out, Op::SumCols(a))
    }

    /// Repeats an n×1 column d times.
    pub fn broadcast_col(&mut self, a: NodeId, d: usize) -> NodeId {
        let v = {
            let va = &self.nodes[a.0].value;
            assert_eq!(va.ncols(), 1, "broadcast_col needs an nx1 source");
            let n = va.nrows();
            Array2::from_shape_fn((n, d), |(r, _)| va[[r, 0]])
        };
        self.push(v, Op::BroadcastCol(a))
    }

    /// out[r, :] = a[idx[r], :].
    pub fn gather_rows(&mut self, a: NodeId, idx: Rc<Vec<usize>>) -> NodeId {
        let v = {
            let va = &self.nodes[a.0].value;
            let d = va.ncols();
            let mut out = Array2::zeros((idx.len(), d));
            for (r, &src) in idx.iter().enumerate() {
                for c in 0..d {
                    out[[r, c]] = va[[src, c]];
                }
            }
            out
        };
        self.push(v, Op::GatherRows(a, idx))
    }

    /// out has `n_rows` rows; row idx[r] accumulates a[r, :], in ascending r.
    pub fn scatter_add_rows(&mut self, a: NodeId, idx: Rc<Vec<usize>>, n_rows: usize) -> NodeId {
        let v = {
            let va = &self.nodes[a.0].value;
            assert_eq!(va.nrows(), idx.len(), "scatter index length mismatch");
            let d = va.ncols();
            let mut out = Array2::zeros((n_rows, d));
            for (r, &dst) in idx.iter().enumerate() {
                for c in 0..d {
                    out[[dst, c]] += va[[r, c]];
                }
            }
            out
        };
        self.push(v, Op::ScatterAddRows(a, idx))
    }

    /// Columns lo..hi.
    pub fn slice_cols(&mut self, a: NodeId, lo: usize, hi: usize) -> NodeId {
        let v = {
            let va = &self.nodes[a.0].value;
            assert!(lo < hi && hi <= va.ncols(), "slice_cols out of range");
            va.slice(ndarray::s![.., lo..hi]).to_owned()
        };
        self.push(v, Op::SliceCols(a, lo))
    }

    /// Embeds into `total` columns starting at column `lo`, zero elsewhere.
    pub fn pad_cols(&mut self, a: NodeId, lo: usize, total: usize) -> NodeId {
        let v = {
            let va = &self.nodes[a.0].value;
            assert!(lo + va.ncols() <= total, "pad_cols out of range");
            let mut out = Array2::zeros((va.nrows(), total));
            out.slice_mut(ndarray::s![.., lo..lo + va.ncols()]).assign(va);
            out
        };
        self.push(v, Op::PadCols(a, lo))
    }

    /// Sums each consecutive block of `group` rows: (g·n)×d → n×d.
    pub fn group_sum_rows(&mut self, a: NodeId, group: usize) -> NodeId {
        let v = {
            let va = &self.nodes[a.0].value;
            assert_eq!(va.nrows() % group, 0, "group_sum_rows row count");
            let n = va.nrows() / group;
            let d = va.ncols();
            let mut out = Array2::zeros((n, d));
            for r in 0..va.nrows() {
                for c in 0..d {
                    out[[r / group, c]] += va[[r, c]];
                }
            }
            out
        };
        self.push(v, Op::GroupSumRows(a, group))
    }

    /// Repeats each row `group` times consecutively: n×d → (g·n)×d.
    pub fn repeat_rows(&mut self, a: NodeId, group: usize) -> NodeId {
        let v = {
            let va = &self.nodes[a.0].value;
            let d = va.ncols();
            Array2::from_shape_fn((va.nrows() * group, d), |(r, c)| va[[r / group, c]])
        };
        self.push(v, Op::RepeatRows(a, group))
    }

    /// Sums each consecutive block of `group` columns: n×(g·h) → n×h.
    pub fn group_sum_cols(&mut self, a: NodeId, group: usize) -> NodeId {
        let v = {
            let va = &self.nodes[a.0].value;
            assert_eq!(va.ncols() % group, 0, "group_sum_cols column count");
            let n = va.nrows();
            let h = va.ncols() / group;
            let mut out = Array2::zeros((n, h));
            for r in 0..n {
                for c in 0..va.ncols() {
                    out[[r, c / group]] += va[[r, c]];
                }
            }
            out
        };
        self.push(v, Op::GroupSumCols(a, group))
    }

    /// Repeats each column `group` times consecutively: n×h → n×(g·h).
    pub fn repeat_cols_grouped(&mut self, a: NodeId, group: usize) -> NodeId {
        let v = {
            let va = &self.nodes[a.0].value;
            let n = va.nrows();
            Array2::from_shape_fn((n, va.ncols() * group), |(r, c)| va[[r, c / group]])
        };
        self.push(v, Op::RepeatColsGrouped(a, group))
    }

    /// Row-major reinterpretation to a new shape with the same element count.
    pub fn reshape(&mut self, a: NodeId, shape: (usize, usize)) -> NodeId {
        let v = {
            let va = &self.nodes[a.0].value;
            assert_eq!(va.len(), shape.0 * shape.1, "reshape element count");
            Array2::from_shape_vec(shape, va.iter().copied().collect())
                .expect("reshape: shape already checked")
        };
        self.push(v, Op::Reshape(a))
    }

    // ---- composites ----

    /// SiLU nonlinearity x·sigmoid(x), smooth everywhere.
    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let s = self.sigmoid(a);
        self.mul(a, s)
    }

    /// x·W + b with b broadcast over rows; pass `None` for bias-free maps.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> NodeId {
        let y = self.matmul(x, w);
        match b {
            Some(b) => {
                let rows = self.nodes[y.0].value.nrows();
                let bb = self.broadcast_row(b, rows);
                self.add(y, bb)
            }
            None => y,
        }
    }

    /// Per-row guarded Euclidean norm: n×d → n×1, sqrt(sum v² + NORM_EPS).
    pub fn norm_rows_eps(&mut self, a: NodeId) -> NodeId {
        let sq = self.mul(a, a);
        let s = self.sum_cols(sq);
        let se = self.add_const(s, NORM_EPS);
        self.sqrt(se)
    }

    /// Mean of all entries, as a 1×1 node.
    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let count = self.nodes[a.0].value.len();
        let s = self.sum_all(a);
        self.scale(s, 1.0 / count as f64)
    }

    // ---- differentiation ----

    fn accumulate(&mut self, adj: &mut [Option<NodeId>], target: NodeId, contrib: NodeId) {
        adj[target.0] = Some(match adj[target.0] {
            None => contrib,
            Some(existing) => self.add(existing, contrib),
        });
    }

    /// Reverse-mode gradients of a 1×1 `scalar` node with respect to `wrt`
    /// nodes, returned as tape nodes so they can be differentiated again.
    pub fn grad_nodes(&mut self, scalar: NodeId, wrt: &[NodeId]) -> Result<Vec<NodeId>, DiffError> {
        if let Some(leaf) = self.stale_leaf {
            return Err(DiffError::StaleRecording(leaf));
        }
        let dim = self.nodes[scalar.0].value.dim();
        if dim != (1, 1) {
            return Err(DiffError::NotScalar(dim.0, dim.1));
        }

        let start = scalar.0;
        let mut adj: Vec<Option<NodeId>> = vec![None; start + 1];
        adj[start] = Some(self.scalar(1.0));

        for id in (0..=start).rev() {
            let Some(g) = adj[id] else { continue };
            let out = NodeId(id);
            match self.nodes[id].op.clone() {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.accumulate(&mut adj, a, g);
                    self.accumulate(&mut adj, b, g);
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut adj, a, g);
                    let ng = self.neg(g);
                    self.accumulate(&mut adj, b, ng);
                }
                Op::Neg(a) => {
                    let ng = self.neg(g);
                    self.accumulate(&mut adj, a, ng);
                }
                Op::Mul(a, b) => {
                    let da = self.mul(g, b);
                    self.accumulate(&mut adj, a, da);
                    let db = self.mul(g, a);
                    self.accumulate(&mut adj, b, db);
                }
                Op::Recip(a) => {
                    // d(1/x) = -g / x² = -g·out²
                    let o2 = self.mul(out, out);
                    let d = self.mul(g, o2);
                    let d = self.neg(d);
                    self.accumulate(&mut adj, a, d);
                }
                Op::Scale(a, c) => {
                    let d = self.scale(g, c);
                    self.accumulate(&mut adj, a, d);
                }
                Op::AddConst(a) => {
                    self.accumulate(&mut adj, a, g);
                }
                Op::MatMul(a, b) => {
                    let bt = self.transpose(b);
                    let da = self.matmul(g, bt);
                    self.accumulate(&mut adj, a, da);
                    let at = self.transpose(a);
                    let db = self.matmul(at, g);
                    self.accumulate(&mut adj, b, db);
                }
                Op::Transpose(a) => {
                    let d = self.transpose(g);
                    self.accumulate(&mut adj, a, d);
                }
                Op::Exp(a) => {
                    let d = self.mul(g, out);
                    self.accumulate(&mut adj, a, d);
                }
                Op::Sqrt(a) => {
                    // d(sqrt x) = g / (2·sqrt x)
                    let r = self.recip(out);
                    let half = self.scale(r, 0.5);
                    let d = self.mul(g, half);
                    self.accumulate(&mut adj, a, d);
                }
                Op::Sigmoid(a) => {
                    // s(1 - s)
                    let ns = self.neg(out);
                    let one_minus = self.add_const(ns, 1.0);
                    let sp = self.mul(out, one_minus);
                    let d = self.mul(g, sp);
                    self.accumulate(&mut adj, a, d);
                }
                Op::Sin(a) => {
                    let c = self.cos(a);
                    let d = self.mul(g, c);
                    self.accumulate(&mut adj, a, d);
                }
                Op::Cos(a) => {
                    let s = self.sin(a);
                    let d = self.mul(g, s);
                    let d = self.neg(d);
                    self.accumulate(&mut adj, a, d);
                }
                Op::SumAll(a) => {
                    let shape = self.nodes[a.0].value.dim();
                    let d = self.broadcast_scalar(g, shape);
                    self.accumulate(&mut adj, a, d);
                }
                Op::BroadcastScalar(a) => {
                    let d = self.sum_all(g);
                    self.accumulate(&mut adj, a, d);
                }
                Op::SumRows(a) => {
                    let n = self.nodes[a.0].value.nrows();
                    let d = self.broadcast_row(g, n);
                    self.accumulate(&mut adj, a, d);
                }
                Op::BroadcastRow(a) => {
                    let d = self.sum_rows(g);
                    self.accumulate(&mut adj, a, d);
                }
                Op::SumCols(a) => {
                    let dcols = self.nodes[a.0].value.ncols();
                    let d = self.broadcast_col(g, dcols);
                    self.accumulate(&mut adj, a, d);
                }
                Op::BroadcastCol(a) => {
                    let d = self.sum_cols(g);
                    self.accumulate(&mut adj, a, d);
                }
                Op::GatherRows(a, idx) => {
                    let n = self.nodes[a.0].value.nrows();
                    let d = self.scatter_add_rows(g, idx, n);
                    self.accumulate(&mut adj, a, d);
                }
                Op::ScatterAddRows(a, idx) => {
                    let d = self.gather_rows(g, idx);
                    self.accumulate(&mut adj, a, d);
                }
                Op::SliceCols(a, lo) => {
                    let total = self.nodes[a.0].value.ncols();
                    let d = self.pad_cols(g, lo, total);
                    self.accumulate(&mut adj, a, d);
                }
                Op::PadCols(a, lo) => {
                    let w = self.nodes[a.0].value.ncols();
                    let d = self.slice_cols(g, lo, lo + w);
                    self.accumulate(&mut adj, a, d);
                }
                Op::GroupSumRows(a, gr) => {
                    let d = self.repeat_rows(g, gr);
                    self.accumulate(&mut adj, a, d);
                }
                Op::RepeatRows(a, gr) => {
                    let d = self.group_sum_rows(g, gr);
                    self.accumulate(&mut adj, a, d);
                }
                Op::GroupSumCols(a, gc) => {
                    let d = self.repeat_cols_grouped(g, gc);
                    self.accumulate(&mut adj, a, d);
                }
                Op::RepeatColsGrouped(a, gc) => {
                    let d = self.group_sum_cols(g, gc);
                    self.accumulate(&mut adj, a, d);
                }
                Op::Reshape(a) => {
                    let shape = self.nodes[a.0].value.dim();
                    let d = self.reshape(g, shape);
                    self.accumulate(&mut adj, a, d);
                }
            }
        }

        let mut out = Vec::with_capacity(wrt.len());
        for &w in wrt {
            let node = match adj.get(w.0).copied().flatten() {
                Some(n) => n,
                None => {
                    let shape = self.nodes[w.0].value.dim();
                    self.leaf(Array2::zeros(shape))
                }
            };
            if let Some(index) = self.nodes[node.0]
                .value
                .iter()
                .position(|x| !x.is_finite())
            {
                return Err(DiffError::NonFiniteGradient {
                    node: node.0,
                    index,
                });
            }
            out.push(node);
        }
        Ok(out)
    }

    /// Like [`Tape::grad_nodes`] but returns materialized gradient values.
    pub fn grad_values(
        &mut self,
        scalar: NodeId,
        wrt: &[NodeId],
    ) -> Result<Vec<Array2<f64>>, DiffError> {
        let nodes = self.grad_nodes(scalar, wrt)?;
        Ok(nodes.into_iter().map(|n| self.value(n).clone()).collect())
    }
}

/// A forward pass recorded for one conformation: the tape plus the leaves
/// gradients are taken against.
pub struct Recording {
    pub tape: Tape,
    pub positions: NodeId,
    pub param_leaves: Vec<NodeId>,
}

impl Recording {
    /// Gradients of `scalar` with respect to positions and/or parameters.
    /// Repeated calls on the same recording return identical values.
    pub fn grad(&mut self, scalar: DiffScalar, wrt: Wrt) -> Result<GradientResult, DiffError> {
        let want_pos = matches!(wrt, Wrt::Positions | Wrt::Both);
        let want_params = matches!(wrt, Wrt::Params | Wrt::Both);
        let mut targets = Vec::new();
        if want_pos {
            targets.push(self.positions);
        }
        if want_params {
            targets.extend(self.param_leaves.iter().copied());
        }
        let grads = self.tape.grad_values(scalar.node, &targets)?;
        let mut iter = grads.into_iter();
        let d_positions = if want_pos { iter.next() } else { None };
        let d_params = if want_params {
            let mut flat = Vec::new();
            for g in iter {
                flat.extend(g.iter().copied());
            }
            Some(flat)
        } else {
            None
        };
        Ok(GradientResult {
            d_positions,
            d_params,
        })
    }
}
