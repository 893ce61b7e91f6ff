//! Append-only computation graph with a backward pass that emits graph nodes.
//!
//! Shapes are fixed when a node is appended, so shape errors surface while the
//! graph is being built. Values are produced by [`Graph::eval`] /
//! [`Graph::eval_many`] against a set of input [`Bindings`]; a graph can be
//! built once and evaluated many times with fresh bindings.
//!
//! [`Graph::grad`] never touches existing nodes. It appends the adjoint
//! computation as ordinary nodes, so its outputs can be differentiated again.
//! A `wrt` node that the scalar does not depend on gets a structural zero node
//! rather than an error.

use std::borrow::Cow;
use std::collections::HashMap;

use crate::activation::Activation;
use crate::error::{AutodiffError, Result};
use crate::tensor::{gemm_into, matmul_shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a low-rank tensor is expanded to a matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BroadcastKind {
    /// `[]` to any shape.
    Scalar,
    /// `(d,)` repeated down the rows of a `(b, d)` matrix.
    Row,
    /// `(b,)` repeated across the columns of a `(b, d)` matrix.
    Col,
}

#[derive(Clone, Debug)]
pub enum Op {
    Input { name: String },
    Constant,
    Zeros,
    /// `x·W + b` with `x: (b, n)`, `W: (n, m)`, `b: (m,)`.
    Affine { x: NodeId, w: NodeId, b: NodeId },
    MatMul { a: NodeId, b: NodeId, trans_a: bool, trans_b: bool },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    /// Sum of all elements, or along one axis of a matrix.
    Sum { x: NodeId, axis: Option<usize> },
    Mean(NodeId),
    Square(NodeId),
    /// `order`-th derivative of an activation, applied elementwise.
    Act { x: NodeId, act: Activation, order: u32 },
    /// Row-wise inner product; vectors reduce to a scalar.
    Dot(NodeId, NodeId),
    ConcatCols(NodeId, NodeId),
    SliceCols { x: NodeId, start: usize, len: usize },
    /// Places `x` into columns `start..` of a zero matrix `width` wide.
    EmbedCols { x: NodeId, start: usize, width: usize },
    Broadcast { x: NodeId, kind: BroadcastKind },
    /// Stacks `n` copies of `x` vertically.
    TileRows { x: NodeId, n: usize },
    /// Sums the `n` vertical blocks of `x`; adjoint of `TileRows`.
    FoldRows { x: NodeId, n: usize },
}

impl Op {
    pub fn tag(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Constant => "constant",
            Op::Zeros => "zeros",
            Op::Affine { .. } => "affine",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sum { .. } => "sum",
            Op::Mean(..) => "mean",
            Op::Square(..) => "square",
            Op::Act {
                act: Activation::Gelu,
                ..
            } => "gelu",
            Op::Act {
                act: Activation::Silu,
                ..
            } => "silu",
            Op::Dot(..) => "dot",
            Op::ConcatCols(..) => "concat",
            Op::SliceCols { .. } => "slice",
            Op::EmbedCols { .. } => "embed",
            Op::Broadcast { .. } => "broadcast",
            Op::TileRows { .. } => "tile",
            Op::FoldRows { .. } => "fold",
        }
    }

    pub fn parents(&self) -> Vec<NodeId> {
        match *self {
            Op::Input { .. } | Op::Constant | Op::Zeros => vec![],
            Op::Affine { x, w, b } => vec![x, w, b],
            Op::MatMul { a, b, .. } => vec![a, b],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Dot(a, b) | Op::ConcatCols(a, b) => {
                vec![a, b]
            }
            Op::Scale(x, _)
            | Op::Sum { x, .. }
            | Op::Mean(x)
            | Op::Square(x)
            | Op::Act { x, .. }
            | Op::SliceCols { x, .. }
            | Op::EmbedCols { x, .. }
            | Op::Broadcast { x, .. }
            | Op::TileRows { x, .. }
            | Op::FoldRows { x, .. } => vec![x],
        }
    }
}

#[derive(Clone, Debug)]
pub struct Node {
    id: NodeId,
    op: Op,
    shape: Vec<usize>,
    /// Only constants carry a stored value; everything else is computed per
    /// evaluation call.
    value: Option<Tensor>,
}

impl Node {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn op(&self) -> &Op {
        &self.op
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn value(&self) -> Option<&Tensor> {
        self.value.as_ref()
    }
}

/// Values for the input nodes of one evaluation.
#[derive(Default, Clone)]
pub struct Bindings<'a> {
    map: HashMap<NodeId, &'a Tensor>,
}

impl<'a> Bindings<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, node: NodeId, value: &'a Tensor) -> &mut Self {
        self.map.insert(node, value);
        self
    }

    pub fn with(mut self, node: NodeId, value: &'a Tensor) -> Self {
        self.map.insert(node, value);
        self
    }

    pub fn get(&self, node: NodeId) -> Option<&'a Tensor> {
        self.map.get(&node).copied()
    }
}

#[derive(Default, Clone, Debug)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn mismatch(op: &'static str, detail: String) -> AutodiffError {
    AutodiffError::ShapeMismatch { op, detail }
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

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Option<Tensor>) -> NodeId {
        let id = NodeId(self.nodes.len());
        debug_assert!(op.parents().iter().all(|p| p.0 < id.0));
        self.nodes.push(Node {
            id,
            op,
            shape,
            value,
        });
        id
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(AutodiffError::UnknownNode(id))
        }
    }

    // ---- construction -------------------------------------------------

    pub fn input(&mut self, name: impl Into<String>, shape: &[usize]) -> NodeId {
        self.push(Op::Input { name: name.into() }, shape.to_vec(), None)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(Op::Constant, shape, Some(value))
    }

    pub fn scalar(&mut self, value: f64) -> NodeId {
        self.constant(Tensor::scalar(value))
    }

    pub fn zeros(&mut self, shape: &[usize]) -> NodeId {
        self.push(Op::Zeros, shape.to_vec(), None)
    }

    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        for id in [x, w, b] {
            self.check(id)?;
        }
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[0] || ws[1] != bs[0] {
            return Err(mismatch(
                "affine",
                format!("x {xs:?}, W {ws:?}, b {bs:?}"),
            ));
        }
        let shape = vec![xs[0], ws[1]];
        Ok(self.push(Op::Affine { x, w, b }, shape, None))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId, trans_a: bool, trans_b: bool) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let shape = matmul_shape(self.shape(a), self.shape(b), trans_a, trans_b)?;
        Ok(self.push(
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
            },
            shape,
            None,
        ))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<Vec<usize>> {
        self.check(a)?;
        self.check(b)?;
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(self.shape(a).to_vec())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.same_shape("add", a, b)?;
        Ok(self.push(Op::Add(a, b), shape, None))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.same_shape("sub", a, b)?;
        Ok(self.push(Op::Sub(a, b), shape, None))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.same_shape("mul", a, b)?;
        Ok(self.push(Op::Mul(a, b), shape, None))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        if factor == 1.0 {
            return x;
        }
        let shape = self.shape(x).to_vec();
        self.push(Op::Scale(x, factor), shape, None)
    }

    pub fn neg(&mut self, x: NodeId) -> NodeId {
        self.scale(x, -1.0)
    }

    /// Sum of all elements, producing a scalar.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sum { x, axis: None }, Vec::new(), None)
    }

    /// Sum along `axis` of a matrix: axis 0 yields `(cols,)`, axis 1 `(rows,)`.
    pub fn sum_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.check(x)?;
        let s = self.shape(x);
        if s.len() != 2 || axis > 1 {
            return Err(mismatch("sum", format!("axis {axis} of {s:?}")));
        }
        let shape = vec![s[1 - axis]];
        Ok(self.push(Op::Sum { x, axis: Some(axis) }, shape, None))
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Mean(x), Vec::new(), None)
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        let shape = self.shape(x).to_vec();
        self.push(Op::Square(x), shape, None)
    }

    pub fn activation(&mut self, x: NodeId, act: Activation, order: u32) -> NodeId {
        let shape = self.shape(x).to_vec();
        self.push(Op::Act { x, act, order }, shape, None)
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        self.activation(x, Activation::Gelu, 0)
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        self.activation(x, Activation::Silu, 0)
    }

    /// Row-wise dot product of two equal-shape matrices (`(b,)` result), or
    /// the inner product of two vectors (scalar result).
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.same_shape("dot", a, b)?;
        let shape = match s.len() {
            1 => Vec::new(),
            2 => vec![s[0]],
            _ => return Err(mismatch("dot", format!("rank {} operands", s.len()))),
        };
        Ok(self.push(Op::Dot(a, b), shape, None))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(mismatch("concat", format!("{sa:?} vs {sb:?}")));
        }
        let shape = vec![sa[0], sa[1] + sb[1]];
        Ok(self.push(Op::ConcatCols(a, b), shape, None))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        self.check(x)?;
        let s = self.shape(x);
        if s.len() != 2 || start + len > s[1] {
            return Err(mismatch("slice", format!("cols {start}..{} of {s:?}", start + len)));
        }
        let shape = vec![s[0], len];
        Ok(self.push(Op::SliceCols { x, start, len }, shape, None))
    }

    fn embed_cols(&mut self, x: NodeId, start: usize, width: usize) -> NodeId {
        let s = self.shape(x);
        let shape = vec![s[0], width];
        self.push(Op::EmbedCols { x, start, width }, shape, None)
    }

    pub fn broadcast(&mut self, x: NodeId, kind: BroadcastKind, shape: &[usize]) -> Result<NodeId> {
        self.check(x)?;
        let s = self.shape(x);
        let ok = match kind {
            BroadcastKind::Scalar => s.is_empty(),
            BroadcastKind::Row => shape.len() == 2 && s == [shape[1]],
            BroadcastKind::Col => shape.len() == 2 && s == [shape[0]],
        };
        if !ok {
            return Err(mismatch("broadcast", format!("{s:?} as {kind:?} to {shape:?}")));
        }
        Ok(self.push(Op::Broadcast { x, kind }, shape.to_vec(), None))
    }

    pub fn tile_rows(&mut self, x: NodeId, n: usize) -> Result<NodeId> {
        self.check(x)?;
        let mut shape = self.shape(x).to_vec();
        if shape.is_empty() || n == 0 {
            return Err(mismatch("tile", format!("{n} copies of {shape:?}")));
        }
        shape[0] *= n;
        Ok(self.push(Op::TileRows { x, n }, shape, None))
    }

    pub fn fold_rows(&mut self, x: NodeId, n: usize) -> Result<NodeId> {
        self.check(x)?;
        let mut shape = self.shape(x).to_vec();
        if shape.is_empty() || n == 0 || shape[0] % n != 0 {
            return Err(mismatch("fold", format!("{n} blocks of {shape:?}")));
        }
        shape[0] /= n;
        Ok(self.push(Op::FoldRows { x, n }, shape, None))
    }

    // ---- structure queries --------------------------------------------

    /// True when `ancestor` is reachable from `node` by following parents.
    pub fn depends_on(&self, node: NodeId, ancestor: NodeId) -> bool {
        if ancestor > node {
            return false;
        }
        let mut seen = vec![false; node.0 + 1];
        let mut stack = vec![node];
        while let Some(n) = stack.pop() {
            if n == ancestor {
                return true;
            }
            if std::mem::replace(&mut seen[n.0], true) {
                continue;
            }
            stack.extend(self.nodes[n.0].op.parents().into_iter().filter(|p| *p >= ancestor));
        }
        false
    }

    /// Marks every ancestor of `roots` (inclusive).
    fn ancestors(&self, roots: &[NodeId]) -> Vec<bool> {
        let top = roots.iter().map(|r| r.0).max().map_or(0, |m| m + 1);
        let mut mark = vec![false; top];
        for r in roots {
            mark[r.0] = true;
        }
        for i in (0..top).rev() {
            if mark[i] {
                for p in self.nodes[i].op.parents() {
                    mark[p.0] = true;
                }
            }
        }
        mark
    }

    // ---- evaluation ---------------------------------------------------

    pub fn eval(&self, node: NodeId, bindings: &Bindings) -> Result<Tensor> {
        Ok(self.eval_many(&[node], bindings)?.pop().expect("one output"))
    }

    /// Evaluates several nodes in one pass, sharing intermediate values.
    /// Intermediates are released as soon as their last consumer has run.
    pub fn eval_many(&self, outputs: &[NodeId], bindings: &Bindings) -> Result<Vec<Tensor>> {
        for &o in outputs {
            self.check(o)?;
        }
        let needed = self.ancestors(outputs);
        let top = needed.len();
        let mut uses = vec![0usize; top];
        for i in 0..top {
            if needed[i] {
                for p in self.nodes[i].op.parents() {
                    uses[p.0] += 1;
                }
            }
        }
        for o in outputs {
            uses[o.0] += 1;
        }

        let mut cache: Vec<Option<Cow<Tensor>>> = vec![None; top];
        for i in 0..top {
            if !needed[i] {
                continue;
            }
            let node = &self.nodes[i];
            let value = self.compute(node, &cache, bindings)?;
            if !value.is_finite() {
                return Err(AutodiffError::NonFinite {
                    node: node.id,
                    op: node.op.tag(),
                });
            }
            cache[i] = Some(value);
            for p in node.op.parents() {
                uses[p.0] -= 1;
                if uses[p.0] == 0 {
                    cache[p.0] = None;
                }
            }
        }
        Ok(outputs
            .iter()
            .map(|o| {
                cache[o.0]
                    .as_ref()
                    .expect("output retained")
                    .clone()
                    .into_owned()
            })
            .collect())
    }

    fn compute<'a>(
        &'a self,
        node: &'a Node,
        cache: &[Option<Cow<'a, Tensor>>],
        bindings: &Bindings<'a>,
    ) -> Result<Cow<'a, Tensor>> {
        let get = |id: NodeId| -> &Tensor { cache[id.0].as_deref().expect("parent evaluated") };
        let shape = node.shape.clone();
        let out = match &node.op {
            Op::Input { name } => {
                let t = bindings.get(node.id).ok_or_else(|| AutodiffError::Unbound {
                    node: node.id,
                    name: name.clone(),
                })?;
                if t.shape() != node.shape.as_slice() {
                    return Err(AutodiffError::BindingShape {
                        node: node.id,
                        expected: node.shape.clone(),
                        got: t.shape().to_vec(),
                    });
                }
                return Ok(Cow::Borrowed(t));
            }
            Op::Constant => return Ok(Cow::Borrowed(node.value.as_ref().expect("constant value"))),
            Op::Zeros => Tensor::zeros(&shape),
            Op::Affine { x, w, b } => {
                let (x, w, b) = (get(*x), get(*w), get(*b));
                let rows = x.rows();
                let mut data = Vec::with_capacity(rows * b.numel());
                for _ in 0..rows {
                    data.extend_from_slice(b.data());
                }
                let mut out = Tensor::new(shape, data)?;
                gemm_into(x, w, false, false, &mut out, 1.0);
                out
            }
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
            } => {
                let mut out = Tensor::zeros(&shape);
                gemm_into(get(*a), get(*b), *trans_a, *trans_b, &mut out, 0.0);
                out
            }
            Op::Add(a, b) => get(*a).zip_map(get(*b), |x, y| x + y)?,
            Op::Sub(a, b) => get(*a).zip_map(get(*b), |x, y| x - y)?,
            Op::Mul(a, b) => get(*a).zip_map(get(*b), |x, y| x * y)?,
            Op::Scale(x, c) => {
                let c = *c;
                get(*x).map(|v| v * c)
            }
            Op::Sum { x, axis } => {
                let x = get(*x);
                match axis {
                    None => Tensor::scalar(x.sum()),
                    Some(0) => {
                        let cols = x.cols();
                        let mut acc = vec![0.0; cols];
                        for r in 0..x.rows() {
                            for (a, v) in acc.iter_mut().zip(x.row(r)) {
                                *a += v;
                            }
                        }
                        Tensor::vector(acc)
                    }
                    Some(_) => Tensor::vector((0..x.rows()).map(|r| x.row(r).iter().sum()).collect()),
                }
            }
            Op::Mean(x) => Tensor::scalar(get(*x).mean()),
            Op::Square(x) => get(*x).map(|v| v * v),
            Op::Act { x, act, order } => get(*x).map(act.derivative(*order)),
            Op::Dot(a, b) => {
                let (a, b) = (get(*a), get(*b));
                if a.rank() == 1 {
                    Tensor::scalar(a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum())
                } else {
                    Tensor::vector(
                        (0..a.rows())
                            .map(|r| a.row(r).iter().zip(b.row(r)).map(|(x, y)| x * y).sum())
                            .collect(),
                    )
                }
            }
            Op::ConcatCols(a, b) => {
                let (a, b) = (get(*a), get(*b));
                let mut data = Vec::with_capacity(a.numel() + b.numel());
                for r in 0..a.rows() {
                    data.extend_from_slice(a.row(r));
                    data.extend_from_slice(b.row(r));
                }
                Tensor::new(shape, data)?
            }
            Op::SliceCols { x, start, len } => {
                let x = get(*x);
                let mut data = Vec::with_capacity(x.rows() * len);
                for r in 0..x.rows() {
                    data.extend_from_slice(&x.row(r)[*start..start + len]);
                }
                Tensor::new(shape, data)?
            }
            Op::EmbedCols { x, start, width } => {
                let x = get(*x);
                let mut out = Tensor::zeros(&shape);
                let w = x.cols();
                for r in 0..x.rows() {
                    out.data_mut()[r * width + start..r * width + start + w].copy_from_slice(x.row(r));
                }
                out
            }
            Op::Broadcast { x, kind } => {
                let x = get(*x);
                match kind {
                    BroadcastKind::Scalar => Tensor::full(&shape, x.item()),
                    BroadcastKind::Row => {
                        let mut data = Vec::with_capacity(shape[0] * shape[1]);
                        for _ in 0..shape[0] {
                            data.extend_from_slice(x.data());
                        }
                        Tensor::new(shape, data)?
                    }
                    BroadcastKind::Col => {
                        let mut data = Vec::with_capacity(shape[0] * shape[1]);
                        for &v in x.data() {
                            data.extend(std::iter::repeat(v).take(shape[1]));
                        }
                        Tensor::new(shape, data)?
                    }
                }
            }
            Op::TileRows { x, n } => {
                let x = get(*x);
                let mut data = Vec::with_capacity(x.numel() * n);
                for _ in 0..*n {
                    data.extend_from_slice(x.data());
                }
                Tensor::new(shape, data)?
            }
            Op::FoldRows { x, n } => {
                let x = get(*x);
                let block = x.numel() / n;
                let mut data = x.data()[..block].to_vec();
                for k in 1..*n {
                    for (a, v) in data.iter_mut().zip(&x.data()[k * block..(k + 1) * block]) {
                        *a += v;
                    }
                }
                Tensor::new(shape, data)?
            }
        };
        Ok(Cow::Owned(out))
    }

    // ---- differentiation ----------------------------------------------

    /// Appends nodes computing `∂scalar/∂wrt[i]` for each `wrt` node and
    /// returns their ids. The returned nodes are ordinary graph nodes and may
    /// themselves be differentiated. Unreachable `wrt` nodes yield a zero node.
    pub fn grad(&mut self, scalar: NodeId, wrt: &[NodeId]) -> Result<Vec<NodeId>> {
        self.check(scalar)?;
        for &w in wrt {
            self.check(w)?;
        }
        if !self.shape(scalar).is_empty() {
            return Err(AutodiffError::NotScalar {
                node: scalar,
                shape: self.shape(scalar).to_vec(),
            });
        }

        // Nodes whose value depends on at least one wrt node.
        let limit = scalar.0 + 1;
        let mut active = vec![false; limit];
        for &w in wrt {
            if w.0 < limit {
                active[w.0] = true;
            }
        }
        let lowest = wrt.iter().map(|w| w.0).min().unwrap_or(limit);
        for i in lowest..limit {
            if !active[i] && self.nodes[i].op.parents().iter().any(|p| active[p.0]) {
                active[i] = true;
            }
        }

        let mut adjoint: HashMap<NodeId, NodeId> = HashMap::new();
        if active[scalar.0] {
            let seed = self.scalar(1.0);
            adjoint.insert(scalar, seed);
        }
        for i in (lowest..limit).rev() {
            if !active[i] {
                continue;
            }
            let id = NodeId(i);
            let Some(&g) = adjoint.get(&id) else { continue };
            let op = self.nodes[i].op.clone();
            for (parent, contrib) in self.vjp(id, &op, g, &active)? {
                let acc = match adjoint.get(&parent) {
                    Some(&prev) => self.add(prev, contrib)?,
                    None => contrib,
                };
                adjoint.insert(parent, acc);
            }
        }

        Ok(wrt
            .iter()
            .map(|w| match adjoint.get(w) {
                Some(&g) => g,
                None => {
                    let shape = self.shape(*w).to_vec();
                    self.zeros(&shape)
                }
            })
            .collect())
    }

    /// Vector-Jacobian products of `op` (the op of node `id`) for every
    /// active parent, given the node's adjoint `g`.
    fn vjp(
        &mut self,
        id: NodeId,
        op: &Op,
        g: NodeId,
        active: &[bool],
    ) -> Result<Vec<(NodeId, NodeId)>> {
        let is_active = |n: NodeId| active[n.0];
        let mut out = Vec::new();
        match *op {
            Op::Input { .. } | Op::Constant | Op::Zeros => {}
            Op::Affine { x, w, b } => {
                if is_active(x) {
                    out.push((x, self.matmul(g, w, false, true)?));
                }
                if is_active(w) {
                    out.push((w, self.matmul(x, g, true, false)?));
                }
                if is_active(b) {
                    out.push((b, self.sum_axis(g, 0)?));
                }
            }
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
            } => {
                if is_active(a) {
                    let d = if trans_a {
                        self.matmul(b, g, trans_b, true)?
                    } else {
                        self.matmul(g, b, false, !trans_b)?
                    };
                    out.push((a, d));
                }
                if is_active(b) {
                    let d = if trans_b {
                        self.matmul(g, a, true, trans_a)?
                    } else {
                        self.matmul(a, g, !trans_a, false)?
                    };
                    out.push((b, d));
                }
            }
            Op::Add(a, b) => {
                if is_active(a) {
                    out.push((a, g));
                }
                if is_active(b) {
                    out.push((b, g));
                }
            }
            Op::Sub(a, b) => {
                if is_active(a) {
                    out.push((a, g));
                }
                if is_active(b) {
                    out.push((b, self.neg(g)));
                }
            }
            Op::Mul(a, b) => {
                if is_active(a) {
                    out.push((a, self.mul(g, b)?));
                }
                if is_active(b) {
                    out.push((b, self.mul(g, a)?));
                }
            }
            Op::Scale(x, c) => out.push((x, self.scale(g, c))),
            Op::Sum { x, axis } => {
                let shape = self.shape(x).to_vec();
                let kind = match axis {
                    None => BroadcastKind::Scalar,
                    Some(0) => BroadcastKind::Row,
                    Some(_) => BroadcastKind::Col,
                };
                out.push((x, self.broadcast(g, kind, &shape)?));
            }
            Op::Mean(x) => {
                let shape = self.shape(x).to_vec();
                let n = shape.iter().product::<usize>().max(1) as f64;
                let b = self.broadcast(g, BroadcastKind::Scalar, &shape)?;
                out.push((x, self.scale(b, 1.0 / n)));
            }
            Op::Square(x) => {
                let two_x = self.scale(x, 2.0);
                out.push((x, self.mul(g, two_x)?));
            }
            Op::Act { x, act, order } => {
                let d = self.activation(x, act, order + 1);
                out.push((x, self.mul(g, d)?));
            }
            Op::Dot(a, b) => {
                let shape = self.shape(a).to_vec();
                let kind = if shape.len() == 1 {
                    BroadcastKind::Scalar
                } else {
                    BroadcastKind::Col
                };
                let gb = self.broadcast(g, kind, &shape)?;
                if is_active(a) {
                    out.push((a, self.mul(gb, b)?));
                }
                if is_active(b) {
                    out.push((b, self.mul(gb, a)?));
                }
            }
            Op::ConcatCols(a, b) => {
                let wa = self.shape(a)[1];
                let wb = self.shape(b)[1];
                if is_active(a) {
                    out.push((a, self.slice_cols(g, 0, wa)?));
                }
                if is_active(b) {
                    out.push((b, self.slice_cols(g, wa, wb)?));
                }
            }
            Op::SliceCols { x, start, .. } => {
                let width = self.shape(x)[1];
                out.push((x, self.embed_cols(g, start, width)));
            }
            Op::EmbedCols { x, start, .. } => {
                let len = self.shape(x)[1];
                out.push((x, self.slice_cols(g, start, len)?));
            }
            Op::Broadcast { x, kind } => {
                let d = match kind {
                    BroadcastKind::Scalar => self.sum(g),
                    BroadcastKind::Row => self.sum_axis(g, 0)?,
                    BroadcastKind::Col => self.sum_axis(g, 1)?,
                };
                out.push((x, d));
            }
            Op::TileRows { x, n } => out.push((x, self.fold_rows(g, n)?)),
            Op::FoldRows { x, n } => out.push((x, self.tile_rows(g, n)?)),
        }
        debug_assert!(out.iter().all(|(p, _)| *p < id));
        Ok(out)
    }
}
