//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in creation order, which is already a
//! topological order: an op can only consume nodes that exist. `backward`
//! walks the tape once in reverse and accumulates vector-Jacobian products.
//!
//! Parameters are not copied onto the tape. A graph borrows a
//! [`ParamStore`] and parameter nodes read their values from it; their
//! gradients come back keyed by [`ParamId`].

use std::borrow::Cow;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{split_axis, Scalar, Tensor};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a specific graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId {
    graph: u64,
    index: usize,
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(usize, usize),
    MatVec(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddColumn { mat: usize, vec: usize },
    MulColumn { mat: usize, vec: usize },
    Scale(usize, T),
    Sigmoid(usize),
    Tanh(usize),
    Softmax { input: usize, axis: usize },
    PowerL2 {
        input: usize,
        axis: usize,
        norms: Vec<T>,
        clamped: Vec<bool>,
    },
    Sum(usize),
    Concat(Vec<usize>),
    StackColumns(Vec<usize>),
    Slice { input: usize, start: usize },
    Reshape(usize),
    GatherRows { table: usize, indices: Vec<usize> },
    SumBlocks { input: usize, blocks: usize },
    NPair { scores: usize, gt: usize, tau: T },
    CrossEntropy { scores: usize, labels: Vec<T> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::MatVec(..) => "matvec",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddColumn { .. } => "add_column",
            Op::MulColumn { .. } => "mul_column",
            Op::Scale(..) => "scale",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Softmax { .. } => "softmax",
            Op::PowerL2 { .. } => "normalize_power_l2",
            Op::Sum(_) => "sum",
            Op::Concat(_) => "concat",
            Op::StackColumns(_) => "stack_columns",
            Op::Slice { .. } => "slice",
            Op::Reshape(_) => "reshape",
            Op::GatherRows { .. } => "gather_rows",
            Op::SumBlocks { .. } => "sum_blocks",
            Op::NPair { .. } => "npair_temperature_loss",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

struct Node<'p, T: Clone> {
    shape: Vec<usize>,
    value: Cow<'p, [T]>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation over `T`, optionally reading parameters from a store.
pub struct Graph<'p, T: Scalar> {
    id: u64,
    nodes: Vec<Node<'p, T>>,
    params: Option<&'p ParamStore<T>>,
    param_nodes: Vec<Option<usize>>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    graph: u64,
    shapes: Vec<Vec<usize>>,
    nodes: Vec<Option<Vec<T>>>,
    params: Vec<(ParamId, Vec<T>)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to `id` (zeros when `id` does not influence the output).
    pub fn wrt(&self, id: NodeId) -> Result<Vec<T>> {
        if id.graph != self.graph {
            return Err(Error::DetachedNode);
        }
        Ok(match &self.nodes[id.index] {
            Some(g) => g.clone(),
            None => vec![T::zero(); self.shapes[id.index].iter().product()],
        })
    }

    /// Parameter gradients, in the order the parameters were first used.
    pub fn params(&self) -> &[(ParamId, Vec<T>)] {
        &self.params
    }

    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .map(|(_, g)| g.as_slice())
    }

    /// Adds every parameter gradient into the store's gradient buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for (id, g) in &self.params {
            store.get_mut(*id).accumulate_grad(g);
        }
    }
}

impl<'p, T: Scalar> Default for Graph<'p, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: None,
            param_nodes: Vec::new(),
        }
    }

    pub fn with_params(store: &'p ParamStore<T>) -> Self {
        let mut g = Self::new();
        g.params = Some(store);
        g.param_nodes = vec![None; store.len()];
        g
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, id: NodeId) -> Result<usize> {
        if id.graph != self.id || id.index >= self.nodes.len() {
            return Err(Error::DetachedNode);
        }
        Ok(id.index)
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len(), "{}", op.name());
        self.nodes.push(Node {
            shape,
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        NodeId {
            graph: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn rg(&self, inputs: &[usize]) -> bool {
        inputs.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Leaf node holding a copy of `tensor`; tracks gradients if the tensor does.
    pub fn input(&mut self, tensor: &Tensor<T>) -> NodeId {
        self.push(
            tensor.shape().to_vec(),
            tensor.data().to_vec(),
            Op::Leaf,
            tensor.requires_grad(),
        )
    }

    /// Leaf node that never receives gradients.
    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<NodeId> {
        let t = Tensor::new(shape.to_vec(), data)?;
        Ok(self.input(&t))
    }

    pub fn constant_vec(&mut self, data: Vec<T>) -> NodeId {
        self.input(&Tensor::vector(data))
    }

    /// Node reading parameter `id`; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(Some(index)) = self.param_nodes.get(id.0) {
            return NodeId {
                graph: self.id,
                index: *index,
            };
        }
        let store = self.params.expect("graph has no parameter store");
        let t = store.get(id);
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: Cow::Borrowed(t.data()),
            op: Op::Param(id),
            requires_grad: true,
        });
        let index = self.nodes.len() - 1;
        self.param_nodes[id.0] = Some(index);
        NodeId {
            graph: self.id,
            index,
        }
    }

    pub fn param_named(&mut self, name: &str) -> Result<NodeId> {
        let store = self.params.expect("graph has no parameter store");
        let id = store.id(name)?;
        Ok(self.param(id))
    }

    pub fn value(&self, id: NodeId) -> &[T] {
        &self.nodes[self.idx(id).expect("node of this graph")].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[self.idx(id).expect("node of this graph")].shape
    }

    pub fn to_tensor(&self, id: NodeId) -> Tensor<T> {
        Tensor::new(self.shape(id).to_vec(), self.value(id).to_vec()).expect("consistent node")
    }

    /// First element of a node; meant for scalar outputs.
    pub fn scalar(&self, id: NodeId) -> T {
        self.value(id)[0]
    }

    // ── Linear algebra ────────────────────────────────────────────────

    /// `[m×k] · [k×n] → [m×n]`
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (sa, sb) = (&self.nodes[ai].shape, &self.nodes[bi].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: sa.clone(),
                right: sb.clone(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (av, bv) = (&self.nodes[ai].value, &self.nodes[bi].value);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = av[i * k + p];
                let brow = &bv[p * n..(p + 1) * n];
                for (o, &bpj) in row.iter_mut().zip(brow) {
                    *o = *o + aip * bpj;
                }
            }
        }
        let rg = self.rg(&[ai, bi]);
        Ok(self.push(vec![m, n], out, Op::MatMul(ai, bi), rg))
    }

    /// `[m×k] · [k] → [m]`
    pub fn matvec(&mut self, a: NodeId, x: NodeId) -> Result<NodeId> {
        let (ai, xi) = (self.idx(a)?, self.idx(x)?);
        let (sa, sx) = (&self.nodes[ai].shape, &self.nodes[xi].shape);
        if sa.len() != 2 || sx.len() != 1 || sa[1] != sx[0] {
            return Err(Error::ShapeMismatch {
                op: "matvec",
                left: sa.clone(),
                right: sx.clone(),
            });
        }
        let (m, k) = (sa[0], sa[1]);
        let (av, xv) = (&self.nodes[ai].value, &self.nodes[xi].value);
        let out = (0..m)
            .map(|i| {
                av[i * k..(i + 1) * k]
                    .iter()
                    .zip(xv.iter())
                    .fold(T::zero(), |acc, (&a, &x)| acc + a * x)
            })
            .collect();
        let rg = self.rg(&[ai, xi]);
        Ok(self.push(vec![m], out, Op::MatVec(ai, xi), rg))
    }

    fn elementwise(
        &mut self,
        a: NodeId,
        b: NodeId,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: fn(usize, usize) -> Op<T>,
    ) -> Result<NodeId> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        if self.nodes[ai].shape != self.nodes[bi].shape {
            return Err(Error::ShapeMismatch {
                op: name,
                left: self.nodes[ai].shape.clone(),
                right: self.nodes[bi].shape.clone(),
            });
        }
        let out = self.nodes[ai]
            .value
            .iter()
            .zip(self.nodes[bi].value.iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(&[ai, bi]);
        let shape = self.nodes[ai].shape.clone();
        Ok(self.push(shape, out, op(ai, bi), rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    fn column_broadcast(
        &mut self,
        mat: NodeId,
        vec: NodeId,
        name: &'static str,
        mul: bool,
    ) -> Result<NodeId> {
        let (mi, vi) = (self.idx(mat)?, self.idx(vec)?);
        let (sm, sv) = (&self.nodes[mi].shape, &self.nodes[vi].shape);
        let rows = sm[0];
        if sv.len() != 1 || sm.len() > 2 || sv[0] != rows {
            return Err(Error::ShapeMismatch {
                op: name,
                left: sm.clone(),
                right: sv.clone(),
            });
        }
        let cols = if sm.len() == 2 { sm[1] } else { 1 };
        let (mv, vv) = (&self.nodes[mi].value, &self.nodes[vi].value);
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                let x = mv[i * cols + j];
                out.push(if mul { x * vv[i] } else { x + vv[i] });
            }
        }
        let rg = self.rg(&[mi, vi]);
        let shape = sm.clone();
        let op = if mul {
            Op::MulColumn { mat: mi, vec: vi }
        } else {
            Op::AddColumn { mat: mi, vec: vi }
        };
        Ok(self.push(shape, out, op, rg))
    }

    /// Adds vector `[r]` to every column of `[r×c]`.
    pub fn add_column(&mut self, mat: NodeId, vec: NodeId) -> Result<NodeId> {
        self.column_broadcast(mat, vec, "add_column", false)
    }

    /// Multiplies every column of `[r×c]` elementwise by vector `[r]`.
    pub fn mul_column(&mut self, mat: NodeId, vec: NodeId) -> Result<NodeId> {
        self.column_broadcast(mat, vec, "mul_column", true)
    }

    pub fn scale(&mut self, a: NodeId, s: T) -> Result<NodeId> {
        let ai = self.idx(a)?;
        let out = self.nodes[ai].value.iter().map(|&x| x * s).collect();
        let rg = self.rg(&[ai]);
        let shape = self.nodes[ai].shape.clone();
        Ok(self.push(shape, out, Op::Scale(ai, s), rg))
    }

    // ── Nonlinearities ────────────────────────────────────────────────

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let ai = self.idx(a)?;
        let out = self.nodes[ai].value.iter().map(|&x| sigmoid(x)).collect();
        let rg = self.rg(&[ai]);
        let shape = self.nodes[ai].shape.clone();
        Ok(self.push(shape, out, Op::Sigmoid(ai), rg))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let ai = self.idx(a)?;
        let out = self.nodes[ai].value.iter().map(|&x| x.tanh()).collect();
        let rg = self.rg(&[ai]);
        let shape = self.nodes[ai].shape.clone();
        Ok(self.push(shape, out, Op::Tanh(ai), rg))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let ai = self.idx(a)?;
        let shape = self.nodes[ai].shape.clone();
        if axis >= shape.len() {
            return Err(Error::AxisOutOfRange {
                op: "softmax",
                axis,
                shape,
            });
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        if n == 0 {
            return Err(Error::EmptyAxis { op: "softmax" });
        }
        let x = &self.nodes[ai].value;
        let mut out = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let max = (0..n).map(|j| x[at(j)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for j in 0..n {
                    let e = (x[at(j)] - max).exp();
                    out[at(j)] = e;
                    total = total + e;
                }
                for j in 0..n {
                    out[at(j)] = out[at(j)] / total;
                }
            }
        }
        let rg = self.rg(&[ai]);
        Ok(self.push(shape, out, Op::Softmax { input: ai, axis }, rg))
    }

    /// Power normalization `sign(z)·|z|^0.5` followed by L2 normalization
    /// with the norm clamped below at `eps`. Each slice along `axis` is
    /// normalized independently; for a vector, `axis = 0` normalizes the
    /// whole vector.
    pub fn normalize_power_l2(&mut self, a: NodeId, axis: usize, eps: T) -> Result<NodeId> {
        let ai = self.idx(a)?;
        let shape = self.nodes[ai].shape.clone();
        if axis >= shape.len() {
            return Err(Error::AxisOutOfRange {
                op: "normalize_power_l2",
                axis,
                shape,
            });
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let x = &self.nodes[ai].value;
        let mut out: Vec<T> = x.iter().map(|&z| signed_sqrt(z)).collect();
        let mut norms = Vec::with_capacity(outer * inner);
        let mut clamped = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let norm = (0..n).map(|j| out[at(j)] * out[at(j)]).sum::<T>().sqrt();
                let denom = norm.max(eps);
                for j in 0..n {
                    out[at(j)] = out[at(j)] / denom;
                }
                norms.push(denom);
                clamped.push(norm <= eps);
            }
        }
        let rg = self.rg(&[ai]);
        let op = Op::PowerL2 {
            input: ai,
            axis,
            norms,
            clamped,
        };
        Ok(self.push(shape, out, op, rg))
    }

    // ── Reductions and reshaping ──────────────────────────────────────

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let ai = self.idx(a)?;
        let total = self.nodes[ai].value.iter().copied().sum();
        let rg = self.rg(&[ai]);
        Ok(self.push(vec![1], vec![total], Op::Sum(ai), rg))
    }

    /// `sum(a ∘ b)`
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let m = self.mul(a, b)?;
        self.sum(m)
    }

    /// Concatenates vectors end to end.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let idx = parts
            .iter()
            .map(|&p| self.idx(p))
            .collect::<Result<Vec<_>>>()?;
        if idx.is_empty() {
            return Err(Error::EmptyAxis { op: "concat" });
        }
        let mut out = Vec::new();
        for &i in &idx {
            if self.nodes[i].shape.len() != 1 {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    left: self.nodes[i].shape.clone(),
                    right: vec![],
                });
            }
            out.extend_from_slice(&self.nodes[i].value);
        }
        let rg = self.rg(&idx);
        Ok(self.push(vec![out.len()], out, Op::Concat(idx), rg))
    }

    /// Stacks `n` vectors of length `d` as the columns of a `[d×n]` matrix.
    pub fn stack_columns(&mut self, cols: &[NodeId]) -> Result<NodeId> {
        let idx = cols
            .iter()
            .map(|&p| self.idx(p))
            .collect::<Result<Vec<_>>>()?;
        let first = idx.first().ok_or(Error::EmptyAxis {
            op: "stack_columns",
        })?;
        let d = self.nodes[*first].value.len();
        for &i in &idx {
            if self.nodes[i].shape != [d] {
                return Err(Error::ShapeMismatch {
                    op: "stack_columns",
                    left: self.nodes[*first].shape.clone(),
                    right: self.nodes[i].shape.clone(),
                });
            }
        }
        let n = idx.len();
        let mut out = vec![T::zero(); d * n];
        for (j, &c) in idx.iter().enumerate() {
            for (r, &v) in self.nodes[c].value.iter().enumerate() {
                out[r * n + j] = v;
            }
        }
        let rg = self.rg(&idx);
        Ok(self.push(vec![d, n], out, Op::StackColumns(idx), rg))
    }

    /// Contiguous range `[start, start+len)` of the flattened values, as a vector.
    pub fn slice(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let ai = self.idx(a)?;
        let total = self.nodes[ai].value.len();
        if len == 0 || start + len > total {
            return Err(Error::IndexOutOfRange {
                index: start + len,
                len: total,
            });
        }
        let out = self.nodes[ai].value[start..start + len].to_vec();
        let rg = self.rg(&[ai]);
        Ok(self.push(vec![len], out, Op::Slice { input: ai, start }, rg))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let ai = self.idx(a)?;
        let len = self.nodes[ai].value.len();
        if shape.contains(&0) || shape.iter().product::<usize>() != len {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                len,
            });
        }
        let out = self.nodes[ai].value.to_vec();
        let rg = self.rg(&[ai]);
        Ok(self.push(shape.to_vec(), out, Op::Reshape(ai), rg))
    }

    /// Rows `indices` of a `[v×e]` table, stacked into `[len×e]`.
    pub fn gather_rows(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId> {
        let ti = self.idx(table)?;
        let shape = &self.nodes[ti].shape;
        if shape.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "gather_rows",
                left: shape.clone(),
                right: vec![indices.len()],
            });
        }
        if indices.is_empty() {
            return Err(Error::EmptySequence);
        }
        let (rows, cols) = (shape[0], shape[1]);
        let mut out = Vec::with_capacity(indices.len() * cols);
        for &r in indices {
            if r >= rows {
                return Err(Error::IndexOutOfRange {
                    index: r,
                    len: rows,
                });
            }
            out.extend_from_slice(&self.nodes[ti].value[r * cols..(r + 1) * cols]);
        }
        let rg = self.rg(&[ti]);
        let op = Op::GatherRows {
            table: ti,
            indices: indices.to_vec(),
        };
        Ok(self.push(vec![indices.len(), cols], out, op, rg))
    }

    /// Sums `blocks` equal row blocks: `[blocks·r, ...] → [r, ...]`.
    pub fn sum_blocks(&mut self, a: NodeId, blocks: usize) -> Result<NodeId> {
        let ai = self.idx(a)?;
        let shape = self.nodes[ai].shape.clone();
        if blocks == 0 || !shape[0].is_multiple_of(blocks) {
            return Err(Error::InvalidShape {
                shape,
                len: blocks,
            });
        }
        let mut out_shape = shape.clone();
        out_shape[0] /= blocks;
        let block_len: usize = out_shape.iter().product();
        let x = &self.nodes[ai].value;
        let mut out = vec![T::zero(); block_len];
        for b in 0..blocks {
            for (o, &v) in out.iter_mut().zip(&x[b * block_len..(b + 1) * block_len]) {
                *o = *o + v;
            }
        }
        let rg = self.rg(&[ai]);
        Ok(self.push(out_shape, out, Op::SumBlocks { input: ai, blocks }, rg))
    }

    // ── Losses ────────────────────────────────────────────────────────

    /// `log Σᵢ exp((sᵢ − s_gt)/τ)` over a score vector.
    pub fn npair_temperature_loss(&mut self, scores: NodeId, gt: usize, tau: T) -> Result<NodeId> {
        let si = self.idx(scores)?;
        if tau.partial_cmp(&T::zero()) != Some(std::cmp::Ordering::Greater) {
            return Err(Error::InvalidTemperature(tau.as_f64()));
        }
        let s = &self.nodes[si].value;
        if s.len() < 2 {
            return Err(Error::TooFewCandidates {
                min: 2,
                got: s.len(),
            });
        }
        if gt >= s.len() {
            return Err(Error::IndexOutOfRange {
                index: gt,
                len: s.len(),
            });
        }
        let margins: Vec<T> = s.iter().map(|&x| (x - s[gt]) / tau).collect();
        let loss = log_sum_exp(&margins);
        let rg = self.rg(&[si]);
        let op = Op::NPair {
            scores: si,
            gt,
            tau,
        };
        Ok(self.push(vec![1], vec![loss], op, rg))
    }

    /// `−Σⱼ yⱼ log softmax(s)ⱼ` with labels summing to one.
    pub fn softmax_cross_entropy(&mut self, scores: NodeId, labels: &[T]) -> Result<NodeId> {
        let si = self.idx(scores)?;
        let s = &self.nodes[si].value;
        if s.len() != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "softmax_cross_entropy",
                left: self.nodes[si].shape.clone(),
                right: vec![labels.len()],
            });
        }
        let total: T = labels.iter().copied().sum();
        if labels.iter().any(|&y| y < T::zero()) || (total - T::one()).abs() > T::of(1e-6) {
            return Err(Error::InvalidLabels(total.as_f64()));
        }
        let lse = log_sum_exp(s);
        let loss = labels
            .iter()
            .zip(s.iter())
            .filter(|(&y, _)| y != T::zero())
            .map(|(&y, &x)| -y * (x - lse))
            .sum();
        let rg = self.rg(&[si]);
        let op = Op::CrossEntropy {
            scores: si,
            labels: labels.to_vec(),
        };
        Ok(self.push(vec![1], vec![loss], op, rg))
    }

    // ── Backward ──────────────────────────────────────────────────────

    /// Reverse pass from a scalar output. Every node is visited once, in
    /// reverse creation order; gradients from multiple consumers add up.
    pub fn backward(&self, output: NodeId) -> Result<Gradients<T>> {
        let out = self.idx(output)?;
        if self.nodes[out].value.len() != 1 {
            return Err(Error::NonScalarOutput(self.nodes[out].shape.clone()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if self.nodes[out].requires_grad {
            grads[out] = Some(vec![T::one()]);
        }
        let mut params = Vec::new();
        for i in (0..=out).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate(node, &g, &mut grads);
            if let Op::Param(pid) = node.op {
                params.push((pid, g.clone()));
            }
            grads[i] = Some(g);
        }
        params.sort_by_key(|(p, _)| *p);
        Ok(Gradients {
            graph: self.id,
            shapes: self.nodes.iter().map(|n| n.shape.clone()).collect(),
            nodes: grads,
            params,
        })
    }

    fn propagate(&self, node: &Node<'p, T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let val = |i: usize| -> &[T] { &nodes[i].value };
        let mut acc = |i: usize, f: &mut dyn FnMut(&mut [T])| {
            if !nodes[i].requires_grad {
                return;
            }
            let buf = grads[i].get_or_insert_with(|| vec![T::zero(); nodes[i].value.len()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[*a].shape[0], nodes[*a].shape[1]);
                let n = nodes[*b].shape[1];
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = T::zero();
                            for j in 0..n {
                                s = s + g[i * n + j] * bv[p * n + j];
                            }
                            ga[i * k + p] = ga[i * k + p] + s;
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..m {
                        for p in 0..k {
                            let aip = av[i * k + p];
                            for j in 0..n {
                                gb[p * n + j] = gb[p * n + j] + aip * g[i * n + j];
                            }
                        }
                    }
                });
            }
            Op::MatVec(a, x) => {
                let (m, k) = (nodes[*a].shape[0], nodes[*a].shape[1]);
                let (av, xv) = (val(*a), val(*x));
                acc(*a, &mut |ga| {
                    for i in 0..m {
                        for p in 0..k {
                            ga[i * k + p] = ga[i * k + p] + g[i] * xv[p];
                        }
                    }
                });
                acc(*x, &mut |gx| {
                    for i in 0..m {
                        for p in 0..k {
                            gx[p] = gx[p] + av[i * k + p] * g[i];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(o, &d)| *o = *o - d));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    for (i, o) in ga.iter_mut().enumerate() {
                        *o = *o + g[i] * bv[i];
                    }
                });
                acc(*b, &mut |gb| {
                    for (i, o) in gb.iter_mut().enumerate() {
                        *o = *o + g[i] * av[i];
                    }
                });
            }
            Op::AddColumn { mat, vec } => {
                let rows = nodes[*vec].value.len();
                let cols = nodes[*mat].value.len() / rows;
                acc(*mat, &mut |gm| add_into(gm, g));
                acc(*vec, &mut |gv| {
                    for i in 0..rows {
                        for j in 0..cols {
                            gv[i] = gv[i] + g[i * cols + j];
                        }
                    }
                });
            }
            Op::MulColumn { mat, vec } => {
                let rows = nodes[*vec].value.len();
                let cols = nodes[*mat].value.len() / rows;
                let (mv, vv) = (val(*mat), val(*vec));
                acc(*mat, &mut |gm| {
                    for i in 0..rows {
                        for j in 0..cols {
                            gm[i * cols + j] = gm[i * cols + j] + g[i * cols + j] * vv[i];
                        }
                    }
                });
                acc(*vec, &mut |gv| {
                    for i in 0..rows {
                        for j in 0..cols {
                            gv[i] = gv[i] + g[i * cols + j] * mv[i * cols + j];
                        }
                    }
                });
            }
            Op::Scale(a, s) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(o, &d)| *o = *o + d * *s));
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] = ga[i] + g[i] * y[i] * (T::one() - y[i]);
                    }
                });
            }
            Op::Tanh(a) => {
                let y = &node.value;
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] = ga[i] + g[i] * (T::one() - y[i] * y[i]);
                    }
                });
            }
            Op::Softmax { input, axis } => {
                let y = &node.value;
                let (outer, n, inner) = split_axis(&node.shape, *axis);
                acc(*input, &mut |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * n * inner + j * inner + i;
                            let dot: T = (0..n).map(|j| y[at(j)] * g[at(j)]).sum();
                            for j in 0..n {
                                gx[at(j)] = gx[at(j)] + y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::PowerL2 {
                input,
                axis,
                norms,
                clamped,
            } => {
                let y = &node.value;
                let x = val(*input);
                let (outer, n, inner) = split_axis(&node.shape, *axis);
                let half = T::of(0.5);
                acc(*input, &mut |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let group = o * inner + i;
                            let at = |j: usize| o * n * inner + j * inner + i;
                            let dot: T = if clamped[group] {
                                T::zero()
                            } else {
                                (0..n).map(|j| y[at(j)] * g[at(j)]).sum()
                            };
                            for j in 0..n {
                                let k = at(j);
                                let gp = (g[k] - y[k] * dot) / norms[group];
                                let z = x[k];
                                if z != T::zero() {
                                    gx[k] = gx[k] + gp * half / z.abs().sqrt();
                                }
                            }
                        }
                    }
                });
            }
            Op::Sum(a) => {
                acc(*a, &mut |ga| ga.iter_mut().for_each(|o| *o = *o + g[0]));
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p].value.len();
                    acc(p, &mut |gp| add_into(gp, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::StackColumns(cols) => {
                let n = cols.len();
                for (j, &c) in cols.iter().enumerate() {
                    acc(c, &mut |gc| {
                        for (r, o) in gc.iter_mut().enumerate() {
                            *o = *o + g[r * n + j];
                        }
                    });
                }
            }
            Op::Slice { input, start } => {
                acc(*input, &mut |gx| add_into(&mut gx[*start..*start + g.len()], g));
            }
            Op::Reshape(a) => acc(*a, &mut |ga| add_into(ga, g)),
            Op::GatherRows { table, indices } => {
                let cols = nodes[*table].shape[1];
                acc(*table, &mut |gt| {
                    for (t, &r) in indices.iter().enumerate() {
                        add_into(&mut gt[r * cols..(r + 1) * cols], &g[t * cols..(t + 1) * cols]);
                    }
                });
            }
            Op::SumBlocks { input, blocks } => {
                let len = g.len();
                acc(*input, &mut |gx| {
                    for b in 0..*blocks {
                        add_into(&mut gx[b * len..(b + 1) * len], g);
                    }
                });
            }
            Op::NPair { scores, gt, tau } => {
                let s = val(*scores);
                let margins: Vec<T> = s.iter().map(|&x| (x - s[*gt]) / *tau).collect();
                let p = softmax_vec(&margins);
                acc(*scores, &mut |gs| {
                    for (i, o) in gs.iter_mut().enumerate() {
                        let mut d = p[i] / *tau;
                        if i == *gt {
                            d = d - T::one() / *tau;
                        }
                        *o = *o + g[0] * d;
                    }
                });
            }
            Op::CrossEntropy { scores, labels } => {
                let p = softmax_vec(val(*scores));
                let total: T = labels.iter().copied().sum();
                acc(*scores, &mut |gs| {
                    for (i, o) in gs.iter_mut().enumerate() {
                        *o = *o + g[0] * (p[i] * total - labels[i]);
                    }
                });
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(o, &d)| *o = *o + d);
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn signed_sqrt<T: Scalar>(z: T) -> T {
    if z == T::zero() {
        T::zero()
    } else {
        z.signum() * z.abs().sqrt()
    }
}

pub(crate) fn log_sum_exp<T: Scalar>(x: &[T]) -> T {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    max + x.iter().map(|&v| (v - max).exp()).sum::<T>().ln()
}

pub(crate) fn softmax_vec<T: Scalar>(x: &[T]) -> Vec<T> {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = x.iter().map(|&v| (v - max).exp()).collect();
    let total: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / total).collect()
}
