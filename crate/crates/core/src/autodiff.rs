//! Reverse-mode automatic differentiation over dense f32 buffers.
//!
//! A `Graph` owns a flat arena of nodes; `Tensor` is a cheap handle into it.
//! Forward values are computed eagerly as ops are applied; `backward` walks
//! the arena in reverse creation order, so gradient accumulation happens in
//! a fixed order and repeated runs are bit-identical. One graph instance is
//! single-threaded; independent graphs may run in parallel.
//!
//! Reductions (matmul inner products excepted) accumulate in f64 to keep
//! finite-difference gradient checks within tolerance.

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

pub type TensorId = usize;

/// Backward rule of a single node. `values` exposes every node's forward
/// buffer; `grads` is the arena of gradient buffers being accumulated.
pub trait Op {
    fn name(&self) -> &'static str;
    fn parents(&self) -> Vec<TensorId>;
    fn backward(&self, upstream: &[f32], values: &Values, grads: &mut Grads);
}

struct NodeData {
    shape: Vec<usize>,
    value: Vec<f32>,
    requires_grad: bool,
    op: Option<Box<dyn Op>>,
}

pub struct Values<'a> {
    nodes: &'a [NodeData],
}

impl<'a> Values<'a> {
    pub fn value(&self, id: TensorId) -> &[f32] {
        &self.nodes[id].value
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id].shape
    }
}

pub struct Grads {
    bufs: Vec<Option<Vec<f32>>>,
    requires: Vec<bool>,
    sizes: Vec<usize>,
}

impl Grads {
    /// Gradient buffer of `id`, zero-allocated on first touch. No-op sink
    /// for nodes that do not require gradients.
    pub fn buf_mut(&mut self, id: TensorId) -> Option<&mut [f32]> {
        if !self.requires[id] {
            return None;
        }
        let size = self.sizes[id];
        Some(
            self.bufs[id]
                .get_or_insert_with(|| vec![0.0; size])
                .as_mut_slice(),
        )
    }

    pub fn accumulate(&mut self, id: TensorId, delta: impl IntoIterator<Item = (usize, f32)>) {
        if let Some(buf) = self.buf_mut(id) {
            for (i, v) in delta {
                buf[i] += v;
            }
        }
    }
}

#[derive(Default)]
struct GraphInner {
    nodes: Vec<NodeData>,
}

/// Shared handle to the node arena.
#[derive(Clone, Default)]
pub struct Graph {
    inner: Rc<RefCell<GraphInner>>,
}

/// Handle to one node of a `Graph`.
#[derive(Clone)]
pub struct Tensor {
    graph: Graph,
    id: TensorId,
    shape: Vec<usize>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor(id={}, shape={:?})", self.id, self.shape)
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Graph {
    pub fn new() -> Graph {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(
        &self,
        shape: Vec<usize>,
        value: Vec<f32>,
        requires_grad: bool,
        op: Option<Box<dyn Op>>,
    ) -> Tensor {
        assert_eq!(value.len(), numel(&shape), "value/shape mismatch");
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(NodeData {
            shape: shape.clone(),
            value,
            requires_grad,
            op,
        });
        Tensor {
            graph: self.clone(),
            id,
            shape,
        }
    }

    /// Trainable input node.
    pub fn leaf(&self, shape: &[usize], value: Vec<f32>) -> Tensor {
        self.push(shape.to_vec(), value, true, None)
    }

    /// Non-trainable input node.
    pub fn constant(&self, shape: &[usize], value: Vec<f32>) -> Tensor {
        self.push(shape.to_vec(), value, false, None)
    }

    pub fn scalar_constant(&self, v: f32) -> Tensor {
        self.constant(&[1], vec![v])
    }

    /// Registers a custom op node. `value` must already be the forward
    /// result of `op` on its parents.
    pub fn custom(&self, shape: Vec<usize>, value: Vec<f32>, op: Box<dyn Op>) -> Tensor {
        let requires = {
            let inner = self.inner.borrow();
            op.parents().iter().any(|&p| inner.nodes[p].requires_grad)
        };
        self.push(shape, value, requires, Some(op))
    }

    pub fn value(&self, t: &Tensor) -> Vec<f32> {
        self.inner.borrow().nodes[t.id].value.clone()
    }

    /// Runs reverse-mode accumulation from a scalar node. Returns the
    /// gradient arena; leaf gradients are read with `Backprop::grad`.
    pub fn backward(&self, loss: &Tensor) -> Backprop {
        assert_eq!(
            numel(&loss.shape),
            1,
            "backward requires a scalar loss, got shape {:?}",
            loss.shape
        );
        let inner = self.inner.borrow();
        let n = inner.nodes.len();
        let mut grads = Grads {
            bufs: vec![None; n],
            requires: inner.nodes.iter().map(|nd| nd.requires_grad).collect(),
            sizes: inner.nodes.iter().map(|nd| nd.value.len()).collect(),
        };
        if !inner.nodes[loss.id].requires_grad {
            return Backprop { grads };
        }
        grads.bufs[loss.id] = Some(vec![1.0]);
        let values = Values {
            nodes: &inner.nodes,
        };
        for id in (0..=loss.id).rev() {
            let node = &inner.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(op) = node.op.as_ref() else {
                continue; // leaf: gradient stays in the arena
            };
            // Take the upstream buffer; interior gradients are not needed
            // once their node has propagated.
            let Some(upstream) = grads.bufs[id].take() else {
                continue;
            };
            op.backward(&upstream, &values, &mut grads);
        }
        Backprop { grads }
    }
}

/// Result of a backward pass.
pub struct Backprop {
    grads: Grads,
}

impl Backprop {
    /// Gradient of the loss with respect to `t`; None when no gradient
    /// reached it (or it does not require one).
    pub fn grad(&self, t: &Tensor) -> Option<&[f32]> {
        self.grads.bufs[t.id].as_deref()
    }

    pub fn grad_or_zero(&self, t: &Tensor) -> Vec<f32> {
        self.grad(t)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; numel(&t.shape)])
    }
}

// ---------------------------------------------------------------------------
// Elementwise and structural ops
// ---------------------------------------------------------------------------

macro_rules! same_shape {
    ($op:expr, $a:expr, $b:expr) => {
        assert_eq!(
            $a.shape, $b.shape,
            "{}: shape mismatch {:?} vs {:?}",
            $op, $a.shape, $b.shape
        );
    };
}

struct AddOp(TensorId, TensorId);
impl Op for AddOp {
    fn name(&self) -> &'static str {
        "add"
    }
    fn parents(&self) -> Vec<TensorId> {
        vec![self.0, self.1]
    }
    fn backward(&self, upstream: &[f32], _values: &Values, grads: &mut Grads) {
        for &p in &[self.0, self.1] {
            if let Some(buf) = grads.buf_mut(p) {
                for (b, u) in buf.iter_mut().zip(upstream) {
                    *b += u;
                }
            }
        }
    }
}

struct SubOp(TensorId, TensorId);
impl Op for SubOp {
    fn name(&self) -> &'static str {
        "sub"
    }
    fn parents(&self) -> Vec<TensorId> {
        vec![self.0, self.1]
    }
    fn backward(&self, upstream: &[f32], _values: &Values, grads: &mut Grads) {
        if let Some(buf) = grads.buf_mut(self.0) {
            for (b, u) in buf.iter_mut().zip(upstream) {
                *b += u;
            }
        }
        if let Some(buf) = grads.buf_mut(self.1) {
            for (b, u) in buf.iter_mut().zip(upstream) {
                *b -= u;
            }
        }
    }
}

struct MulOp(TensorId, TensorId);
impl Op for MulOp {
    fn name(&self) -> &'static str {
        "mul"
    }
    fn parents(&self) -> Vec<TensorId> {
        vec![self.0, self.1]
    }
    fn backward(&self, upstream: &[f32], values: &Values, grads: &mut Grads) {
        let b_val = values.value(self.1).to_vec();
        if let Some(buf) = grads.buf_mut(self.0) {
            for i in 0..buf.len() {
                buf[i] += upstream[i] * b_val[i];
            }
        }
        let a_val = values.value(self.0).to_vec();
        if let Some(buf) = grads.buf_mut(self.1) {
            for i in 0..buf.len() {
                buf[i] += upstream[i] * a_val[i];
            }
        }
    }
}

struct ScaleOp(TensorId, f32);
impl Op for ScaleOp {
    fn name(&self) -> &'static str {
        "scale"
    }
    fn parents(&self) -> Vec<TensorId> {
        vec![self.0]
    }
    fn backward(&self, upstream: &[f32], _values: &Values, grads: &mut Grads) {
        let c = self.1;
        if let Some(buf) = grads.buf_mut(self.0) {
            for (b, u) in buf.iter_mut().zip(upstream) {
                *b += u * c;
            }
        }
    }
}

/// Unary elementwise op; the local derivative sees both input and output
/// so cheap forms like sigmoid'(x) = y(1-y) avoid recomputing.
struct UnaryOp {
    parent: TensorId,
    out_value: Vec<f32>,
    name: &'static str,
    dydx: fn(x: f32, y: f32) -> f32,
}
impl Op for UnaryOp {
    fn name(&self) -> &'static str {
        self.name
    }
    fn parents(&self) -> Vec<TensorId> {
        vec![self.parent]
    }
    fn backward(&self, upstream: &[f32], values: &Values, grads: &mut Grads) {
        let x = values.value(self.parent).to_vec();
        if let Some(buf) = grads.buf_mut(self.parent) {
            for i in 0..buf.len() {
                buf[i] += upstream[i] * (self.dydx)(x[i], self.out_value[i]);
            }
        }
    }
}

struct MatMulOp {
    a: TensorId,
    b: TensorId,
    m: usize,
    k: usize,
    n: usize,
}
impl Op for MatMulOp {
    fn name(&self) -> &'static str {
        "matmul"
    }
    fn parents(&self) -> Vec<TensorId> {
        vec![self.a, self.b]
    }
    fn backward(&self, upstream: &[f32], values: &Values, grads: &mut Grads) {
        let (m, k, n) = (self.m, self.k, self.n);
        // dA = dC . B^T
        let b_val = values.value(self.b).to_vec();
        if let Some(da) = grads.buf_mut(self.a) {
            for i in 0..m {
                for j in 0..n {
                    let u = upstream[i * n + j];
                    if u == 0.0 {
                        continue;
                    }
                    let row = &b_val[..];
                    for l in 0..k {
                        da[i * k + l] += u * row[l * n + j];
                    }
                }
            }
        }
        // dB = A^T . dC
        let a_val = values.value(self.a).to_vec();
        if let Some(db) = grads.buf_mut(self.b) {
            for i in 0..m {
                for l in 0..k {
                    let a_il = a_val[i * k + l];
                    if a_il == 0.0 {
                        continue;
                    }
                    for j in 0..n {
                        db[l * n + j] += a_il * upstream[i * n + j];
                    }
                }
            }
        }
    }
}

/// [n,d] + [d] row-broadcast bias.
struct AddRowOp {
    a: TensorId,
    bias: TensorId,
    n: usize,
    d: usize,
}
impl Op for AddRowOp {
    fn name(&self) -> &'static str {
        "add_row"
    }
    fn parents(&self) -> Vec<TensorId> {
        vec![self.a, self.bias]
    }
    fn backward(&self, upstream: &[f32], _values: &Values, grads: &mut Grads) {
        if let Some(buf) = grads.buf_mut(self.a) {
            for (b, u) in buf.iter_mut().zip(upstream) {
                *b += u;
            }
        }
        if let Some(buf) = grads.buf_mut(self.bias) {
            for i in 0..self.n {
                for j in 0..self.d {
                    buf[j] += upstream[i * self.d + j];
                }
            }
        }
    }
}

struct SoftmaxRowsOp {
    a: TensorId,
    out: Vec<f32>,
    rows: usize,
    cols: usize,
}
impl Op for SoftmaxRowsOp {
    fn name(&self) -> &'static str {
        "softmax_rows"
    }
    fn parents(&self) -> Vec<TensorId> {
        vec![self.a]
    }
    fn backward(&self, upstream: &[f32], _values: &Values, grads: &mut Grads) {
        let (rows, cols) = (self.rows, self.cols);
        if let Some(buf) = grads.buf_mut(self.a) {
            for r in 0..rows {
                let y = &self.out[r * cols..(r + 1) * cols];
                let u = &upstream[r * cols..(r + 1) * cols];
                let mut dot = 0.0f64;
                for j in 0..cols {
                    dot += (u[j] * y[j]) as f64;
                }
                for j in 0..cols {
                    buf[r * cols + j] += y[j] * (u[j] - dot as f32);
                }
            }
        }
    }
}

struct ConcatColsOp {
    parts: Vec<TensorId>,
    widths: Vec<usize>,
    rows: usize,
}
impl Op for ConcatColsOp {
    fn name(&self) -> &'static str {
        "concat_cols"
    }
    fn parents(&self) -> Vec<TensorId> {
        self.parts.clone()
    }
    fn backward(&self, upstream: &[f32], _values: &Values, grads: &mut Grads) {
        let total: usize = self.widths.iter().sum();
        let mut offset = 0;
        for (p, &w) in self.parts.iter().zip(&self.widths) {
            if let Some(buf) = grads.buf_mut(*p) {
                for r in 0..self.rows {
                    for c in 0..w {
                        buf[r * w + c] += upstream[r * total + offset + c];
                    }
                }
            }
            offset += w;
        }
    }
}

struct SliceColsOp {
    a: TensorId,
    rows: usize,
    cols: usize,
    c0: usize,
    c1: usize,
}
impl Op for SliceColsOp {
    fn name(&self) -> &'static str {
        "slice_cols"
    }
    fn parents(&self) -> Vec<TensorId> {
        vec![self.a]
    }
    fn backward(&self, upstream: &[f32], _values: &Values, grads: &mut Grads) {
        let w = self.c1 - self.c0;
        if let Some(buf) = grads.buf_mut(self.a) {
            for r in 0..self.rows {
                for c in 0..w {
                    buf[r * self.cols + self.c0 + c] += upstream[r * w + c];
                }
            }
        }
    }
}

struct SumAllOp {
    a: TensorId,
    mean: bool,
    count: usize,
}
impl Op for SumAllOp {
    fn name(&self) -> &'static str {
        "sum_all"
    }
    fn parents(&self) -> Vec<TensorId> {
        vec![self.a]
    }
    fn backward(&self, upstream: &[f32], _values: &Values, grads: &mut Grads) {
        let g = if self.mean {
            upstream[0] / self.count as f32
        } else {
            upstream[0]
        };
        if let Some(buf) = grads.buf_mut(self.a) {
            for b in buf.iter_mut() {
                *b += g;
            }
        }
    }
}

struct MeanAxis0Op {
    a: TensorId,
    rows: usize,
    cols: usize,
}
impl Op for MeanAxis0Op {
    fn name(&self) -> &'static str {
        "mean_axis0"
    }
    fn parents(&self) -> Vec<TensorId> {
        vec![self.a]
    }
    fn backward(&self, upstream: &[f32], _values: &Values, grads: &mut Grads) {
        let inv = 1.0 / self.rows as f32;
        if let Some(buf) = grads.buf_mut(self.a) {
            for r in 0..self.rows {
                for c in 0..self.cols {
                    buf[r * self.cols + c] += upstream[c] * inv;
                }
            }
        }
    }
}

struct GatherRowsOp {
    a: TensorId,
    idx: Vec<usize>,
    cols: usize,
}
impl Op for GatherRowsOp {
    fn name(&self) -> &'static str {
        "gather_rows"
    }
    fn parents(&self) -> Vec<TensorId> {
        vec![self.a]
    }
    fn backward(&self, upstream: &[f32], _values: &Values, grads: &mut Grads) {
        if let Some(buf) = grads.buf_mut(self.a) {
            for (out_r, &src_r) in self.idx.iter().enumerate() {
                for c in 0..self.cols {
                    buf[src_r * self.cols + c] += upstream[out_r * self.cols + c];
                }
            }
        }
    }
}

struct ScatterAddRowsOp {
    a: TensorId,
    idx: Vec<usize>,
    cols: usize,
}
impl Op for ScatterAddRowsOp {
    fn name(&self) -> &'static str {
        "scatter_add_rows"
    }
    fn parents(&self) -> Vec<TensorId> {
        vec![self.a]
    }
    fn backward(&self, upstream: &[f32], _values: &Values, grads: &mut Grads) {
        if let Some(buf) = grads.buf_mut(self.a) {
            for (src_r, &dst_r) in self.idx.iter().enumerate() {
                for c in 0..self.cols {
                    buf[src_r * self.cols + c] += upstream[dst_r * self.cols + c];
                }
            }
        }
    }
}

struct BroadcastRowOp {
    a: TensorId,
    n: usize,
    d: usize,
}
impl Op for BroadcastRowOp {
    fn name(&self) -> &'static str {
        "broadcast_row"
    }
    fn parents(&self) -> Vec<TensorId> {
        vec![self.a]
    }
    fn backward(&self, upstream: &[f32], _values: &Values, grads: &mut Grads) {
        if let Some(buf) = grads.buf_mut(self.a) {
            for r in 0..self.n {
                for c in 0..self.d {
                    buf[c] += upstream[r * self.d + c];
                }
            }
        }
    }
}

struct ReshapeOp {
    a: TensorId,
}
impl Op for ReshapeOp {
    fn name(&self) -> &'static str {
        "reshape"
    }
    fn parents(&self) -> Vec<TensorId> {
        vec![self.a]
    }
    fn backward(&self, upstream: &[f32], _values: &Values, grads: &mut Grads) {
        if let Some(buf) = grads.buf_mut(self.a) {
            for (b, u) in buf.iter_mut().zip(upstream) {
                *b += u;
            }
        }
    }
}

struct WeightedSumOp {
    parts: Vec<(TensorId, f32)>,
}
impl Op for WeightedSumOp {
    fn name(&self) -> &'static str {
        "weighted_sum"
    }
    fn parents(&self) -> Vec<TensorId> {
        self.parts.iter().map(|(id, _)| *id).collect()
    }
    fn backward(&self, upstream: &[f32], _values: &Values, grads: &mut Grads) {
        for &(id, w) in &self.parts {
            if let Some(buf) = grads.buf_mut(id) {
                buf[0] += upstream[0] * w;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Tensor API
// ---------------------------------------------------------------------------

impl Tensor {
    pub fn id(&self) -> TensorId {
        self.id
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        numel(&self.shape)
    }

    pub fn value(&self) -> Vec<f32> {
        self.graph.value(self)
    }

    pub fn scalar(&self) -> f32 {
        assert_eq!(self.numel(), 1, "scalar() on shape {:?}", self.shape);
        self.value()[0]
    }

    fn rows_cols(&self, op: &str) -> (usize, usize) {
        assert_eq!(
            self.shape.len(),
            2,
            "{op}: expected 2-d tensor, got shape {:?}",
            self.shape
        );
        (self.shape[0], self.shape[1])
    }

    fn same_graph(&self, other: &Tensor) {
        assert!(
            Rc::ptr_eq(&self.graph.inner, &other.graph.inner),
            "tensors belong to different graphs"
        );
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        self.same_graph(other);
        same_shape!("add", self, other);
        let (a, b) = (self.value(), other.value());
        let value = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        self.graph
            .custom(self.shape.clone(), value, Box::new(AddOp(self.id, other.id)))
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        self.same_graph(other);
        same_shape!("sub", self, other);
        let (a, b) = (self.value(), other.value());
        let value = a.iter().zip(&b).map(|(x, y)| x - y).collect();
        self.graph
            .custom(self.shape.clone(), value, Box::new(SubOp(self.id, other.id)))
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        self.same_graph(other);
        same_shape!("mul", self, other);
        let (a, b) = (self.value(), other.value());
        let value = a.iter().zip(&b).map(|(x, y)| x * y).collect();
        self.graph
            .custom(self.shape.clone(), value, Box::new(MulOp(self.id, other.id)))
    }

    pub fn scale(&self, c: f32) -> Tensor {
        let value = self.value().iter().map(|x| x * c).collect();
        self.graph
            .custom(self.shape.clone(), value, Box::new(ScaleOp(self.id, c)))
    }

    fn unary(&self, name: &'static str, f: fn(f32) -> f32, dydx: fn(f32, f32) -> f32) -> Tensor {
        let out: Vec<f32> = self.value().iter().map(|&x| f(x)).collect();
        self.graph.custom(
            self.shape.clone(),
            out.clone(),
            Box::new(UnaryOp {
                parent: self.id,
                out_value: out,
                name,
                dydx,
            }),
        )
    }

    pub fn relu(&self) -> Tensor {
        self.unary("relu", |x| x.max(0.0), |x, _y| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn softplus(&self) -> Tensor {
        self.unary(
            "softplus",
            |x| x.max(0.0) + (-x.abs()).exp().ln_1p(),
            |x, _y| 1.0 / (1.0 + (-x).exp()),
        )
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary(
            "sigmoid",
            |x| 1.0 / (1.0 + (-x).exp()),
            |_x, y| y * (1.0 - y),
        )
    }

    /// [m,k] x [k,n] -> [m,n].
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        self.same_graph(other);
        let (m, k) = self.rows_cols("matmul lhs");
        let (k2, n) = other.rows_cols("matmul rhs");
        assert_eq!(
            k, k2,
            "matmul: inner dims differ, lhs {:?} rhs {:?}",
            self.shape, other.shape
        );
        let a = self.value();
        let b = other.value();
        let mut c = vec![0.0f32; m * n];
        for i in 0..m {
            for l in 0..k {
                let a_il = a[i * k + l];
                if a_il == 0.0 {
                    continue;
                }
                let brow = &b[l * n..(l + 1) * n];
                let crow = &mut c[i * n..(i + 1) * n];
                for j in 0..n {
                    crow[j] += a_il * brow[j];
                }
            }
        }
        self.graph.custom(
            vec![m, n],
            c,
            Box::new(MatMulOp {
                a: self.id,
                b: other.id,
                m,
                k,
                n,
            }),
        )
    }

    /// [n,d] + [d] broadcast along rows.
    pub fn add_row(&self, bias: &Tensor) -> Tensor {
        self.same_graph(bias);
        let (n, d) = self.rows_cols("add_row");
        assert_eq!(
            bias.shape,
            vec![d],
            "add_row: bias shape {:?} incompatible with {:?}",
            bias.shape,
            self.shape
        );
        let a = self.value();
        let b = bias.value();
        let mut out = a.clone();
        for r in 0..n {
            for c in 0..d {
                out[r * d + c] += b[c];
            }
        }
        self.graph.custom(
            self.shape.clone(),
            out,
            Box::new(AddRowOp {
                a: self.id,
                bias: bias.id,
                n,
                d,
            }),
        )
    }

    /// Numerically stable row-wise softmax of a [n,c] tensor.
    pub fn softmax_rows(&self) -> Tensor {
        let (rows, cols) = self.rows_cols("softmax_rows");
        let a = self.value();
        let mut out = vec![0.0f32; rows * cols];
        for r in 0..rows {
            let row = &a[r * cols..(r + 1) * cols];
            let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut denom = 0.0f64;
            for &x in row {
                denom += ((x - mx) as f64).exp();
            }
            for j in 0..cols {
                out[r * cols + j] = (((row[j] - mx) as f64).exp() / denom) as f32;
            }
        }
        self.graph.custom(
            self.shape.clone(),
            out.clone(),
            Box::new(SoftmaxRowsOp {
                a: self.id,
                out,
                rows,
                cols,
            }),
        )
    }

    /// Concatenates 2-d tensors with equal row counts along columns.
    pub fn concat_cols(parts: &[&Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "concat_cols: no parts");
        let graph = parts[0].graph.clone();
        let rows = parts[0].rows_cols("concat_cols").0;
        let mut widths = Vec::new();
        for p in parts {
            parts[0].same_graph(p);
            let (r, c) = p.rows_cols("concat_cols");
            assert_eq!(r, rows, "concat_cols: row counts differ");
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0f32; rows * total];
        let mut offset = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            let v = p.value();
            for r in 0..rows {
                out[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&v[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        graph.custom(
            vec![rows, total],
            out,
            Box::new(ConcatColsOp {
                parts: parts.iter().map(|p| p.id).collect(),
                widths,
                rows,
            }),
        )
    }

    pub fn slice_cols(&self, c0: usize, c1: usize) -> Tensor {
        let (rows, cols) = self.rows_cols("slice_cols");
        assert!(c0 < c1 && c1 <= cols, "slice_cols: range {c0}..{c1} of {cols}");
        let v = self.value();
        let w = c1 - c0;
        let mut out = vec![0.0f32; rows * w];
        for r in 0..rows {
            out[r * w..(r + 1) * w].copy_from_slice(&v[r * cols + c0..r * cols + c1]);
        }
        self.graph.custom(
            vec![rows, w],
            out,
            Box::new(SliceColsOp {
                a: self.id,
                rows,
                cols,
                c0,
                c1,
            }),
        )
    }

    pub fn sum_all(&self) -> Tensor {
        let s: f64 = self.value().iter().map(|&x| x as f64).sum();
        self.graph.custom(
            vec![1],
            vec![s as f32],
            Box::new(SumAllOp {
                a: self.id,
                mean: false,
                count: self.numel(),
            }),
        )
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.numel();
        assert!(n > 0, "mean_all of empty tensor");
        let s: f64 = self.value().iter().map(|&x| x as f64).sum();
        self.graph.custom(
            vec![1],
            vec![(s / n as f64) as f32],
            Box::new(SumAllOp {
                a: self.id,
                mean: true,
                count: n,
            }),
        )
    }

    /// Column means of a [n,d] tensor -> [d].
    pub fn mean_axis0(&self) -> Tensor {
        let (rows, cols) = self.rows_cols("mean_axis0");
        assert!(rows > 0, "mean_axis0 of empty tensor");
        let v = self.value();
        let mut out = vec![0.0f64; cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c] += v[r * cols + c] as f64;
            }
        }
        let out: Vec<f32> = out.iter().map(|&x| (x / rows as f64) as f32).collect();
        self.graph.custom(
            vec![cols],
            out,
            Box::new(MeanAxis0Op {
                a: self.id,
                rows,
                cols,
            }),
        )
    }

    /// Picks rows of a [n,d] tensor -> [idx.len(), d]. Indices may repeat.
    pub fn gather_rows(&self, idx: &[usize]) -> Tensor {
        let (rows, cols) = self.rows_cols("gather_rows");
        assert!(
            idx.iter().all(|&i| i < rows),
            "gather_rows: index out of range (rows = {rows})"
        );
        let v = self.value();
        let mut out = vec![0.0f32; idx.len() * cols];
        for (r, &src) in idx.iter().enumerate() {
            out[r * cols..(r + 1) * cols].copy_from_slice(&v[src * cols..(src + 1) * cols]);
        }
        self.graph.custom(
            vec![idx.len(), cols],
            out,
            Box::new(GatherRowsOp {
                a: self.id,
                idx: idx.to_vec(),
                cols,
            }),
        )
    }

    /// Scatter-adds rows of a [m,d] tensor into `n_out` output rows; row r
    /// of self lands on output row idx[r]. Duplicate targets accumulate.
    pub fn scatter_add_rows(&self, idx: &[usize], n_out: usize) -> Tensor {
        let (rows, cols) = self.rows_cols("scatter_add_rows");
        assert_eq!(idx.len(), rows, "scatter_add_rows: one index per row");
        assert!(
            idx.iter().all(|&i| i < n_out),
            "scatter_add_rows: index out of range (n_out = {n_out})"
        );
        let v = self.value();
        let mut out = vec![0.0f32; n_out * cols];
        for (r, &dst) in idx.iter().enumerate() {
            for c in 0..cols {
                out[dst * cols + c] += v[r * cols + c];
            }
        }
        self.graph.custom(
            vec![n_out, cols],
            out,
            Box::new(ScatterAddRowsOp {
                a: self.id,
                idx: idx.to_vec(),
                cols,
            }),
        )
    }

    /// Repeats a [d] vector into [n,d].
    pub fn broadcast_row(&self, n: usize) -> Tensor {
        assert_eq!(self.shape.len(), 1, "broadcast_row expects a vector");
        let d = self.shape[0];
        let v = self.value();
        let mut out = vec![0.0f32; n * d];
        for r in 0..n {
            out[r * d..(r + 1) * d].copy_from_slice(&v);
        }
        self.graph.custom(
            vec![n, d],
            out,
            Box::new(BroadcastRowOp { a: self.id, n, d }),
        )
    }

    /// Same buffer under a new shape.
    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        assert_eq!(
            numel(shape),
            self.numel(),
            "reshape: {:?} incompatible with {:?}",
            shape,
            self.shape
        );
        self.graph
            .custom(shape.to_vec(), self.value(), Box::new(ReshapeOp { a: self.id }))
    }

    /// Weighted sum of scalar tensors: sum_i w_i * t_i.
    pub fn weighted_sum(parts: &[(&Tensor, f32)]) -> Tensor {
        assert!(!parts.is_empty(), "weighted_sum: no parts");
        let graph = parts[0].0.graph.clone();
        let mut acc = 0.0f64;
        for (t, w) in parts {
            parts[0].0.same_graph(t);
            assert_eq!(t.numel(), 1, "weighted_sum expects scalars");
            acc += *w as f64 * t.scalar() as f64;
        }
        graph.custom(
            vec![1],
            vec![acc as f32],
            Box::new(WeightedSumOp {
                parts: parts.iter().map(|(t, w)| (t.id, *w)).collect(),
            }),
        )
    }
}

#[cfg(test)]
pub mod check {
    //! Finite-difference gradient checking used across the crate's tests.

    /// Central-difference gradient of an f64 reference function.
    pub fn fd_grad_f64(f: &impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        let mut g = Vec::with_capacity(x.len());
        let mut xp = x.to_vec();
        for i in 0..x.len() {
            let orig = x[i];
            xp[i] = orig + h;
            let fp = f(&xp);
            xp[i] = orig - h;
            let fm = f(&xp);
            xp[i] = orig;
            g.push((fp - fm) / (2.0 * h));
        }
        g
    }

    /// Asserts |a - b| <= max(abs_floor, rel * max(|a|,|b|)) elementwise.
    pub fn assert_close(analytic: &[f32], fd: &[f64], rel: f64, abs_floor: f64, what: &str) {
        assert_eq!(analytic.len(), fd.len(), "{what}: length mismatch");
        for (i, (&a, &b)) in analytic.iter().zip(fd).enumerate() {
            let a = a as f64;
            let tol = abs_floor.max(rel * a.abs().max(b.abs()));
            assert!(
                (a - b).abs() <= tol,
                "{what}: grad[{i}] analytic {a} vs fd {b} (tol {tol})"
            );
        }
    }
}
