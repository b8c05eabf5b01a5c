//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation as it is evaluated. Nodes are appended
//! in evaluation order, so the node list is already a topological order and
//! [`Tape::backward`] walks it once in reverse, visiting each node exactly
//! once. Parameters are borrowed from a [`ParamStore`] rather than copied.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};

use crate::error::{Result, TensorError};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{gemm, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Stack vertically; all parts share the column count.
    Rows,
    /// Place side by side; all parts share the row count.
    Cols,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Concat(Vec<NodeId>, Axis),
    SumRows(NodeId),
    SumAll(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Softmax(NodeId, f64),
    LayerNorm(NodeId, Vec<f64>),
    Dropout(NodeId, Vec<f64>),
    Gather(NodeId, Vec<usize>),
    Transpose(NodeId),
    Bce { pred: NodeId, target: NodeId, eps: f64 },
    Margin { pred: NodeId, target: NodeId },
    Ddi { pred: NodeId, adjacency: NodeId },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param => "param",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Concat(..) => "concat",
            Op::SumRows(_) => "sum_rows",
            Op::SumAll(_) => "sum",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Relu(_) => "relu",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm(..) => "layer_norm",
            Op::Dropout(..) => "dropout",
            Op::Gather(..) => "gather_rows",
            Op::Transpose(_) => "transpose",
            Op::Bce { .. } => "bce_loss",
            Op::Margin { .. } => "margin_loss",
            Op::Ddi { .. } => "ddi_loss",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf | Op::Param => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Concat(parts, _) => parts.clone(),
            Op::Scale(a, _)
            | Op::SumRows(a)
            | Op::SumAll(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::Softmax(a, _)
            | Op::LayerNorm(a, _)
            | Op::Dropout(a, _)
            | Op::Gather(a, _)
            | Op::Transpose(a) => vec![*a],
            Op::Bce { pred, target, .. } | Op::Margin { pred, target } => vec![*pred, *target],
            Op::Ddi { pred, adjacency } => vec![*pred, *adjacency],
        }
    }
}

#[derive(Debug)]
struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation for later differentiation.
#[derive(Debug, Default)]
pub struct Tape<'p> {
    store: Option<&'p ParamStore>,
    nodes: Vec<Node<'p>>,
    params: HashMap<ParamId, NodeId>,
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self {
            store: None,
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    /// A tape whose [`Tape::param`] leaves borrow from `store`.
    pub fn with_params(store: &'p ParamStore) -> Self {
        Self {
            store: Some(store),
            ..Self::new()
        }
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

    pub fn shape(&self, id: NodeId) -> [usize; 2] {
        let t = self.value(id);
        [t.rows(), t.cols()]
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Constant input; no gradient is tracked.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op: Op::Leaf,
            requires_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Differentiable leaf owned by the tape.
    pub fn var(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op: Op::Leaf,
            requires_grad: true,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Result<NodeId> {
        if let Some(&n) = self.params.get(&id) {
            return Ok(n);
        }
        let store = self.store.ok_or(TensorError::NoParamStore)?;
        self.nodes.push(Node {
            value: Cow::Borrowed(store.get(id)),
            op: Op::Param,
            requires_grad: true,
        });
        let n = NodeId(self.nodes.len() - 1);
        self.params.insert(id, n);
        Ok(n)
    }

    fn mismatch(&self, op: &'static str, a: NodeId, b: NodeId) -> TensorError {
        TensorError::ShapeMismatch {
            op,
            lhs: self.value(a).shape().to_vec(),
            rhs: self.value(b).shape().to_vec(),
        }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let [m, k] = self.shape(a);
        let [k2, n] = self.shape(b);
        if k != k2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            0.0,
            &mut out,
        );
        self.push(Tensor::from_parts(m, n, out), Op::MatMul(a, b))
    }

    /// Checks `b` is either the same shape as `a` or a single row to
    /// broadcast over `a`'s rows.
    fn broadcast_ok(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let [ra, ca] = self.shape(a);
        let [rb, cb] = self.shape(b);
        if ca == cb && (ra == rb || rb == 1) {
            Ok(())
        } else {
            Err(self.mismatch(op, a, b))
        }
    }

    fn binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<NodeId> {
        self.broadcast_ok(op.name(), a, b)?;
        let av = self.value(a);
        let bv = self.value(b);
        let c = av.cols();
        let bd = bv.data();
        let broadcast = bv.rows() == 1;
        let out: Vec<f64> = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = if broadcast { bd[i % c] } else { bd[i] };
                f(x, y)
            })
            .collect();
        let t = Tensor::from_parts(av.rows(), c, out);
        self.push(t, op)
    }

    /// Elementwise sum; `b` may be a row broadcast over `a`.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise (Hadamard) product; `b` may be a broadcast row.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        let v = self.value(a);
        let out = v.data().iter().map(|x| x * factor).collect();
        let t = Tensor::from_parts(v.rows(), v.cols(), out);
        self.push(t, Op::Scale(a, factor))
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: Axis) -> Result<NodeId> {
        let first = *parts.first().ok_or(TensorError::InvalidArgument {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let [r0, c0] = self.shape(first);
        for &p in &parts[1..] {
            let [r, c] = self.shape(p);
            let ok = match axis {
                Axis::Rows => c == c0,
                Axis::Cols => r == r0,
            };
            if !ok {
                return Err(self.mismatch("concat", first, p));
            }
        }
        let t = match axis {
            Axis::Rows => {
                let mut data = Vec::new();
                let mut rows = 0;
                for &p in parts {
                    let v = self.value(p);
                    rows += v.rows();
                    data.extend_from_slice(v.data());
                }
                Tensor::from_parts(rows, c0, data)
            }
            Axis::Cols => {
                let cols: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
                let mut data = Vec::with_capacity(r0 * cols);
                for r in 0..r0 {
                    for &p in parts {
                        data.extend_from_slice(self.value(p).row_slice(r));
                    }
                }
                Tensor::from_parts(r0, cols, data)
            }
        };
        self.push(t, Op::Concat(parts.to_vec(), axis))
    }

    /// Column sums: `r × c → 1 × c`.
    pub fn sum_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        let c = v.cols();
        let mut out = vec![0.0; c];
        for r in 0..v.rows() {
            for (o, x) in out.iter_mut().zip(v.row_slice(r)) {
                *o += x;
            }
        }
        self.push(Tensor::from_parts(1, c, out), Op::SumRows(a))
    }

    /// Sum of every entry, as a `1 × 1` tensor.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    fn unary(&mut self, a: NodeId, op: Op, f: impl Fn(f64) -> f64) -> Result<NodeId> {
        let v = self.value(a);
        let out = v.data().iter().map(|&x| f(x)).collect();
        let t = Tensor::from_parts(v.rows(), v.cols(), out);
        self.push(t, op)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Sigmoid(a), logistic)
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    /// Row-wise `softmax(x / divisor)`.
    pub fn softmax(&mut self, a: NodeId, divisor: f64) -> Result<NodeId> {
        if !(divisor > 0.0) {
            return Err(TensorError::InvalidArgument {
                op: "softmax",
                msg: format!("divisor must be positive, got {divisor}"),
            });
        }
        let v = self.value(a);
        let c = v.cols();
        let mut out = Vec::with_capacity(v.len());
        for r in 0..v.rows() {
            let row = v.row_slice(r);
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x / divisor));
            let start = out.len();
            let mut total = 0.0;
            for &x in row {
                let e = (x / divisor - max).exp();
                total += e;
                out.push(e);
            }
            for o in &mut out[start..] {
                *o /= total;
            }
        }
        let t = Tensor::from_parts(v.rows(), c, out);
        self.push(t, Op::Softmax(a, divisor))
    }

    /// Row-wise normalisation to zero mean and unit variance, without affine
    /// parameters.
    pub fn layer_norm(&mut self, a: NodeId, eps: f64) -> Result<NodeId> {
        let v = self.value(a);
        let c = v.cols();
        let mut out = Vec::with_capacity(v.len());
        let mut inv_std = Vec::with_capacity(v.rows());
        for r in 0..v.rows() {
            let row = v.row_slice(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            out.extend(row.iter().map(|x| (x - mean) * inv));
        }
        let t = Tensor::from_parts(v.rows(), c, out);
        self.push(t, Op::LayerNorm(a, inv_std))
    }

    /// Inverted dropout. With `rng == None` (evaluation) this is the identity
    /// and returns `a` itself.
    pub fn dropout(&mut self, a: NodeId, p: f64, rng: Option<&mut Rng>) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::InvalidArgument {
                op: "dropout",
                msg: format!("probability must lie in [0, 1), got {p}"),
            });
        }
        let Some(rng) = rng else { return Ok(a) };
        if p == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 - p;
        let v = self.value(a);
        let mask: Vec<f64> = (0..v.len())
            .map(|_| if rng.uniform() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let out = v.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let t = Tensor::from_parts(v.rows(), v.cols(), out);
        self.push(t, Op::Dropout(a, mask))
    }

    /// Embedding lookup: row `i` of the output is `table[rows[i]]`.
    pub fn gather_rows(&mut self, table: NodeId, rows: &[usize]) -> Result<NodeId> {
        let v = self.value(table);
        if rows.is_empty() {
            return Err(TensorError::InvalidArgument {
                op: "gather_rows",
                msg: "no rows requested".into(),
            });
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= v.rows()) {
            return Err(TensorError::InvalidArgument {
                op: "gather_rows",
                msg: format!("row {bad} out of range for table with {} rows", v.rows()),
            });
        }
        let mut data = Vec::with_capacity(rows.len() * v.cols());
        for &r in rows {
            data.extend_from_slice(v.row_slice(r));
        }
        let t = Tensor::from_parts(rows.len(), v.cols(), data);
        self.push(t, Op::Gather(table, rows.to_vec()))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.value(a).transposed();
        self.push(t, Op::Transpose(a))
    }

    /// `-Σ [m log p + (1-m) log(1-p)]` with `p` clamped to `[eps, 1-eps]`.
    pub fn bce_loss(&mut self, pred: NodeId, target: NodeId, eps: f64) -> Result<NodeId> {
        if self.shape(pred) != self.shape(target) {
            return Err(self.mismatch("bce_loss", pred, target));
        }
        let p = self.value(pred).data();
        let m = self.value(target).data();
        let loss = -p
            .iter()
            .zip(m)
            .map(|(&p, &m)| {
                let p = p.clamp(eps, 1.0 - eps);
                m * p.ln() + (1.0 - m) * (1.0 - p).ln()
            })
            .sum::<f64>();
        self.push(Tensor::scalar(loss), Op::Bce { pred, target, eps })
    }

    /// Multi-label margin: per row, `Σ_{i∈pos, j∈neg} max(0, 1-(p_i-p_j)) / M`.
    pub fn margin_loss(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        if self.shape(pred) != self.shape(target) {
            return Err(self.mismatch("margin_loss", pred, target));
        }
        let p = self.value(pred);
        let m = self.value(target);
        let width = p.cols() as f64;
        let mut loss = 0.0;
        for r in 0..p.rows() {
            let (pr, mr) = (p.row_slice(r), m.row_slice(r));
            for i in (0..pr.len()).filter(|&i| mr[i] == 1.0) {
                for j in (0..pr.len()).filter(|&j| mr[j] == 0.0) {
                    loss += (1.0 - (pr[i] - pr[j])).max(0.0) / width;
                }
            }
        }
        self.push(Tensor::scalar(loss), Op::Margin { pred, target })
    }

    /// `Σ_t Σ_i Σ_j A[i,j] p_t[i] p_t[j]` over the rows `p_t` of `pred`.
    pub fn ddi_loss(&mut self, pred: NodeId, adjacency: NodeId) -> Result<NodeId> {
        let [_, m] = self.shape(pred);
        let [ar, ac] = self.shape(adjacency);
        if ar != m || ac != m {
            return Err(self.mismatch("ddi_loss", pred, adjacency));
        }
        let p = self.value(pred);
        let a = self.value(adjacency);
        let mut loss = 0.0;
        for r in 0..p.rows() {
            let pr = p.row_slice(r);
            for i in 0..m {
                if pr[i] == 0.0 {
                    continue;
                }
                let arow = a.row_slice(i);
                let s: f64 = arow.iter().zip(pr).map(|(x, y)| x * y).sum();
                loss += pr[i] * s;
            }
        }
        self.push(Tensor::scalar(loss), Op::Ddi { pred, adjacency })
    }

    /// Propagates gradients from a scalar `loss` back to every leaf and
    /// parameter. Consumes the tape.
    pub fn backward(self, loss: NodeId) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(TensorError::EmptyTape);
        }
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NotScalar {
                shape: lv.shape().to_vec(),
            });
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf | Op::Param) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
        }

        let mut node_grads = Vec::with_capacity(n);
        for (i, g) in grads.into_iter().enumerate() {
            let node = &self.nodes[i];
            let keep = node.requires_grad && matches!(node.op, Op::Leaf | Op::Param);
            node_grads.push(match (keep, g) {
                (true, Some(g)) => Some(Tensor::from_parts(
                    node.value.rows(),
                    node.value.cols(),
                    g,
                )),
                _ => None,
            });
        }
        Ok(Gradients {
            node_grads,
            params: self.params.into_iter().collect(),
        })
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.requires_grad(*a) {
                    let buf = self.buf(grads, *a);
                    gemm(m, n, k, g, false, bv.data(), true, 1.0, buf);
                }
                if self.requires_grad(*b) {
                    let buf = self.buf(grads, *b);
                    gemm(k, m, n, av.data(), true, g, false, 1.0, buf);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.requires_grad(*a) {
                    for (d, x) in self.buf(grads, *a).iter_mut().zip(g) {
                        *d += x;
                    }
                }
                if self.requires_grad(*b) {
                    let c = out.cols();
                    let buf = self.buf(grads, *b);
                    if buf.len() == g.len() {
                        for (d, x) in buf.iter_mut().zip(g) {
                            *d += sign * x;
                        }
                    } else {
                        for (idx, x) in g.iter().enumerate() {
                            buf[idx % c] += sign * x;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let c = out.cols();
                let broadcast = bv.len() != av.len();
                let bat = |idx: usize| if broadcast { bv[idx % c] } else { bv[idx] };
                if self.requires_grad(*a) {
                    let buf = self.buf(grads, *a);
                    for (idx, x) in g.iter().enumerate() {
                        buf[idx] += x * bat(idx);
                    }
                }
                if self.requires_grad(*b) {
                    let buf = self.buf(grads, *b);
                    for (idx, x) in g.iter().enumerate() {
                        let j = if broadcast { idx % c } else { idx };
                        buf[j] += x * av[idx];
                    }
                }
            }
            Op::Scale(a, f) => {
                for (d, x) in self.buf(grads, *a).iter_mut().zip(g) {
                    *d += f * x;
                }
            }
            Op::Concat(parts, axis) => {
                let total_cols = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let [pr, pc] = self.shape(p);
                    if self.requires_grad(p) {
                        let buf = self.buf(grads, p);
                        match axis {
                            Axis::Rows => {
                                let start = offset * total_cols;
                                for (d, x) in buf.iter_mut().zip(&g[start..start + pr * pc]) {
                                    *d += x;
                                }
                            }
                            Axis::Cols => {
                                for r in 0..pr {
                                    let src = &g[r * total_cols + offset..r * total_cols + offset + pc];
                                    for (d, x) in buf[r * pc..(r + 1) * pc].iter_mut().zip(src) {
                                        *d += x;
                                    }
                                }
                            }
                        }
                    }
                    offset += match axis {
                        Axis::Rows => pr,
                        Axis::Cols => pc,
                    };
                }
            }
            Op::SumRows(a) => {
                let c = out.cols();
                for (idx, d) in self.buf(grads, *a).iter_mut().enumerate() {
                    *d += g[idx % c];
                }
            }
            Op::SumAll(a) => {
                for d in self.buf(grads, *a).iter_mut() {
                    *d += g[0];
                }
            }
            Op::Sigmoid(a) => {
                let y = out.data();
                for (idx, d) in self.buf(grads, *a).iter_mut().enumerate() {
                    *d += g[idx] * y[idx] * (1.0 - y[idx]);
                }
            }
            Op::Tanh(a) => {
                let y = out.data();
                for (idx, d) in self.buf(grads, *a).iter_mut().enumerate() {
                    *d += g[idx] * (1.0 - y[idx] * y[idx]);
                }
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                for (idx, d) in self.buf(grads, *a).iter_mut().enumerate() {
                    if x[idx] > 0.0 {
                        *d += g[idx];
                    }
                }
            }
            Op::Softmax(a, divisor) => {
                let c = out.cols();
                let y = out.data();
                let buf = self.buf(grads, *a);
                for r in 0..out.rows() {
                    let s = r * c..(r + 1) * c;
                    let dot: f64 = g[s.clone()].iter().zip(&y[s.clone()]).map(|(a, b)| a * b).sum();
                    for idx in s {
                        buf[idx] += y[idx] * (g[idx] - dot) / divisor;
                    }
                }
            }
            Op::LayerNorm(a, inv_std) => {
                let c = out.cols();
                let y = out.data();
                let buf = self.buf(grads, *a);
                for (r, inv) in inv_std.iter().enumerate() {
                    let s = r * c..(r + 1) * c;
                    let mean_g = g[s.clone()].iter().sum::<f64>() / c as f64;
                    let mean_gy = g[s.clone()]
                        .iter()
                        .zip(&y[s.clone()])
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        / c as f64;
                    for idx in s {
                        buf[idx] += inv * (g[idx] - mean_g - y[idx] * mean_gy);
                    }
                }
            }
            Op::Dropout(a, mask) => {
                for (idx, d) in self.buf(grads, *a).iter_mut().enumerate() {
                    *d += g[idx] * mask[idx];
                }
            }
            Op::Gather(table, rows) => {
                let c = out.cols();
                let buf = self.buf(grads, *table);
                for (i, &r) in rows.iter().enumerate() {
                    for (d, x) in buf[r * c..(r + 1) * c].iter_mut().zip(&g[i * c..(i + 1) * c]) {
                        *d += x;
                    }
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (out.rows(), out.cols());
                let buf = self.buf(grads, *a);
                // input is c × r
                for i in 0..r {
                    for j in 0..c {
                        buf[j * r + i] += g[i * c + j];
                    }
                }
            }
            Op::Bce { pred, target, eps } => {
                if self.requires_grad(*pred) {
                    let p = self.value(*pred).data();
                    let m = self.value(*target).data();
                    let buf = self.buf(grads, *pred);
                    for idx in 0..p.len() {
                        let pi = p[idx];
                        if pi > *eps && pi < 1.0 - eps {
                            buf[idx] += g[0] * (-m[idx] / pi + (1.0 - m[idx]) / (1.0 - pi));
                        }
                    }
                }
            }
            Op::Margin { pred, target } => {
                if self.requires_grad(*pred) {
                    let p = self.value(*pred);
                    let m = self.value(*target);
                    let c = p.cols();
                    let width = c as f64;
                    let mut local = vec![0.0; p.len()];
                    for r in 0..p.rows() {
                        let (pr, mr) = (p.row_slice(r), m.row_slice(r));
                        for i in (0..c).filter(|&i| mr[i] == 1.0) {
                            for j in (0..c).filter(|&j| mr[j] == 0.0) {
                                if 1.0 - (pr[i] - pr[j]) > 0.0 {
                                    local[r * c + i] -= 1.0 / width;
                                    local[r * c + j] += 1.0 / width;
                                }
                            }
                        }
                    }
                    for (d, x) in self.buf(grads, *pred).iter_mut().zip(local) {
                        *d += g[0] * x;
                    }
                }
            }
            Op::Ddi { pred, adjacency } => {
                if self.requires_grad(*pred) {
                    let p = self.value(*pred);
                    let a = self.value(*adjacency);
                    let m = p.cols();
                    let mut local = vec![0.0; p.len()];
                    for r in 0..p.rows() {
                        let pr = p.row_slice(r);
                        for i in 0..m {
                            let mut s = 0.0;
                            for j in 0..m {
                                s += (a.get(i, j) + a.get(j, i)) * pr[j];
                            }
                            local[r * m + i] = s;
                        }
                    }
                    for (d, x) in self.buf(grads, *pred).iter_mut().zip(local) {
                        *d += g[0] * x;
                    }
                }
            }
        }
    }

    fn buf<'g>(&self, grads: &'g mut [Option<Vec<f64>>], id: NodeId) -> &'g mut Vec<f64> {
        let len = self.nodes[id.0].value.len();
        grads[id.0].get_or_insert_with(|| vec![0.0; len])
    }
}

pub(crate) fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    node_grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, NodeId)>,
}

impl Gradients {
    /// Gradient with respect to a leaf recorded with [`Tape::var`] or
    /// [`Tape::param`]; `None` if the loss does not depend on it.
    pub fn wrt(&self, node: NodeId) -> Option<&Tensor> {
        self.node_grads.get(node.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, n)| self.wrt(*n))
    }

    pub fn into_param_grads(mut self) -> ParamGrads {
        let mut out = BTreeMap::new();
        for (pid, node) in self.params {
            if let Some(g) = self.node_grads[node.0].take() {
                out.insert(pid, g);
            }
        }
        ParamGrads(out)
    }
}

/// Parameter gradients keyed by [`ParamId`]. Parameters the loss did not
/// touch are absent.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamGrads(pub BTreeMap<ParamId, Tensor>);

impl ParamGrads {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.0.get(&id)
    }

    /// Adds `other` into `self` (per-patient accumulation).
    pub fn accumulate(&mut self, other: ParamGrads) {
        for (id, g) in other.0 {
            match self.0.get_mut(&id) {
                Some(cur) => {
                    for (a, b) in cur.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => {
                    self.0.insert(id, g);
                }
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(r: usize, c: usize, d: &[f64]) -> Tensor {
        Tensor::matrix(r, c, d.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_case() {
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::identity(2));
        let b = tape.constant(t(2, 2, &[3.0, 4.0, 5.0, 6.0]));
        let c = tape.matmul(i, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = t(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = t(2, 1, &[5.0, 6.0]);
        let mut oracle = vec![0.0; 2];
        for i in 0..2 {
            for k in 0..2 {
                oracle[i] += a.get(i, k) * b.get(k, 0);
            }
        }
        assert_eq!(oracle, vec![17.0, 39.0]);
        let mut tape = Tape::new();
        let (an, bn) = (tape.constant(a), tape.constant(b));
        let c = tape.matmul(an, bn).unwrap();
        assert_eq!(tape.value(c).data(), oracle.as_slice());
    }

    #[test]
    fn matmul_shape_error_names_op() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(2, 3));
        let b = tape.constant(Tensor::zeros(2, 3));
        match tape.matmul(a, b) {
            Err(TensorError::ShapeMismatch { op, lhs, rhs }) => {
                assert_eq!(op, "matmul");
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn softmax_single_element() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(3.7));
        let y = tape.softmax(x, 1.0).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0]);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.var(t(1, 3, &[1.0, 2.0, 3.0]));
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.var(t(1, 3, &[1.0, 2.0, 3.0]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.var(t(1, 2, &[1.0, 2.0]));
        assert!(matches!(
            tape.backward(x),
            Err(TensorError::NotScalar { .. })
        ));
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.var(Tensor::scalar(f64::MAX));
        assert!(matches!(
            tape.scale(x, 10.0),
            Err(TensorError::NonFinite { op: "scale" })
        ));
    }

    #[test]
    fn eval_dropout_is_identity() {
        let mut tape = Tape::new();
        let x = tape.var(t(1, 3, &[1.0, -2.0, 3.0]));
        let y = tape.dropout(x, 0.5, None).unwrap();
        assert_eq!(x, y);
        assert!(tape.dropout(x, 1.0, None).is_err());
    }

    #[test]
    fn dropout_uses_inverted_scaling() {
        let mut tape = Tape::new();
        let mut rng = Rng::seeded(3);
        let x = tape.constant(Tensor::full(1, 1000, 1.0));
        let y = tape.dropout(x, 0.25, Some(&mut rng)).unwrap();
        for &v in tape.value(y).data() {
            assert!(v == 0.0 || (v - 1.0 / 0.75).abs() < 1e-15);
        }
    }

    #[test]
    fn gather_scatter_adds_repeated_rows() {
        let mut tape = Tape::new();
        let table = tape.var(t(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let g = tape.gather_rows(table, &[2, 0, 2]).unwrap();
        assert_eq!(tape.value(g).data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let s = tape.sum(g).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.wrt(table).unwrap().data(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }
}
