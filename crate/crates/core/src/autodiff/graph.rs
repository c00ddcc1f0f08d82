//! Computation graph with eager forward evaluation and a single reverse sweep.
//!
//! Nodes are appended in evaluation order, so the node vector is already a
//! topological order and `backward` only has to walk it in reverse. Every op
//! checks its output for NaN/Inf and fails with [`Error::NonFinite`].
//!
//! Broadcasting is limited to the leading batch dimension: the right operand
//! of `add`/`sub`/`mul` may have a shape equal to a suffix of the left
//! operand's shape, and `matmul` may share a 2-D right operand across the
//! batch of the left one.

use super::tensor::{self, Tensor};
use crate::error::{Error, Result};

/// Handle to a node inside one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    Div,
    Scale,
    EmbeddingGather,
    LayerNorm,
    Gelu,
    Softmax,
    CrossEntropyRows,
    Reshape,
    Slice,
    Concat,
    Transpose,
    CausalMask,
    ReduceMean,
    ReduceSum,
    L2Norm,
    Dot,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: NodeId,
        b: NodeId,
        trans_b: bool,
        batch: usize,
        shared_b: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Div { a: NodeId, b: NodeId },
    Scale { a: NodeId, s: f64 },
    Gather { table: NodeId, ids: Vec<usize> },
    LayerNorm { x: NodeId, rstd: Vec<f64> },
    Gelu { x: NodeId },
    Softmax { x: NodeId },
    CrossEntropyRows { logits: NodeId, targets: Vec<usize>, probs: Vec<f64> },
    Reshape { x: NodeId },
    Slice { x: NodeId, axis: usize, start: usize, end: usize },
    Concat { xs: Vec<NodeId>, axis: usize },
    Transpose { x: NodeId },
    CausalMask { x: NodeId },
    ReduceMean { x: NodeId },
    ReduceSum { x: NodeId },
    L2Norm { x: NodeId },
    Dot { a: NodeId, b: NodeId },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Add { .. } => OpKind::Add,
            Op::Sub { .. } => OpKind::Sub,
            Op::Mul { .. } => OpKind::Mul,
            Op::Div { .. } => OpKind::Div,
            Op::Scale { .. } => OpKind::Scale,
            Op::Gather { .. } => OpKind::EmbeddingGather,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Gelu { .. } => OpKind::Gelu,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::CrossEntropyRows { .. } => OpKind::CrossEntropyRows,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::Slice { .. } => OpKind::Slice,
            Op::Concat { .. } => OpKind::Concat,
            Op::Transpose { .. } => OpKind::Transpose,
            Op::CausalMask { .. } => OpKind::CausalMask,
            Op::ReduceMean { .. } => OpKind::ReduceMean,
            Op::ReduceSum { .. } => OpKind::ReduceSum,
            Op::L2Norm { .. } => OpKind::L2Norm,
            Op::Dot { .. } => OpKind::Dot,
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
    is_param: bool,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;
const MASK_FILL: f64 = -1e30;

/// A single-use computation graph. Confined to one thread; build a fresh
/// graph per worker.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Result of a reverse sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `id`, or `None` when no differentiable path reaches it.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    /// Gradient for `id`; a leaf with no path to the output gets zeros.
    pub fn wrt(&self, id: NodeId) -> Tensor {
        match &self.grads[id.0] {
            Some(t) => t.clone(),
            None => Tensor::zeros(&self.shapes[id.0]),
        }
    }

    pub fn take(&mut self, id: NodeId) -> Tensor {
        self.grads[id.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[id.0]))
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

/// `b` either matches `a` or equals a suffix of `a`'s shape.
fn broadcast_ok(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    let (sa, sb) = (a.shape(), b.shape());
    if sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb && !b.is_empty() {
        Ok(())
    } else {
        Err(Error::shape(op, sa, sb))
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        sum += *o;
    }
    let inv = 1.0 / sum;
    for o in out.iter_mut() {
        *o *= inv;
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn kind(&self, id: NodeId) -> OpKind {
        self.nodes[id.0].op.kind()
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(value, true)
    }

    /// Detached leaf; receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor, is_param: bool) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            needs_grad: is_param,
            is_param,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op, value: Tensor, inputs: &[NodeId], name: &str) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
            is_param: false,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Batched matrix product. `a` is `[.., m, k]`; `b` is `[k, n]` (shared
    /// across the batch) or `[.., k, n]` with the same leading dims as `a`.
    /// With `trans_b`, `b` is stored as `[.., n, k]`.
    pub fn matmul_ext(&mut self, a: NodeId, b: NodeId, trans_b: bool) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (bk, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if bk != k {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let lead_a = &sa[..sa.len() - 2];
        let lead_b = &sb[..sb.len() - 2];
        let shared_b = lead_b.is_empty();
        if !shared_b && lead_a != lead_b {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let batch: usize = lead_a.iter().product();
        let mut out = vec![0.0; batch * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            for bi in 0..batch {
                let ab = &av[bi * m * k..(bi + 1) * m * k];
                let bb = if shared_b {
                    bv
                } else {
                    &bv[bi * k * n..(bi + 1) * k * n]
                };
                let cb = &mut out[bi * m * n..(bi + 1) * m * n];
                if trans_b {
                    tensor::gemm_nt(ab, bb, cb, m, k, n);
                } else {
                    tensor::gemm_nn(ab, bb, cb, m, k, n);
                }
            }
        }
        let mut shape = lead_a.to_vec();
        shape.extend([m, n]);
        let value = Tensor::new(shape, out)?;
        self.push(
            Op::MatMul {
                a,
                b,
                trans_b,
                batch,
                shared_b,
                m,
                k,
                n,
            },
            value,
            &[a, b],
            "matmul",
        )
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_ext(a, b, false)
    }

    fn elementwise(
        &mut self,
        a: NodeId,
        b: NodeId,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Vec<f64>> {
        let (av, bv) = (self.value(a), self.value(b));
        broadcast_ok(name, av, bv)?;
        let bl = bv.len();
        let bd = bv.data();
        Ok(av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[i % bl]))
            .collect())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let data = self.elementwise(a, b, "add", |x, y| x + y)?;
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(Op::Add { a, b }, value, &[a, b], "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let data = self.elementwise(a, b, "sub", |x, y| x - y)?;
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(Op::Sub { a, b }, value, &[a, b], "sub")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let data = self.elementwise(a, b, "mul", |x, y| x * y)?;
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(Op::Mul { a, b }, value, &[a, b], "mul")
    }

    /// Elementwise division of equally shaped tensors.
    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        same_shape("div", self.value(a), self.value(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x / y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(Op::Div { a, b }, value, &[a, b], "div")
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        let mut value = self.value(a).clone();
        value.scale_assign(s);
        self.push(Op::Scale { a, s }, value, &[a], "scale")
    }

    /// Rows of a `[vocab, d]` table selected by `ids`, giving `[ids.len(), d]`.
    pub fn embedding_gather(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let t = self.value(table);
        if t.shape().len() != 2 {
            return Err(Error::shape("embedding_gather", t.shape(), &[ids.len()]));
        }
        let (v, d) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::InvalidArgument(format!(
                    "token id {id} out of range for vocabulary of {v}"
                )));
            }
            out.extend_from_slice(t.row(id));
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        self.push(
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            value,
            &[table],
            "embedding_gather",
        )
    }

    /// Normalizes each row to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        let mut out = vec![0.0; xv.len()];
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (o, v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
            rstd.push(rs);
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        self.push(Op::LayerNorm { x, rstd }, value, &[x], "layer_norm")
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| gelu(v)).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(Op::Gelu { x }, value, &[x], "gelu")
    }

    /// Row-wise softmax over the last dimension.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let cols = xv.cols();
        let mut out = vec![0.0; xv.len()];
        for r in 0..xv.rows() {
            softmax_row(xv.row(r), &mut out[r * cols..(r + 1) * cols]);
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        self.push(Op::Softmax { x }, value, &[x], "softmax")
    }

    /// Per-row `-log softmax(logits)[target]`, shape `[rows]`.
    pub fn cross_entropy_rows(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let lv = self.value(logits);
        let (rows, cols) = (lv.rows(), lv.cols());
        if targets.len() != rows {
            return Err(Error::shape("cross_entropy_rows", lv.shape(), &[targets.len()]));
        }
        let mut probs = vec![0.0; lv.len()];
        let mut out = Vec::with_capacity(rows);
        for (r, &t) in targets.iter().enumerate() {
            if t >= cols {
                return Err(Error::InvalidArgument(format!(
                    "target {t} out of range for {cols} classes"
                )));
            }
            let row = lv.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            out.push(lse - row[t]);
            for (p, v) in probs[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
        }
        let value = Tensor::vector(out);
        self.push(
            Op::CrossEntropyRows {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            value,
            &[logits],
            "cross_entropy_rows",
        )
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        self.push(Op::Reshape { x }, value, &[x], "reshape")
    }

    /// `x[.., start..end, ..]` along `axis`.
    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, end: usize) -> Result<NodeId> {
        let xv = self.value(x);
        let shape = xv.shape();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(Error::shape("slice", shape, &[axis, start, end]));
        }
        let (outer, dim, inner) = split_axis(shape, axis);
        let w = end - start;
        let mut out = Vec::with_capacity(outer * w * inner);
        for o in 0..outer {
            let base = o * dim * inner;
            out.extend_from_slice(&xv.data()[base + start * inner..base + end * inner]);
        }
        let mut new_shape = shape.to_vec();
        new_shape[axis] = w;
        let value = Tensor::new(new_shape, out)?;
        self.push(
            Op::Slice {
                x,
                axis,
                start,
                end,
            },
            value,
            &[x],
            "slice",
        )
    }

    pub fn concat(&mut self, xs: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = self.shape(*xs.first().ok_or_else(|| {
            Error::InvalidArgument("concat of zero tensors".into())
        })?)
        .to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", &first, &[axis]));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let xv = self.value(x);
                let dim = xv.shape()[axis];
                let base = o * dim * inner;
                out.extend_from_slice(&xv.data()[base..base + dim * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        self.push(
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            value,
            xs,
            "concat",
        )
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.shape().len() != 2 {
            return Err(Error::shape("transpose", xv.shape(), &[2]));
        }
        let (r, c) = (xv.shape()[0], xv.shape()[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xv.data()[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], out)?;
        self.push(Op::Transpose { x }, value, &[x], "transpose")
    }

    /// Fills entries above the diagonal of each trailing square block with a
    /// large negative value so a following softmax assigns them zero mass.
    pub fn causal_mask(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() < 2 || s[s.len() - 1] != s[s.len() - 2] {
            return Err(Error::shape("causal_mask", s, &[]));
        }
        let n = s[s.len() - 1];
        let mut value = xv.clone();
        for block in value.data_mut().chunks_mut(n * n) {
            for i in 0..n {
                for j in i + 1..n {
                    block[i * n + j] = MASK_FILL;
                }
            }
        }
        self.push(Op::CausalMask { x }, value, &[x], "causal_mask")
    }

    pub fn reduce_mean(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.is_empty() {
            return Err(Error::InvalidArgument("reduce_mean of empty tensor".into()));
        }
        let v = xv.data().iter().sum::<f64>() / xv.len() as f64;
        self.push(Op::ReduceMean { x }, Tensor::scalar(v), &[x], "reduce_mean")
    }

    pub fn reduce_sum(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).data().iter().sum::<f64>();
        self.push(Op::ReduceSum { x }, Tensor::scalar(v), &[x], "reduce_sum")
    }

    pub fn l2_norm(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).norm();
        self.push(Op::L2Norm { x }, Tensor::scalar(v), &[x], "l2_norm")
    }

    /// Inner product of two equally shaped tensors.
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        same_shape("dot", self.value(a), self.value(b))?;
        let v = tensor::dot(self.value(a).data(), self.value(b).data());
        self.push(Op::Dot { a, b }, Tensor::scalar(v), &[a, b], "dot")
    }

    /// Reverse sweep from a scalar `output`.
    ///
    /// Gradients are returned for every node on a differentiable path; leaves
    /// created with [`Graph::constant`] never receive one.
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        let out_val = self.value(output);
        if out_val.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward requires a scalar output, got shape {:?}",
                out_val.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(out_val.shape(), 1.0));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        // Only keep leaf gradients plus the root; intermediate values are
        // rarely needed and dropping them halves peak memory.
        for (i, node) in self.nodes.iter().enumerate() {
            if !node.is_param && i != output.0 && !matches!(node.op, Op::Leaf) {
                grads[i] = None;
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                trans_b,
                batch,
                shared_b,
                m,
                k,
                n,
            } => {
                let av = self.value(a).data();
                let bv = self.value(b).data();
                let gd = g.data();
                if self.wants(a) {
                    let mut da = vec![0.0; batch * m * k];
                    for bi in 0..batch {
                        let gb = &gd[bi * m * n..(bi + 1) * m * n];
                        let bb = if shared_b {
                            bv
                        } else {
                            &bv[bi * k * n..(bi + 1) * k * n]
                        };
                        let dab = &mut da[bi * m * k..(bi + 1) * m * k];
                        if trans_b {
                            // C = A Bᵀ, B:[n,k] → dA = G B
                            tensor::gemm_nn(gb, bb, dab, m, n, k);
                        } else {
                            // dA = G Bᵀ, B:[k,n]
                            tensor::gemm_nt(gb, bb, dab, m, n, k);
                        }
                    }
                    let t = Tensor::new(self.shape(a).to_vec(), da).expect("matmul grad a");
                    self.accumulate(grads, a, t);
                }
                if self.wants(b) {
                    let blen = self.value(b).len();
                    let mut db = vec![0.0; blen];
                    for bi in 0..batch {
                        let gb = &gd[bi * m * n..(bi + 1) * m * n];
                        let ab = &av[bi * m * k..(bi + 1) * m * k];
                        let dbb = if shared_b {
                            &mut db[..]
                        } else {
                            &mut db[bi * k * n..(bi + 1) * k * n]
                        };
                        if trans_b {
                            // dB[n,k] = Gᵀ A
                            tensor::gemm_tn(gb, ab, dbb, m, n, k);
                        } else {
                            // dB[k,n] = Aᵀ G
                            tensor::gemm_tn(ab, gb, dbb, m, k, n);
                        }
                    }
                    let t = Tensor::new(self.shape(b).to_vec(), db).expect("matmul grad b");
                    self.accumulate(grads, b, t);
                }
            }
            &Op::Add { a, b } | &Op::Sub { a, b } => {
                let sign = if matches!(node.op, Op::Sub { .. }) {
                    -1.0
                } else {
                    1.0
                };
                if self.wants(a) {
                    self.accumulate(grads, a, g.clone());
                }
                if self.wants(b) {
                    let blen = self.value(b).len();
                    let mut db = vec![0.0; blen];
                    for (i, &gi) in g.data().iter().enumerate() {
                        db[i % blen] += sign * gi;
                    }
                    let t = Tensor::new(self.shape(b).to_vec(), db).expect("add grad");
                    self.accumulate(grads, b, t);
                }
            }
            &Op::Mul { a, b } => {
                let av = self.value(a).data();
                let bv = self.value(b).data();
                let blen = bv.len();
                if self.wants(a) {
                    let da = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, gi)| gi * bv[i % blen])
                        .collect();
                    let t = Tensor::new(self.shape(a).to_vec(), da).expect("mul grad a");
                    self.accumulate(grads, a, t);
                }
                if self.wants(b) {
                    let mut db = vec![0.0; blen];
                    for (i, gi) in g.data().iter().enumerate() {
                        db[i % blen] += gi * av[i];
                    }
                    let t = Tensor::new(self.shape(b).to_vec(), db).expect("mul grad b");
                    self.accumulate(grads, b, t);
                }
            }
            &Op::Div { a, b } => {
                let av = self.value(a).data();
                let bv = self.value(b).data();
                if self.wants(a) {
                    let da = g.data().iter().zip(bv).map(|(gi, y)| gi / y).collect();
                    let t = Tensor::new(self.shape(a).to_vec(), da).expect("div grad a");
                    self.accumulate(grads, a, t);
                }
                if self.wants(b) {
                    let db = g
                        .data()
                        .iter()
                        .zip(av.iter().zip(bv))
                        .map(|(gi, (x, y))| -gi * x / (y * y))
                        .collect();
                    let t = Tensor::new(self.shape(b).to_vec(), db).expect("div grad b");
                    self.accumulate(grads, b, t);
                }
            }
            &Op::Scale { a, s } => {
                let mut da = g.clone();
                da.scale_assign(s);
                self.accumulate(grads, a, da);
            }
            Op::Gather { table, ids } => {
                let tv = self.value(*table);
                let d = tv.cols();
                let mut dt = Tensor::zeros(tv.shape());
                for (r, &id) in ids.iter().enumerate() {
                    tensor::axpy(1.0, g.row(r), dt.row_mut(id));
                }
                debug_assert_eq!(g.cols(), d);
                self.accumulate(grads, *table, dt);
            }
            Op::LayerNorm { x, rstd } => {
                let cols = out.cols();
                let mut dx = vec![0.0; out.len()];
                for (r, &rs) in rstd.iter().enumerate() {
                    let y = out.row(r);
                    let gr = g.row(r);
                    let mg = gr.iter().sum::<f64>() / cols as f64;
                    let mgy = tensor::dot(gr, y) / cols as f64;
                    for j in 0..cols {
                        dx[r * cols + j] = rs * (gr[j] - mg - y[j] * mgy);
                    }
                }
                let t = Tensor::new(out.shape().to_vec(), dx).expect("ln grad");
                self.accumulate(grads, *x, t);
            }
            &Op::Gelu { x } => {
                let xv = self.value(x).data();
                let dx = g
                    .data()
                    .iter()
                    .zip(xv)
                    .map(|(gi, &v)| gi * gelu_grad(v))
                    .collect();
                let t = Tensor::new(out.shape().to_vec(), dx).expect("gelu grad");
                self.accumulate(grads, x, t);
            }
            &Op::Softmax { x } => {
                let cols = out.cols();
                let mut dx = vec![0.0; out.len()];
                for r in 0..out.rows() {
                    let y = out.row(r);
                    let gr = g.row(r);
                    let s = tensor::dot(gr, y);
                    for j in 0..cols {
                        dx[r * cols + j] = y[j] * (gr[j] - s);
                    }
                }
                let t = Tensor::new(out.shape().to_vec(), dx).expect("softmax grad");
                self.accumulate(grads, x, t);
            }
            Op::CrossEntropyRows {
                logits,
                targets,
                probs,
            } => {
                let lv = self.value(*logits);
                let cols = lv.cols();
                let mut dx = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    let gr = g.data()[r];
                    let row = &mut dx[r * cols..(r + 1) * cols];
                    row[t] -= 1.0;
                    for v in row.iter_mut() {
                        *v *= gr;
                    }
                }
                let t = Tensor::new(lv.shape().to_vec(), dx).expect("ce grad");
                self.accumulate(grads, *logits, t);
            }
            &Op::Reshape { x } => {
                let t = g
                    .clone()
                    .reshape(self.shape(x).to_vec())
                    .expect("reshape grad");
                self.accumulate(grads, x, t);
            }
            &Op::Slice {
                x,
                axis,
                start,
                end,
            } => {
                let shape = self.shape(x).to_vec();
                let (outer, dim, inner) = split_axis(&shape, axis);
                let w = end - start;
                let mut dx = Tensor::zeros(&shape);
                for o in 0..outer {
                    let src = &g.data()[o * w * inner..(o + 1) * w * inner];
                    let base = o * dim * inner + start * inner;
                    tensor::axpy(1.0, src, &mut dx.data_mut()[base..base + w * inner]);
                }
                self.accumulate(grads, x, dx);
            }
            Op::Concat { xs, axis } => {
                let shape = out.shape();
                let (outer, total, inner) = split_axis(shape, *axis);
                let mut offset = 0;
                for &x in xs {
                    let xs_shape = self.shape(x).to_vec();
                    let dim = xs_shape[*axis];
                    if self.wants(x) {
                        let mut dx = Vec::with_capacity(outer * dim * inner);
                        for o in 0..outer {
                            let base = o * total * inner + offset * inner;
                            dx.extend_from_slice(&g.data()[base..base + dim * inner]);
                        }
                        let t = Tensor::new(xs_shape, dx).expect("concat grad");
                        self.accumulate(grads, x, t);
                    }
                    offset += dim;
                }
            }
            &Op::Transpose { x } => {
                let (r, c) = (out.shape()[0], out.shape()[1]);
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[j * r + i] = g.data()[i * c + j];
                    }
                }
                let t = Tensor::new(self.shape(x).to_vec(), dx).expect("transpose grad");
                self.accumulate(grads, x, t);
            }
            &Op::CausalMask { x } => {
                let n = out.cols();
                let mut dx = g.clone();
                for block in dx.data_mut().chunks_mut(n * n) {
                    for i in 0..n {
                        for j in i + 1..n {
                            block[i * n + j] = 0.0;
                        }
                    }
                }
                self.accumulate(grads, x, dx);
            }
            &Op::ReduceMean { x } => {
                let xv = self.value(x);
                let t = Tensor::full(xv.shape(), g.item() / xv.len() as f64);
                self.accumulate(grads, x, t);
            }
            &Op::ReduceSum { x } => {
                let t = Tensor::full(self.shape(x), g.item());
                self.accumulate(grads, x, t);
            }
            &Op::L2Norm { x } => {
                let xv = self.value(x);
                let nrm = out.item();
                let mut dx = xv.clone();
                if nrm > 0.0 {
                    dx.scale_assign(g.item() / nrm);
                } else {
                    // Subgradient 0 at the origin.
                    dx.scale_assign(0.0);
                }
                self.accumulate(grads, x, dx);
            }
            &Op::Dot { a, b } => {
                let gi = g.item();
                if self.wants(a) {
                    let mut da = self.value(b).clone();
                    da.scale_assign(gi);
                    self.accumulate(grads, a, da);
                }
                if self.wants(b) {
                    let mut db = self.value(a).clone();
                    db.scale_assign(gi);
                    self.accumulate(grads, b, db);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn matmul_by_identity() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let i = g.constant(Tensor::identity(2));
        let c = g.matmul(a, i).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0, 0.0]));
        let s = g.softmax(x).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(1, 4, vec![0.0; 4]).unwrap());
        let ce = g.cross_entropy_rows(x, &[2]).unwrap();
        assert!(close(g.value(ce).data()[0], 4f64.ln(), 1e-12));
    }

    #[test]
    fn derivative_of_square() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![3.0]));
        let y = g.dot(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(x).data(), &[6.0]);
    }

    #[test]
    fn cross_entropy_gradient_is_p_minus_onehot() {
        let mut g = Graph::new();
        let x = g.param(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        let ce = g.cross_entropy_rows(x, &[0]).unwrap();
        let loss = g.reduce_mean(ce).unwrap();
        let grads = g.backward(loss).unwrap();
        let d = grads.wrt(x);
        assert!(close(d.data()[0], -0.5, 1e-12));
        assert!(close(d.data()[1], 0.5, 1e-12));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        let y = g.scale(x, 2.0).unwrap();
        assert!(g.backward(y).is_err());
    }

    #[test]
    fn detached_leaf_gets_zero_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        let unused = g.param(Tensor::vector(vec![5.0]));
        let y = g.reduce_sum(x).unwrap();
        let grads = g.backward(y).unwrap();
        assert!(grads.get(unused).is_none());
        assert_eq!(grads.wrt(unused).data(), &[0.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        let c = g.constant(Tensor::vector(vec![3.0, 4.0]));
        let y = g.dot(x, c).unwrap();
        let grads = g.backward(y).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.wrt(x).data(), &[3.0, 4.0]);
    }

    #[test]
    fn nan_is_an_error() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![0.0]));
        let b = g.constant(Tensor::vector(vec![0.0]));
        assert!(matches!(g.div(a, b), Err(Error::NonFinite(_))));
    }

    #[test]
    fn row_broadcast_add_and_its_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::matrix(3, 2, vec![0.0; 6]).unwrap());
        let b = g.param(Tensor::vector(vec![1.0, -1.0]));
        let y = g.add(x, b).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, -1.0, 1.0, -1.0, 1.0, -1.0]);
        let s = g.reduce_sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(b).data(), &[3.0, 3.0]);
    }

    #[test]
    fn causal_mask_zeroes_future_attention() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(3, 3, vec![0.0; 9]).unwrap());
        let m = g.causal_mask(x).unwrap();
        let p = g.softmax(m).unwrap();
        let v = g.value(p);
        assert_eq!(v.row(0), &[1.0, 0.0, 0.0]);
        assert_eq!(v.row(1), &[0.5, 0.5, 0.0]);
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let mut g = Graph::new();
        let x = g.constant(
            Tensor::matrix(2, 4, vec![1.0, 2.0, 3.0, 4.0, -3.0, 0.5, 7.0, 2.0]).unwrap(),
        );
        let y = g.layer_norm(x).unwrap();
        for r in 0..2 {
            let row = g.value(y).row(r);
            let mean = row.iter().sum::<f64>() / 4.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn slice_and_concat_round_trip() {
        let mut g = Graph::new();
        let x = g.param(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let left = g.slice(x, 1, 0, 1).unwrap();
        let right = g.slice(x, 1, 1, 3).unwrap();
        let back = g.concat(&[left, right], 1).unwrap();
        assert_eq!(g.value(back), g.value(x));
        assert_eq!(g.value(right).data(), &[2.0, 3.0, 5.0, 6.0]);
    }
}
