//! Reverse-mode automatic differentiation over an arena of nodes.
//!
//! Ops evaluate eagerly as the graph is built (creation order is a valid
//! topological order), so `forward_eval` just hands back the cached root
//! value. The first shape mismatch or non-finite value poisons the graph;
//! later builders become no-ops and the error surfaces from `forward_eval`
//! or `backward` with the name of the producing op.

use super::optim::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    AddBias(NodeId, NodeId),
    AddCol(NodeId, NodeId),
    RowSoftmax(NodeId),
    RowLogSumExp(NodeId),
    Sum(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    SliceCols(NodeId, usize, usize),
    SliceRows(NodeId, usize, usize),
    GatherRows(NodeId, Vec<usize>),
    Unfold(NodeId, usize),
    RowLayerNorm { x: NodeId, gain: NodeId, bias: NodeId, eps: f64 },
    GatherSum(NodeId, Vec<usize>),
    GatherColsPerRow(NodeId, Vec<Vec<usize>>),
    Reshape(NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::AddBias(..) => "add_bias",
            Op::AddCol(..) => "add_col",
            Op::RowSoftmax(..) => "row_softmax",
            Op::RowLogSumExp(..) => "row_logsumexp",
            Op::Sum(..) => "sum",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Relu(..) => "relu",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::SliceRows(..) => "slice_rows",
            Op::GatherRows(..) => "gather_rows",
            Op::Unfold(..) => "unfold",
            Op::RowLayerNorm { .. } => "row_layer_norm",
            Op::GatherSum(..) => "gather_sum",
            Op::GatherColsPerRow(..) => "gather_cols_per_row",
            Op::Reshape(..) => "reshape",
        }
    }
}

struct NodeData {
    op: Op,
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<NodeData>,
    param_nodes: Vec<(ParamId, NodeId)>,
    error: Option<String>,
}

// dense row-major matmul, ikj loop order
fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += aip * brow[j];
            }
        }
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf node that does not receive gradient.
    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.leaf(t, false)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> NodeId {
        self.push(Op::Leaf, t, requires_grad)
    }

    /// Leaf backed by a stored parameter; gradient is collected for it
    /// unless the parameter is frozen.
    pub fn param(&mut self, store: &ParamStore, pid: ParamId) -> NodeId {
        let p = store.get(pid);
        let node = self.leaf(p.tensor.clone(), !p.frozen);
        self.param_nodes.push((pid, node));
        node
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    /// Gradients of all non-frozen parameters used in this graph, in
    /// registration order. Parameters the root does not depend on get none.
    pub fn param_grads(&self) -> Vec<(ParamId, &Tensor)> {
        self.param_nodes
            .iter()
            .filter_map(|(pid, nid)| self.nodes[nid.0].grad.as_ref().map(|g| (*pid, g)))
            .collect()
    }

    /// True once any op has failed; later ops return placeholder nodes and
    /// `forward_eval`/`backward` report the first failure.
    pub fn poisoned(&self) -> bool {
        self.error.is_some()
    }

    /// Root value after eager evaluation; reports the first shape or
    /// non-finite error encountered while the graph was built.
    pub fn forward_eval(&self, root: NodeId) -> Result<Tensor> {
        if let Some(msg) = &self.error {
            return Err(Error::Numeric(msg.clone()));
        }
        Ok(self.nodes[root.0].value.clone())
    }

    /// Reverse pass from a scalar root. Populates `grad` on every node the
    /// root depends on that requires gradient.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if let Some(msg) = &self.error {
            return Err(Error::Numeric(msg.clone()));
        }
        let root_val = &self.nodes[root.0].value;
        if !root_val.is_scalar() {
            return Err(Error::Numeric(format!(
                "backward requires a scalar root, got shape {:?}",
                root_val.shape()
            )));
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        self.nodes[root.0].grad = Some(Tensor::scalar(1.0));
        for i in (0..=root.0).rev() {
            if self.nodes[i].grad.is_none() || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let contributions = self.backward_node(i);
            for (parent, contrib) in contributions {
                self.accumulate(parent, contrib);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, contrib: Tensor) {
        let node = &mut self.nodes[id.0];
        if !node.requires_grad {
            return;
        }
        debug_assert_eq!(contrib.numel(), node.value.numel());
        match &mut node.grad {
            Some(g) => {
                for (gi, ci) in g.data_mut().iter_mut().zip(contrib.data()) {
                    *gi += ci;
                }
            }
            None => node.grad = Some(contrib),
        }
    }

    fn dummy(&mut self) -> NodeId {
        self.push_unchecked(Op::Leaf, Tensor::scalar(0.0), false)
    }

    fn poison(&mut self, op: &str, msg: String) -> NodeId {
        if self.error.is_none() {
            self.error = Some(format!("op `{}`: {}", op, msg));
        }
        self.dummy()
    }

    fn push_unchecked(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(NodeData { op, value, grad: None, requires_grad });
        id
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        if !value.all_finite() && self.error.is_none() {
            self.error = Some(format!(
                "op `{}` produced a non-finite value (node {})",
                op.name(),
                self.nodes.len()
            ));
        }
        self.push_unchecked(op, value, requires_grad)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    // ---- op builders ------------------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        if self.error.is_some() {
            return self.dummy();
        }
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            let msg = format!("shape mismatch {:?} vs {:?}", va.shape(), vb.shape());
            return self.poison("add", msg);
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(va.shape().to_vec(), data);
        let rg = self.rg(&[a, b]);
        self.push(Op::Add(a, b), out, rg)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        if self.error.is_some() {
            return self.dummy();
        }
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            let msg = format!("shape mismatch {:?} vs {:?}", va.shape(), vb.shape());
            return self.poison("sub", msg);
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
        let out = Tensor::new(va.shape().to_vec(), data);
        let rg = self.rg(&[a, b]);
        self.push(Op::Sub(a, b), out, rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        if self.error.is_some() {
            return self.dummy();
        }
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            let msg = format!("shape mismatch {:?} vs {:?}", va.shape(), vb.shape());
            return self.poison("mul", msg);
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data);
        let rg = self.rg(&[a, b]);
        self.push(Op::Mul(a, b), out, rg)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        if self.error.is_some() {
            return self.dummy();
        }
        let va = self.value(a);
        let out = Tensor::new(va.shape().to_vec(), va.data().iter().map(|x| x * c).collect());
        let rg = self.rg(&[a]);
        self.push(Op::Scale(a, c), out, rg)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        if self.error.is_some() {
            return self.dummy();
        }
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape().len() != 2 || vb.shape().len() != 2 || va.cols() != vb.rows() {
            let msg = format!("incompatible shapes {:?} x {:?}", va.shape(), vb.shape());
            return self.poison("matmul", msg);
        }
        let (m, k, n) = (va.rows(), va.cols(), vb.cols());
        let out = Tensor::new(vec![m, n], matmul_raw(va.data(), vb.data(), m, k, n));
        let rg = self.rg(&[a, b]);
        self.push(Op::MatMul(a, b), out, rg)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        if self.error.is_some() {
            return self.dummy();
        }
        let va = self.value(a);
        if va.shape().len() != 2 {
            return self.poison("transpose", format!("expected 2-D, got {:?}", va.shape()));
        }
        let (r, c) = (va.rows(), va.cols());
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = va.data()[i * c + j];
            }
        }
        let out = Tensor::new(vec![c, r], data);
        let rg = self.rg(&[a]);
        self.push(Op::Transpose(a), out, rg)
    }

    /// x is n x d; bias is a length-d vector added to every row.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        if self.error.is_some() {
            return self.dummy();
        }
        let (vx, vb) = (self.value(x), self.value(bias));
        if vb.shape().len() != 1 || vx.cols() != vb.numel() {
            let msg = format!("bias {:?} does not match {:?}", vb.shape(), vx.shape());
            return self.poison("add_bias", msg);
        }
        let d = vx.cols();
        let data = vx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + vb.data()[i % d])
            .collect();
        let out = Tensor::new(vx.shape().to_vec(), data);
        let rg = self.rg(&[x, bias]);
        self.push(Op::AddBias(x, bias), out, rg)
    }

    /// x is n x m; col is a length-n vector added to every column.
    pub fn add_col(&mut self, x: NodeId, col: NodeId) -> NodeId {
        if self.error.is_some() {
            return self.dummy();
        }
        let (vx, vc) = (self.value(x), self.value(col));
        if vc.shape().len() != 1 || vx.rows() != vc.numel() || vx.shape().len() != 2 {
            let msg = format!("column {:?} does not match {:?}", vc.shape(), vx.shape());
            return self.poison("add_col", msg);
        }
        let m = vx.cols();
        let data = vx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + vc.data()[i / m])
            .collect();
        let out = Tensor::new(vx.shape().to_vec(), data);
        let rg = self.rg(&[x, col]);
        self.push(Op::AddCol(x, col), out, rg)
    }

    /// Numerically stable softmax over each row.
    pub fn row_softmax(&mut self, x: NodeId) -> NodeId {
        if self.error.is_some() {
            return self.dummy();
        }
        let vx = self.value(x);
        let (n, m) = (vx.rows(), vx.cols());
        let mut data = vec![0.0; n * m];
        for r in 0..n {
            let row = &vx.data()[r * m..(r + 1) * m];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..m {
                let e = (row[j] - max).exp();
                data[r * m + j] = e;
                sum += e;
            }
            for j in 0..m {
                data[r * m + j] /= sum;
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), data);
        let rg = self.rg(&[x]);
        self.push(Op::RowSoftmax(x), out, rg)
    }

    /// log(sum(exp(row))) for each row; returns a length-n vector.
    pub fn row_logsumexp(&mut self, x: NodeId) -> NodeId {
        if self.error.is_some() {
            return self.dummy();
        }
        let vx = self.value(x);
        let (n, m) = (vx.rows(), vx.cols());
        let mut data = vec![0.0; n];
        for r in 0..n {
            let row = &vx.data()[r * m..(r + 1) * m];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            data[r] = max + sum.ln();
        }
        let out = Tensor::new(vec![n], data);
        let rg = self.rg(&[x]);
        self.push(Op::RowLogSumExp(x), out, rg)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        if self.error.is_some() {
            return self.dummy();
        }
        let total: f64 = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Op::Sum(x), Tensor::scalar(total), rg)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        if self.error.is_some() {
            return self.dummy();
        }
        let vx = self.value(x);
        let data = vx.data().iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
        let out = Tensor::new(vx.shape().to_vec(), data);
        let rg = self.rg(&[x]);
        self.push(Op::Sigmoid(x), out, rg)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        if self.error.is_some() {
            return self.dummy();
        }
        let vx = self.value(x);
        let data = vx.data().iter().map(|v| v.tanh()).collect();
        let out = Tensor::new(vx.shape().to_vec(), data);
        let rg = self.rg(&[x]);
        self.push(Op::Tanh(x), out, rg)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        if self.error.is_some() {
            return self.dummy();
        }
        let vx = self.value(x);
        let data = vx.data().iter().map(|v| v.max(0.0)).collect();
        let out = Tensor::new(vx.shape().to_vec(), data);
        let rg = self.rg(&[x]);
        self.push(Op::Relu(x), out, rg)
    }

    /// Concatenate 2-D tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        if self.error.is_some() {
            return self.dummy();
        }
        let n = self.value(parts[0]).rows();
        if parts.iter().any(|p| self.value(*p).rows() != n) {
            return self.poison("concat_cols", "row counts differ".into());
        }
        let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; n * total];
        let mut offset = 0;
        for (p, w) in parts.iter().zip(&widths) {
            let v = self.value(*p);
            for r in 0..n {
                data[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&v.data()[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let out = Tensor::new(vec![n, total], data);
        let rg = self.rg(parts);
        self.push(Op::ConcatCols(parts.to_vec()), out, rg)
    }

    /// Concatenate 2-D tensors with equal column counts along rows.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        if self.error.is_some() {
            return self.dummy();
        }
        let d = self.value(parts[0]).cols();
        if parts.iter().any(|p| self.value(*p).cols() != d) {
            return self.poison("concat_rows", "column counts differ".into());
        }
        let rows: usize = parts.iter().map(|p| self.value(*p).rows()).sum();
        let mut data = Vec::with_capacity(rows * d);
        for p in parts {
            data.extend_from_slice(self.value(*p).data());
        }
        let out = Tensor::new(vec![rows, d], data);
        let rg = self.rg(parts);
        self.push(Op::ConcatRows(parts.to_vec()), out, rg)
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        if self.error.is_some() {
            return self.dummy();
        }
        let vx = self.value(x);
        let (n, m) = (vx.rows(), vx.cols());
        if start + len > m {
            let msg = format!("cols [{start}, {}) out of range for {:?}", start + len, vx.shape());
            return self.poison("slice_cols", msg);
        }
        let mut data = Vec::with_capacity(n * len);
        for r in 0..n {
            data.extend_from_slice(&vx.data()[r * m + start..r * m + start + len]);
        }
        let out = Tensor::new(vec![n, len], data);
        let rg = self.rg(&[x]);
        self.push(Op::SliceCols(x, start, len), out, rg)
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        if self.error.is_some() {
            return self.dummy();
        }
        let vx = self.value(x);
        let (n, m) = (vx.rows(), vx.cols());
        if start + len > n {
            let msg = format!("rows [{start}, {}) out of range for {:?}", start + len, vx.shape());
            return self.poison("slice_rows", msg);
        }
        let data = vx.data()[start * m..(start + len) * m].to_vec();
        let out = Tensor::new(vec![len, m], data);
        let rg = self.rg(&[x]);
        self.push(Op::SliceRows(x, start, len), out, rg)
    }

    /// Row lookup: out[i] = table[indices[i]]. Backward scatter-adds.
    pub fn gather_rows(&mut self, table: NodeId, indices: &[usize]) -> NodeId {
        if self.error.is_some() {
            return self.dummy();
        }
        let vt = self.value(table);
        let (v, d) = (vt.rows(), vt.cols());
        if let Some(bad) = indices.iter().find(|i| **i >= v) {
            return self.poison("gather_rows", format!("index {bad} out of range 0..{v}"));
        }
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(&vt.data()[i * d..(i + 1) * d]);
        }
        let out = Tensor::new(vec![indices.len(), d], data);
        let rg = self.rg(&[table]);
        self.push(Op::GatherRows(table, indices.to_vec()), out, rg)
    }

    /// im2col over rows with zero padding: out[i] is the flattened window
    /// of h rows centered at i, so the output is n x (h*d). h must be odd.
    pub fn unfold(&mut self, x: NodeId, h: usize) -> NodeId {
        if self.error.is_some() {
            return self.dummy();
        }
        if h % 2 == 0 || h == 0 {
            return self.poison("unfold", format!("kernel size {h} must be odd"));
        }
        let vx = self.value(x);
        let (n, d) = (vx.rows(), vx.cols());
        let pad = (h - 1) / 2;
        let mut data = vec![0.0; n * h * d];
        for i in 0..n {
            for w in 0..h {
                let r = i as isize + w as isize - pad as isize;
                if r < 0 || r >= n as isize {
                    continue;
                }
                let src = &vx.data()[r as usize * d..(r as usize + 1) * d];
                data[i * h * d + w * d..i * h * d + (w + 1) * d].copy_from_slice(src);
            }
        }
        let out = Tensor::new(vec![n, h * d], data);
        let rg = self.rg(&[x]);
        self.push(Op::Unfold(x, h), out, rg)
    }

    /// Per-row layer normalization with learned gain and bias (both length d).
    pub fn row_layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> NodeId {
        if self.error.is_some() {
            return self.dummy();
        }
        let (vx, vg, vb) = (self.value(x), self.value(gain), self.value(bias));
        let (n, d) = (vx.rows(), vx.cols());
        if vg.numel() != d || vb.numel() != d {
            let msg = format!("gain/bias must be length {d}");
            return self.poison("row_layer_norm", msg);
        }
        let mut data = vec![0.0; n * d];
        for r in 0..n {
            let row = &vx.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                data[r * d + j] = vg.data()[j] * (row[j] - mean) * inv + vb.data()[j];
            }
        }
        let out = Tensor::new(vec![n, d], data);
        let rg = self.rg(&[x, gain, bias]);
        self.push(Op::RowLayerNorm { x, gain, bias, eps }, out, rg)
    }

    /// Sum of elements at the given flat (row-major) indices; repeated
    /// indices count with multiplicity. Produces a scalar.
    pub fn gather_sum(&mut self, x: NodeId, flat_indices: &[usize]) -> NodeId {
        if self.error.is_some() {
            return self.dummy();
        }
        let vx = self.value(x);
        if let Some(bad) = flat_indices.iter().find(|i| **i >= vx.numel()) {
            let msg = format!("index {bad} out of range 0..{}", vx.numel());
            return self.poison("gather_sum", msg);
        }
        let total: f64 = flat_indices.iter().map(|&i| vx.data()[i]).sum();
        let rg = self.rg(&[x]);
        self.push(Op::GatherSum(x, flat_indices.to_vec()), Tensor::scalar(total), rg)
    }

    /// out[i][j] = x[i][idx[i][j]]; every row of idx must have equal length.
    pub fn gather_cols_per_row(&mut self, x: NodeId, idx: &[Vec<usize>]) -> NodeId {
        if self.error.is_some() {
            return self.dummy();
        }
        let vx = self.value(x);
        let (n, m) = (vx.rows(), vx.cols());
        if idx.len() != n {
            return self.poison("gather_cols_per_row", format!("need {n} index rows"));
        }
        let j = idx[0].len();
        if idx.iter().any(|row| row.len() != j || row.iter().any(|c| *c >= m)) {
            return self.poison("gather_cols_per_row", "ragged or out-of-range indices".into());
        }
        let mut data = Vec::with_capacity(n * j);
        for (r, row) in idx.iter().enumerate() {
            for &c in row {
                data.push(vx.data()[r * m + c]);
            }
        }
        let out = Tensor::new(vec![n, j], data);
        let rg = self.rg(&[x]);
        self.push(Op::GatherColsPerRow(x, idx.to_vec()), out, rg)
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> NodeId {
        if self.error.is_some() {
            return self.dummy();
        }
        let vx = self.value(x);
        if shape.iter().product::<usize>() != vx.numel() {
            let msg = format!("cannot reshape {:?} to {:?}", vx.shape(), shape);
            return self.poison("reshape", msg);
        }
        let out = Tensor::new(shape, vx.data().to_vec());
        let rg = self.rg(&[x]);
        self.push(Op::Reshape(x), out, rg)
    }

    // ---- backward ----------------------------------------------------

    fn backward_node(&self, i: usize) -> Vec<(NodeId, Tensor)> {
        let g = self.nodes[i].grad.as_ref().expect("grad present");
        let val = &self.nodes[i].value;
        let mut out = Vec::new();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.clone()));
                let neg = g.data().iter().map(|v| -v).collect();
                out.push((*b, Tensor::new(g.shape().to_vec(), neg)));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let da = g.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
                let db = g.data().iter().zip(va.data()).map(|(x, y)| x * y).collect();
                out.push((*a, Tensor::new(g.shape().to_vec(), da)));
                out.push((*b, Tensor::new(g.shape().to_vec(), db)));
            }
            Op::Scale(a, c) => {
                let da = g.data().iter().map(|v| v * c).collect();
                out.push((*a, Tensor::new(g.shape().to_vec(), da)));
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                // dA = g . B^T
                let mut bt = vec![0.0; n * k];
                for r in 0..k {
                    for c in 0..n {
                        bt[c * k + r] = vb.data()[r * n + c];
                    }
                }
                let da = matmul_raw(g.data(), &bt, m, n, k);
                // dB = A^T . g
                let mut at = vec![0.0; k * m];
                for r in 0..m {
                    for c in 0..k {
                        at[c * m + r] = va.data()[r * k + c];
                    }
                }
                let db = matmul_raw(&at, g.data(), k, m, n);
                out.push((*a, Tensor::new(vec![m, k], da)));
                out.push((*b, Tensor::new(vec![k, n], db)));
            }
            Op::Transpose(a) => {
                let (r, c) = (g.rows(), g.cols());
                let mut da = vec![0.0; r * c];
                for i2 in 0..r {
                    for j in 0..c {
                        da[j * r + i2] = g.data()[i2 * c + j];
                    }
                }
                out.push((*a, Tensor::new(vec![c, r], da)));
            }
            Op::AddBias(x, bias) => {
                out.push((*x, g.clone()));
                let d = self.value(*bias).numel();
                let mut db = vec![0.0; d];
                for (i2, v) in g.data().iter().enumerate() {
                    db[i2 % d] += v;
                }
                out.push((*bias, Tensor::new(vec![d], db)));
            }
            Op::AddCol(x, col) => {
                out.push((*x, g.clone()));
                let n = self.value(*col).numel();
                let m = g.cols();
                let mut dc = vec![0.0; n];
                for (i2, v) in g.data().iter().enumerate() {
                    dc[i2 / m] += v;
                }
                out.push((*col, Tensor::new(vec![n], dc)));
            }
            Op::RowSoftmax(x) => {
                let (n, m) = (val.rows(), val.cols());
                let mut dx = vec![0.0; n * m];
                for r in 0..n {
                    let y = &val.data()[r * m..(r + 1) * m];
                    let gy = &g.data()[r * m..(r + 1) * m];
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for j in 0..m {
                        dx[r * m + j] = y[j] * (gy[j] - dot);
                    }
                }
                out.push((*x, Tensor::new(val.shape().to_vec(), dx)));
            }
            Op::RowLogSumExp(x) => {
                let vx = self.value(*x);
                let (n, m) = (vx.rows(), vx.cols());
                let mut dx = vec![0.0; n * m];
                for r in 0..n {
                    let lse = val.data()[r];
                    for j in 0..m {
                        dx[r * m + j] = g.data()[r] * (vx.data()[r * m + j] - lse).exp();
                    }
                }
                out.push((*x, Tensor::new(vx.shape().to_vec(), dx)));
            }
            Op::Sum(x) => {
                let vx = self.value(*x);
                out.push((*x, Tensor::filled(vx.shape(), g.item())));
            }
            Op::Sigmoid(x) => {
                let dx = g
                    .data()
                    .iter()
                    .zip(val.data())
                    .map(|(gv, y)| gv * y * (1.0 - y))
                    .collect();
                out.push((*x, Tensor::new(val.shape().to_vec(), dx)));
            }
            Op::Tanh(x) => {
                let dx = g
                    .data()
                    .iter()
                    .zip(val.data())
                    .map(|(gv, y)| gv * (1.0 - y * y))
                    .collect();
                out.push((*x, Tensor::new(val.shape().to_vec(), dx)));
            }
            Op::Relu(x) => {
                let vx = self.value(*x);
                let dx = g
                    .data()
                    .iter()
                    .zip(vx.data())
                    .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                out.push((*x, Tensor::new(val.shape().to_vec(), dx)));
            }
            Op::ConcatCols(parts) => {
                let n = val.rows();
                let total = val.cols();
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    let mut dp = vec![0.0; n * w];
                    for r in 0..n {
                        dp[r * w..(r + 1) * w]
                            .copy_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                    }
                    out.push((*p, Tensor::new(vec![n, w], dp)));
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let d = val.cols();
                let mut offset = 0;
                for p in parts {
                    let r = self.value(*p).rows();
                    let dp = g.data()[offset * d..(offset + r) * d].to_vec();
                    out.push((*p, Tensor::new(vec![r, d], dp)));
                    offset += r;
                }
            }
            Op::SliceCols(x, start, len) => {
                let vx = self.value(*x);
                let (n, m) = (vx.rows(), vx.cols());
                let mut dx = vec![0.0; n * m];
                for r in 0..n {
                    dx[r * m + start..r * m + start + len]
                        .copy_from_slice(&g.data()[r * len..(r + 1) * len]);
                }
                out.push((*x, Tensor::new(vec![n, m], dx)));
            }
            Op::SliceRows(x, start, _len) => {
                let vx = self.value(*x);
                let (n, m) = (vx.rows(), vx.cols());
                let mut dx = vec![0.0; n * m];
                dx[start * m..start * m + g.numel()].copy_from_slice(g.data());
                out.push((*x, Tensor::new(vec![n, m], dx)));
            }
            Op::GatherRows(table, indices) => {
                let vt = self.value(*table);
                let (v, d) = (vt.rows(), vt.cols());
                let mut dt = vec![0.0; v * d];
                for (r, &i2) in indices.iter().enumerate() {
                    for j in 0..d {
                        dt[i2 * d + j] += g.data()[r * d + j];
                    }
                }
                out.push((*table, Tensor::new(vec![v, d], dt)));
            }
            Op::Unfold(x, h) => {
                let vx = self.value(*x);
                let (n, d) = (vx.rows(), vx.cols());
                let pad = (h - 1) / 2;
                let mut dx = vec![0.0; n * d];
                for i2 in 0..n {
                    for w in 0..*h {
                        let r = i2 as isize + w as isize - pad as isize;
                        if r < 0 || r >= n as isize {
                            continue;
                        }
                        let r = r as usize;
                        for j in 0..d {
                            dx[r * d + j] += g.data()[i2 * h * d + w * d + j];
                        }
                    }
                }
                out.push((*x, Tensor::new(vec![n, d], dx)));
            }
            Op::RowLayerNorm { x, gain, bias, eps } => {
                let (vx, vg) = (self.value(*x), self.value(*gain));
                let (n, d) = (vx.rows(), vx.cols());
                let mut dx = vec![0.0; n * d];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                for r in 0..n {
                    let row = &vx.data()[r * d..(r + 1) * d];
                    let gy = &g.data()[r * d..(r + 1) * d];
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                    for j in 0..d {
                        dgain[j] += gy[j] * xhat[j];
                        dbias[j] += gy[j];
                    }
                    let dxhat: Vec<f64> = (0..d).map(|j| gy[j] * vg.data()[j]).collect();
                    let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
                    let mean_dxhat_xhat =
                        dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        dx[r * d + j] =
                            (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat) * inv;
                    }
                }
                out.push((*x, Tensor::new(vec![n, d], dx)));
                out.push((*gain, Tensor::new(vec![d], dgain)));
                out.push((*bias, Tensor::new(vec![d], dbias)));
            }
            Op::GatherSum(x, flat_indices) => {
                let vx = self.value(*x);
                let mut dx = vec![0.0; vx.numel()];
                let gv = g.item();
                for &i2 in flat_indices {
                    dx[i2] += gv;
                }
                out.push((*x, Tensor::new(vx.shape().to_vec(), dx)));
            }
            Op::GatherColsPerRow(x, idx) => {
                let vx = self.value(*x);
                let (n, m) = (vx.rows(), vx.cols());
                let j = idx[0].len();
                let mut dx = vec![0.0; n * m];
                for (r, row) in idx.iter().enumerate() {
                    for (jj, &c) in row.iter().enumerate() {
                        dx[r * m + c] += g.data()[r * j + jj];
                    }
                }
                out.push((*x, Tensor::new(vec![n, m], dx)));
            }
            Op::Reshape(x) => {
                let vx = self.value(*x);
                out.push((*x, Tensor::new(vx.shape().to_vec(), g.data().to_vec())));
            }
        }
        out
    }
}
