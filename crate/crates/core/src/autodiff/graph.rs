use std::collections::HashMap;

use super::matrix::{check_same, gemm_nn, gemm_nt, gemm_tn, softmax_into};
use super::{AutodiffError, Matrix, ParamGrads, ParamId, ParamStore};

/// Epsilon added to the variance inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    MatMulT(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Transpose(NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    Relu(NodeId),
    Dropout {
        x: NodeId,
        mask: Vec<f64>,
    },
    Embedding {
        table: NodeId,
        ids: Vec<usize>,
    },
    StopGrad,
    SliceCols {
        x: NodeId,
        start: usize,
    },
    ConcatCols(Vec<NodeId>),
    SegmentPick {
        x: NodeId,
        ids: Vec<usize>,
        segment_of_row: Vec<usize>,
    },
    Sum(NodeId),
    SoftCrossEntropy {
        log_probs: NodeId,
        target: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::MatMulT(..) => "matmul_t",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Transpose(_) => "transpose",
            Op::Softmax(_) => "row_softmax",
            Op::LogSoftmax(_) => "row_log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Relu(_) => "relu",
            Op::Dropout { .. } => "dropout",
            Op::Embedding { .. } => "embedding_lookup",
            Op::StopGrad => "stop_gradient",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(_) => "concat_cols",
            Op::SegmentPick { .. } => "segment_pick",
            Op::Sum(_) => "sum",
            Op::SoftCrossEntropy { .. } => "soft_cross_entropy",
        }
    }
}

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Dropout key for a training-mode graph. Masks are a pure function of
/// `(seed, step, op index within the graph, element index)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DropoutKey {
    pub seed: u64,
    pub step: u64,
}

/// A tape of primitive ops recorded during one forward pass.
///
/// The graph borrows the parameter store; `backward` consumes the graph and
/// returns the gradients, which the caller adds to the store.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, NodeId>,
    dropout: Option<DropoutKey>,
    dropout_ops: u64,
}

impl<'p> Graph<'p> {
    /// Evaluation mode: dropout is the identity.
    pub fn new(params: &'p ParamStore) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            dropout: None,
            dropout_ops: 0,
        }
    }

    pub fn training(params: &'p ParamStore, key: DropoutKey) -> Self {
        Graph {
            dropout: Some(key),
            ..Graph::new(params)
        }
    }

    pub fn is_training(&self) -> bool {
        self.dropout.is_some()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        match self.nodes[id.0].op {
            Op::Param(pid) => self.params.value(pid),
            _ => &self.nodes[id.0].value,
        }
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Result<NodeId, AutodiffError> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite(op.name()));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&id| self.nodes[id.0].requires_grad)
    }

    /// A constant input. Constants never receive gradients and may hold
    /// non-finite guard values.
    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Constant,
            requires_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf referencing a stored parameter; repeated calls share one node.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(&node) = self.param_nodes.get(&id) {
            return node;
        }
        self.nodes.push(Node {
            value: Matrix::zeros(0, 0),
            op: Op::Param(id),
            requires_grad: self.params.get(id).trainable,
        });
        let node = NodeId(self.nodes.len() - 1);
        self.param_nodes.insert(id, node);
        node
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        self.push(value, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`, the layout used by linear layers with `(out, in)` weights.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let value = self.value(a).matmul_t(self.value(b))?;
        let rg = self.rg(&[a, b]);
        self.push(value, Op::MatMulT(a, b), rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Add(a, b), rg)
    }

    /// Adds a `1 x cols` row to every row of `x`.
    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> Result<NodeId, AutodiffError> {
        let (xv, rv) = (self.value(x), self.value(row));
        if rv.rows() != 1 || rv.cols() != xv.cols() {
            return Err(AutodiffError::Shape(format!(
                "add_row: {:?} + {:?}",
                xv.shape(),
                rv.shape()
            )));
        }
        let mut value = xv.clone();
        for r in 0..value.rows() {
            for (o, b) in value.row_mut(r).iter_mut().zip(rv.data()) {
                *o += b;
            }
        }
        let rg = self.rg(&[x, row]);
        self.push(value, Op::AddRow(x, row), rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        check_same(av, bv, "mul")?;
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let value = Matrix::from_vec(av.rows(), av.cols(), data)?;
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId, AutodiffError> {
        let value = self.value(x).scale(factor);
        let rg = self.rg(&[x]);
        self.push(value, Op::Scale(x, factor), rg)
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        let value = self.value(x).transpose();
        let rg = self.rg(&[x]);
        self.push(value, Op::Transpose(x), rg)
    }

    pub fn row_softmax(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        let xv = self.value(x);
        let mut value = Matrix::zeros(xv.rows(), xv.cols());
        for r in 0..xv.rows() {
            softmax_into(xv.row(r), value.row_mut(r));
        }
        let rg = self.rg(&[x]);
        self.push(value, Op::Softmax(x), rg)
    }

    pub fn row_log_softmax(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        let xv = self.value(x);
        let mut value = xv.clone();
        for r in 0..xv.rows() {
            let lse = super::matrix::log_sum_exp(xv.row(r));
            value.row_mut(r).iter_mut().for_each(|v| *v -= lse);
        }
        let rg = self.rg(&[x]);
        self.push(value, Op::LogSoftmax(x), rg)
    }

    /// Row-wise layer normalization with affine `gain` and `bias` rows.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId, AutodiffError> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let cols = xv.cols();
        if gv.shape() != (1, cols) || bv.shape() != (1, cols) {
            return Err(AutodiffError::Shape(format!(
                "layer_norm: x {:?}, gain {:?}, bias {:?}",
                xv.shape(),
                gv.shape(),
                bv.shape()
            )));
        }
        let mut xhat = Matrix::zeros(xv.rows(), cols);
        let mut value = Matrix::zeros(xv.rows(), cols);
        let mut inv_std = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let istd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(istd);
            for c in 0..cols {
                let h = (row[c] - mean) * istd;
                xhat.set(r, c, h);
                value.set(r, c, h * gv.data()[c] + bv.data()[c]);
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        let mut value = self.value(x).clone();
        value.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        let rg = self.rg(&[x]);
        self.push(value, Op::Relu(x), rg)
    }

    /// Inverted dropout; the identity in evaluation mode or when `p == 0`.
    pub fn dropout(&mut self, x: NodeId, p: f64) -> Result<NodeId, AutodiffError> {
        if !(0.0..1.0).contains(&p) {
            return Err(AutodiffError::InvalidArgument(format!("dropout p = {p}")));
        }
        let Some(key) = self.dropout else {
            return Ok(x);
        };
        if p == 0.0 {
            return Ok(x);
        }
        let op_index = self.dropout_ops;
        self.dropout_ops += 1;
        let keep = 1.0 / (1.0 - p);
        let xv = self.value(x);
        let mask: Vec<f64> = (0..xv.len())
            .map(|i| {
                if unit_uniform(key, op_index, i as u64) < p {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        let data = xv.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Matrix::from_vec(xv.rows(), xv.cols(), data)?;
        let rg = self.rg(&[x]);
        self.push(value, Op::Dropout { x, mask }, rg)
    }

    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId, AutodiffError> {
        let tv = self.value(table);
        let mut value = Matrix::zeros(ids.len(), tv.cols());
        for (r, &id) in ids.iter().enumerate() {
            if id >= tv.rows() {
                return Err(AutodiffError::Shape(format!(
                    "embedding id {id} out of range for {} rows",
                    tv.rows()
                )));
            }
            value.row_mut(r).copy_from_slice(tv.row(id));
        }
        let rg = self.rg(&[table]);
        self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        )
    }

    /// Passes the value through and blocks all gradient flow to `x`'s ancestors.
    pub fn stop_gradient(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).clone();
        self.nodes.push(Node {
            value,
            op: Op::StopGrad,
            requires_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId, AutodiffError> {
        let xv = self.value(x);
        if start + len > xv.cols() {
            return Err(AutodiffError::Shape(format!(
                "slice_cols {start}..{} of {} columns",
                start + len,
                xv.cols()
            )));
        }
        let mut value = Matrix::zeros(xv.rows(), len);
        for r in 0..xv.rows() {
            value.row_mut(r).copy_from_slice(&xv.row(r)[start..start + len]);
        }
        let rg = self.rg(&[x]);
        self.push(value, Op::SliceCols { x, start }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, AutodiffError> {
        let rows = parts
            .first()
            .map(|&p| self.value(p).rows())
            .ok_or_else(|| AutodiffError::Shape("concat of nothing".into()))?;
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(AutodiffError::Shape("concat_cols: row counts differ".into()));
        }
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut value = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut offset = 0;
            for &p in parts {
                let pv = self.value(p);
                value.row_mut(r)[offset..offset + pv.cols()].copy_from_slice(pv.row(r));
                offset += pv.cols();
            }
        }
        let rg = self.rg(parts);
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    /// Gathers `x[r, ids[r]]` and sums consecutive row segments, giving a
    /// `1 x segments.len()` row. Used for teacher-forced sequence scores.
    pub fn segment_pick_sum(
        &mut self,
        x: NodeId,
        ids: &[usize],
        segments: &[usize],
    ) -> Result<NodeId, AutodiffError> {
        let xv = self.value(x);
        if ids.len() != xv.rows() || segments.iter().sum::<usize>() != xv.rows() {
            return Err(AutodiffError::Shape(format!(
                "segment_pick_sum: {} rows, {} ids, segments {:?}",
                xv.rows(),
                ids.len(),
                segments
            )));
        }
        let mut segment_of_row = Vec::with_capacity(ids.len());
        for (s, &len) in segments.iter().enumerate() {
            segment_of_row.extend(std::iter::repeat_n(s, len));
        }
        let mut value = Matrix::zeros(1, segments.len());
        for (r, (&id, &s)) in ids.iter().zip(&segment_of_row).enumerate() {
            if id >= xv.cols() {
                return Err(AutodiffError::Shape(format!("pick id {id} out of range")));
            }
            value.data_mut()[s] += xv.get(r, id);
        }
        let rg = self.rg(&[x]);
        self.push(
            value,
            Op::SegmentPick {
                x,
                ids: ids.to_vec(),
                segment_of_row,
            },
            rg,
        )
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        let value = Matrix::scalar(self.value(x).data().iter().sum());
        let rg = self.rg(&[x]);
        self.push(value, Op::Sum(x), rg)
    }

    /// `-Σ target[i] · log_probs[i]`. `target` is a constant probability
    /// vector; entries with zero target contribute nothing, even against a
    /// `-∞` log-probability.
    pub fn soft_cross_entropy(&mut self, target: &[f64], log_probs: NodeId) -> Result<NodeId, AutodiffError> {
        let lp = self.value(log_probs);
        if lp.len() != target.len() {
            return Err(AutodiffError::Shape(format!(
                "soft_cross_entropy: target of length {} vs {} log-probabilities",
                target.len(),
                lp.len()
            )));
        }
        let total: f64 = target.iter().sum();
        if (total - 1.0).abs() > 1e-9 || target.iter().any(|&t| !(t >= 0.0)) {
            return Err(AutodiffError::InvalidArgument(format!(
                "target is not a probability vector (sum {total})"
            )));
        }
        let loss: f64 = target
            .iter()
            .zip(lp.data())
            .filter(|(t, _)| **t != 0.0)
            .map(|(t, l)| -t * l)
            .sum();
        let rg = self.rg(&[log_probs]);
        self.push(
            Matrix::scalar(loss),
            Op::SoftCrossEntropy {
                log_probs,
                target: target.to_vec(),
            },
            rg,
        )
    }

    /// Reverse pass from a scalar loss; consumes the tape.
    pub fn backward(self, loss: NodeId) -> Result<ParamGrads, AutodiffError> {
        if self.value(loss).shape() != (1, 1) {
            return Err(AutodiffError::Shape(format!(
                "backward from a non-scalar {:?}",
                self.value(loss).shape()
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(AutodiffError::Detached);
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));
        let mut out = ParamGrads::with_capacity(self.params.len());

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads, &mut out);
        }
        Ok(out)
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>], out: &mut ParamGrads) {
        let wants = |id: NodeId| self.nodes[id.0].requires_grad;
        let send = |grads: &mut [Option<Matrix>], id: NodeId, delta: Matrix| {
            match &mut grads[id.0] {
                Some(acc) => acc.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Constant | Op::StopGrad => {}
            Op::Param(pid) => out.add(*pid, g),
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if wants(*a) {
                    let mut ga = Matrix::zeros(av.rows(), av.cols());
                    gemm_nt(g, bv, &mut ga);
                    send(grads, *a, ga);
                }
                if wants(*b) {
                    let mut gb = Matrix::zeros(bv.rows(), bv.cols());
                    gemm_tn(av, g, &mut gb);
                    send(grads, *b, gb);
                }
            }
            Op::MatMulT(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if wants(*a) {
                    let mut ga = Matrix::zeros(av.rows(), av.cols());
                    gemm_nn(g, bv, &mut ga);
                    send(grads, *a, ga);
                }
                if wants(*b) {
                    let mut gb = Matrix::zeros(bv.rows(), bv.cols());
                    gemm_tn(g, av, &mut gb);
                    send(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    send(grads, *a, g.clone());
                }
                if wants(*b) {
                    send(grads, *b, g.clone());
                }
            }
            Op::AddRow(x, row) => {
                if wants(*x) {
                    send(grads, *x, g.clone());
                }
                if wants(*row) {
                    send(grads, *row, col_sums(g));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if wants(*a) {
                    send(grads, *a, hadamard(g, bv));
                }
                if wants(*b) {
                    send(grads, *b, hadamard(g, av));
                }
            }
            Op::Scale(x, factor) => send(grads, *x, g.scale(*factor)),
            Op::Transpose(x) => send(grads, *x, g.transpose()),
            Op::Softmax(x) => {
                let y = &node.value;
                let mut gx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let inner: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (o, (yv, gv)) in gx.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                        *o = yv * (gv - inner);
                    }
                }
                send(grads, *x, gx);
            }
            Op::LogSoftmax(x) => {
                let y = &node.value;
                let mut gx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let total: f64 = gr.iter().sum();
                    for (o, (yv, gv)) in gx.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                        *o = gv - yv.exp() * total;
                    }
                }
                send(grads, *x, gx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gain);
                let cols = xhat.cols();
                if wants(*gain) {
                    send(grads, *gain, col_sums(&hadamard(g, xhat)));
                }
                if wants(*bias) {
                    send(grads, *bias, col_sums(g));
                }
                if wants(*x) {
                    let mut gx = Matrix::zeros(xhat.rows(), cols);
                    for r in 0..xhat.rows() {
                        let gh: Vec<f64> = g.row(r).iter().zip(gv.data()).map(|(a, b)| a * b).collect();
                        let xr = xhat.row(r);
                        let mean_gh = gh.iter().sum::<f64>() / cols as f64;
                        let mean_ghx = gh.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                        for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                            *o = inv_std[r] * (gh[c] - mean_gh - xr[c] * mean_ghx);
                        }
                    }
                    send(grads, *x, gx);
                }
            }
            Op::Relu(x) => {
                let y = &node.value;
                let data = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(gv, yv)| if *yv > 0.0 { *gv } else { 0.0 })
                    .collect();
                send(grads, *x, Matrix::from_vec(g.rows(), g.cols(), data).expect("shape"));
            }
            Op::Dropout { x, mask } => {
                let data = g.data().iter().zip(mask).map(|(a, m)| a * m).collect();
                send(grads, *x, Matrix::from_vec(g.rows(), g.cols(), data).expect("shape"));
            }
            Op::Embedding { table, ids } => {
                let tv = self.value(*table);
                let mut gt = Matrix::zeros(tv.rows(), tv.cols());
                for (r, &id) in ids.iter().enumerate() {
                    for (o, v) in gt.row_mut(id).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                send(grads, *table, gt);
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let mut gx = Matrix::zeros(xv.rows(), xv.cols());
                for r in 0..g.rows() {
                    gx.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                send(grads, *x, gx);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let cols = self.value(p).cols();
                    if wants(p) {
                        let mut gp = Matrix::zeros(g.rows(), cols);
                        for r in 0..g.rows() {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + cols]);
                        }
                        send(grads, p, gp);
                    }
                    offset += cols;
                }
            }
            Op::SegmentPick {
                x,
                ids,
                segment_of_row,
            } => {
                let xv = self.value(*x);
                let mut gx = Matrix::zeros(xv.rows(), xv.cols());
                for (r, (&id, &s)) in ids.iter().zip(segment_of_row).enumerate() {
                    gx.set(r, id, g.data()[s]);
                }
                send(grads, *x, gx);
            }
            Op::Sum(x) => {
                let xv = self.value(*x);
                send(grads, *x, Matrix::filled(xv.rows(), xv.cols(), g.item()));
            }
            Op::SoftCrossEntropy { log_probs, target } => {
                let lp = self.value(*log_probs);
                let data = target.iter().map(|t| -t * g.item()).collect();
                send(
                    grads,
                    *log_probs,
                    Matrix::from_vec(lp.rows(), lp.cols(), data).expect("shape"),
                );
            }
        }
    }
}

fn col_sums(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, m.cols());
    for r in 0..m.rows() {
        for (o, v) in out.data_mut().iter_mut().zip(m.row(r)) {
            *o += v;
        }
    }
    out
}

fn hadamard(a: &Matrix, b: &Matrix) -> Matrix {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Matrix::from_vec(a.rows(), a.cols(), data).expect("shape")
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Counter-based uniform draw in `[0, 1)`.
fn unit_uniform(key: DropoutKey, op_index: u64, element: u64) -> f64 {
    let h = splitmix64(
        key.seed ^ splitmix64(key.step ^ splitmix64(op_index ^ splitmix64(element))),
    );
    (h >> 11) as f64 / (1u64 << 53) as f64
}
