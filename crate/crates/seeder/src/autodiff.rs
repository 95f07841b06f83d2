//! Minimal reverse-mode differentiation over dense 2-D tensors.
//!
//! Values are computed eagerly in f64 on an append-only [`Tape`]; the tape
//! order is the topological order, so [`Tape::backward`] is a single
//! reverse sweep. Model storage stays f32 at rest (checkpoints, embedding
//! files); compute runs in f64 so the finite-difference gradient checks
//! hold at tight tolerances without a separate precision mode.
//!
//! Segment ops take a per-row segment-id vector; rows of a segment need
//! not be contiguous. Empty segments produce zero rows (sums) or simply
//! no rows (softmax) — never NaN.

use crate::error::{Error, Result};

/// Dense row-major matrix; vectors are `n x 1`, scalars `1 x 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor data length mismatch");
        Tensor { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn scalar(x: f64) -> Self {
        Tensor::new(1, 1, vec![x])
    }

    pub fn from_rows_f32(rows: &[&[f32]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            data.extend(row.iter().map(|&x| x as f64));
        }
        Tensor::new(r, c, data)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul,
    /// `bias` marks the rhs as a `1 x c` row broadcast over the lhs rows.
    Add { bias: bool },
    Sub,
    /// `col` marks the rhs as an `m x 1` column broadcast over lhs columns.
    Mul { col: bool },
    Scale(f64),
    AddScalar,
    Relu,
    Sigmoid,
    Softplus,
    Log,
    LayerNorm { xhat: Vec<f64>, inv_std: Vec<f64> },
    SegmentSum { seg: Vec<usize> },
    SegmentSoftmax { seg: Vec<usize> },
    ConcatCols,
    GatherRows { idx: Vec<usize> },
    BroadcastRows,
    RowSum,
    SumAll,
    /// Log-probability of drawing `order` sequentially without replacement
    /// from a softmax over the input logits.
    SeqTopkLogprob { order: Vec<usize> },
}

struct Node {
    op: Op,
    inputs: Vec<TensorId>,
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

/// Append-only record of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, inputs: Vec<TensorId>, value: Tensor) -> TensorId {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            op,
            inputs,
            value,
            grad: None,
            requires_grad,
        });
        TensorId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last backward target w.r.t. this node, if tracked.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> TensorId {
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: vec![],
            value: t,
            grad: None,
            requires_grad,
        });
        TensorId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> TensorId {
        self.leaf(t, false)
    }

    fn shape_err(&self, what: &str, a: TensorId, b: Option<TensorId>) -> Error {
        let ta = self.value(a);
        match b {
            Some(b) => {
                let tb = self.value(b);
                Error::Shape(format!(
                    "{what}: lhs {}x{}, rhs {}x{}",
                    ta.rows, ta.cols, tb.rows, tb.cols
                ))
            }
            None => Error::Shape(format!("{what}: got {}x{}", ta.rows, ta.cols)),
        }
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols != tb.rows {
            return Err(self.shape_err("matmul", a, Some(b)));
        }
        let (m, k, n) = (ta.rows, ta.cols, tb.cols);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let x = ta.data[i * k + p];
                if x != 0.0 {
                    let brow = &tb.data[p * n..(p + 1) * n];
                    let orow = &mut out[i * n..(i + 1) * n];
                    for (o, &y) in orow.iter_mut().zip(brow) {
                        *o += x * y;
                    }
                }
            }
        }
        Ok(self.push(Op::MatMul, vec![a, b], Tensor::new(m, n, out)))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rows == tb.rows && ta.cols == tb.cols {
            let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect();
            let t = Tensor::new(ta.rows, ta.cols, data);
            Ok(self.push(Op::Add { bias: false }, vec![a, b], t))
        } else if tb.rows == 1 && tb.cols == ta.cols {
            let mut data = ta.data.clone();
            for r in 0..ta.rows {
                for c in 0..ta.cols {
                    data[r * ta.cols + c] += tb.data[c];
                }
            }
            let t = Tensor::new(ta.rows, ta.cols, data);
            Ok(self.push(Op::Add { bias: true }, vec![a, b], t))
        } else {
            Err(self.shape_err("add", a, Some(b)))
        }
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rows != tb.rows || ta.cols != tb.cols {
            return Err(self.shape_err("sub", a, Some(b)));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x - y).collect();
        let t = Tensor::new(ta.rows, ta.cols, data);
        Ok(self.push(Op::Sub, vec![a, b], t))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rows == tb.rows && ta.cols == tb.cols {
            let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
            let t = Tensor::new(ta.rows, ta.cols, data);
            Ok(self.push(Op::Mul { col: false }, vec![a, b], t))
        } else if tb.rows == ta.rows && tb.cols == 1 {
            let mut data = ta.data.clone();
            for r in 0..ta.rows {
                let s = tb.data[r];
                for c in 0..ta.cols {
                    data[r * ta.cols + c] *= s;
                }
            }
            let t = Tensor::new(ta.rows, ta.cols, data);
            Ok(self.push(Op::Mul { col: true }, vec![a, b], t))
        } else {
            Err(self.shape_err("mul", a, Some(b)))
        }
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let ta = self.value(a);
        let t = Tensor::new(ta.rows, ta.cols, ta.data.iter().map(|x| x * c).collect());
        self.push(Op::Scale(c), vec![a], t)
    }

    pub fn add_scalar(&mut self, a: TensorId, c: f64) -> TensorId {
        let ta = self.value(a);
        let t = Tensor::new(ta.rows, ta.cols, ta.data.iter().map(|x| x + c).collect());
        self.push(Op::AddScalar, vec![a], t)
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let ta = self.value(a);
        let t = Tensor::new(ta.rows, ta.cols, ta.data.iter().map(|&x| x.max(0.0)).collect());
        self.push(Op::Relu, vec![a], t)
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        let ta = self.value(a);
        let t = Tensor::new(
            ta.rows,
            ta.cols,
            ta.data.iter().map(|&x| sigmoid_stable(x)).collect(),
        );
        self.push(Op::Sigmoid, vec![a], t)
    }

    pub fn softplus(&mut self, a: TensorId) -> TensorId {
        let ta = self.value(a);
        let t = Tensor::new(
            ta.rows,
            ta.cols,
            ta.data.iter().map(|&x| softplus_stable(x)).collect(),
        );
        self.push(Op::Softplus, vec![a], t)
    }

    pub fn log(&mut self, a: TensorId) -> TensorId {
        let ta = self.value(a);
        let t = Tensor::new(ta.rows, ta.cols, ta.data.iter().map(|x| x.ln()).collect());
        self.push(Op::Log, vec![a], t)
    }

    /// Per-row standardization with learned scale and shift:
    /// `gamma * (x - mean) / sqrt(var + eps) + beta`.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> Result<TensorId> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let d = tx.cols;
        if tg.rows != 1 || tg.cols != d || tb.rows != 1 || tb.cols != d {
            return Err(self.shape_err("layer_norm scale/shift", x, Some(gamma)));
        }
        let m = tx.rows;
        let mut xhat = vec![0.0; m * d];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * d];
        for r in 0..m {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..d {
                let h = (row[c] - mean) * is;
                xhat[r * d + c] = h;
                out[r * d + c] = tg.data[c] * h + tb.data[c];
            }
        }
        let t = Tensor::new(m, d, out);
        Ok(self.push(
            Op::LayerNorm { xhat, inv_std },
            vec![x, gamma, beta],
            t,
        ))
    }

    /// Sum rows by segment id; empty segments yield zero rows.
    pub fn segment_sum(&mut self, x: TensorId, seg: &[usize], n_segments: usize) -> Result<TensorId> {
        let tx = self.value(x);
        if seg.len() != tx.rows {
            return Err(Error::Shape(format!(
                "segment_sum: {} segment ids for {} rows",
                seg.len(),
                tx.rows
            )));
        }
        if let Some(&bad) = seg.iter().find(|&&s| s >= n_segments) {
            return Err(Error::Argument(format!(
                "segment id {bad} out of range 0..{n_segments}"
            )));
        }
        let d = tx.cols;
        let mut out = vec![0.0; n_segments * d];
        for (r, &s) in seg.iter().enumerate() {
            let src = tx.row(r);
            let dst = &mut out[s * d..(s + 1) * d];
            for (o, &v) in dst.iter_mut().zip(src) {
                *o += v;
            }
        }
        let t = Tensor::new(n_segments, d, out);
        Ok(self.push(Op::SegmentSum { seg: seg.to_vec() }, vec![x], t))
    }

    /// Softmax over rows sharing a segment id. Input must be a column
    /// vector of logits.
    pub fn segment_softmax(&mut self, x: TensorId, seg: &[usize]) -> Result<TensorId> {
        let tx = self.value(x);
        if tx.cols != 1 {
            return Err(self.shape_err("segment_softmax expects a column", x, None));
        }
        if seg.len() != tx.rows {
            return Err(Error::Shape(format!(
                "segment_softmax: {} segment ids for {} rows",
                seg.len(),
                tx.rows
            )));
        }
        let n_seg = seg.iter().copied().max().map_or(0, |m| m + 1);
        let mut seg_max = vec![f64::NEG_INFINITY; n_seg];
        for (r, &s) in seg.iter().enumerate() {
            seg_max[s] = seg_max[s].max(tx.data[r]);
        }
        let mut seg_sum = vec![0.0; n_seg];
        let mut out = vec![0.0; tx.rows];
        for (r, &s) in seg.iter().enumerate() {
            let e = (tx.data[r] - seg_max[s]).exp();
            out[r] = e;
            seg_sum[s] += e;
        }
        for (r, &s) in seg.iter().enumerate() {
            out[r] /= seg_sum[s];
        }
        let t = Tensor::new(tx.rows, 1, out);
        Ok(self.push(Op::SegmentSoftmax { seg: seg.to_vec() }, vec![x], t))
    }

    pub fn concat_cols(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rows != tb.rows {
            return Err(self.shape_err("concat_cols", a, Some(b)));
        }
        let (m, ca, cb) = (ta.rows, ta.cols, tb.cols);
        let mut data = Vec::with_capacity(m * (ca + cb));
        for r in 0..m {
            data.extend_from_slice(ta.row(r));
            data.extend_from_slice(tb.row(r));
        }
        let t = Tensor::new(m, ca + cb, data);
        Ok(self.push(Op::ConcatCols, vec![a, b], t))
    }

    pub fn gather_rows(&mut self, x: TensorId, idx: &[usize]) -> Result<TensorId> {
        let tx = self.value(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= tx.rows) {
            return Err(Error::Argument(format!(
                "gather_rows index {bad} out of range 0..{}",
                tx.rows
            )));
        }
        let d = tx.cols;
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(tx.row(i));
        }
        let t = Tensor::new(idx.len(), d, data);
        Ok(self.push(Op::GatherRows { idx: idx.to_vec() }, vec![x], t))
    }

    /// Repeat a `1 x d` row `n` times.
    pub fn broadcast_rows(&mut self, x: TensorId, n: usize) -> Result<TensorId> {
        let tx = self.value(x);
        if tx.rows != 1 {
            return Err(self.shape_err("broadcast_rows expects one row", x, None));
        }
        let d = tx.cols;
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            data.extend_from_slice(&tx.data);
        }
        let t = Tensor::new(n, d, data);
        Ok(self.push(Op::BroadcastRows, vec![x], t))
    }

    pub fn row_sum(&mut self, x: TensorId) -> TensorId {
        let tx = self.value(x);
        let data: Vec<f64> = (0..tx.rows).map(|r| tx.row(r).iter().sum()).collect();
        let t = Tensor::new(tx.rows, 1, data);
        self.push(Op::RowSum, vec![x], t)
    }

    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let tx = self.value(x);
        let t = Tensor::scalar(tx.data.iter().sum());
        self.push(Op::SumAll, vec![x], t)
    }

    /// Log-probability of selecting `order` (in that sequence) by repeated
    /// softmax sampling without replacement from the given logits column.
    pub fn seq_topk_logprob(&mut self, logits: TensorId, order: &[usize]) -> Result<TensorId> {
        let tl = self.value(logits);
        if tl.cols != 1 {
            return Err(self.shape_err("seq_topk_logprob expects a column", logits, None));
        }
        let n = tl.rows;
        let mut picked = vec![false; n];
        for &c in order {
            if c >= n {
                return Err(Error::Argument(format!(
                    "selection index {c} out of range 0..{n}"
                )));
            }
            if picked[c] {
                return Err(Error::Argument(format!("selection index {c} repeated")));
            }
            picked[c] = true;
        }
        let mut lp = 0.0;
        let mut removed = vec![false; n];
        for &c in order {
            lp += tl.data[c] - log_sum_exp_masked(&tl.data, &removed);
            removed[c] = true;
        }
        let t = Tensor::scalar(lp);
        Ok(self.push(
            Op::SeqTopkLogprob {
                order: order.to_vec(),
            },
            vec![logits],
            t,
        ))
    }

    /// Inverted-dropout mask constant: entries are 0 with probability
    /// `rate`, else `1/(1-rate)`. Replaying the same mask replays the
    /// forward pass bit for bit.
    pub fn dropout_mask<R: rand::Rng>(rows: usize, cols: usize, rate: f64, rng: &mut R) -> Tensor {
        assert!((0.0..1.0).contains(&rate), "dropout rate must be in [0,1)");
        let keep = 1.0 - rate;
        let data = (0..rows * cols)
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { 1.0 / keep })
            .collect();
        Tensor::new(rows, cols, data)
    }

    /// Reverse sweep populating gradients of every grad-requiring node.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        {
            let lt = self.value(loss);
            if lt.rows != 1 || lt.cols != 1 {
                return Err(Error::Argument(format!(
                    "backward target must be scalar, got {}x{}",
                    lt.rows, lt.cols
                )));
            }
        }
        for node in self.nodes.iter_mut() {
            node.grad = None;
        }
        if !self.nodes[loss.0].requires_grad {
            // nothing upstream to differentiate
            self.nodes[loss.0].grad = Some(vec![1.0]);
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let g_out = self.nodes[i].grad.clone().unwrap();
            let inputs = self.nodes[i].inputs.clone();
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.propagate(i, &op, &inputs, &g_out);
            self.nodes[i].op = op;
        }
        Ok(())
    }

    fn accumulate(&mut self, target: TensorId, add: impl FnOnce(&mut [f64])) {
        let node = &mut self.nodes[target.0];
        if !node.requires_grad {
            return;
        }
        let len = node.value.data.len();
        let grad = node.grad.get_or_insert_with(|| vec![0.0; len]);
        add(grad);
    }

    fn propagate(&mut self, node_idx: usize, op: &Op, inputs: &[TensorId], g: &[f64]) {
        match op {
            Op::Leaf => {}
            Op::MatMul => {
                let (a, b) = (inputs[0], inputs[1]);
                let (ta, tb) = (self.value(a).clone(), self.value(b).clone());
                let (m, k, n) = (ta.rows, ta.cols, tb.cols);
                // dA = g . B^T
                self.accumulate(a, |ga| {
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += g[i * n + j] * tb.data[p * n + j];
                            }
                            ga[i * k + p] += acc;
                        }
                    }
                });
                // dB = A^T . g
                self.accumulate(b, |gb| {
                    for p in 0..k {
                        for j in 0..n {
                            let mut acc = 0.0;
                            for i in 0..m {
                                acc += ta.data[i * k + p] * g[i * n + j];
                            }
                            gb[p * n + j] += acc;
                        }
                    }
                });
            }
            Op::Add { bias } => {
                let (a, b) = (inputs[0], inputs[1]);
                self.accumulate(a, |ga| {
                    for (x, &y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                });
                if *bias {
                    let cols = self.value(b).cols;
                    self.accumulate(b, |gb| {
                        for (i, &y) in g.iter().enumerate() {
                            gb[i % cols] += y;
                        }
                    });
                } else {
                    self.accumulate(b, |gb| {
                        for (x, &y) in gb.iter_mut().zip(g) {
                            *x += y;
                        }
                    });
                }
            }
            Op::Sub => {
                let (a, b) = (inputs[0], inputs[1]);
                self.accumulate(a, |ga| {
                    for (x, &y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                });
                self.accumulate(b, |gb| {
                    for (x, &y) in gb.iter_mut().zip(g) {
                        *x -= y;
                    }
                });
            }
            Op::Mul { col } => {
                let (a, b) = (inputs[0], inputs[1]);
                let (ta, tb) = (self.value(a).clone(), self.value(b).clone());
                if *col {
                    let cols = ta.cols;
                    self.accumulate(a, |ga| {
                        for r in 0..ta.rows {
                            let s = tb.data[r];
                            for c in 0..cols {
                                ga[r * cols + c] += g[r * cols + c] * s;
                            }
                        }
                    });
                    self.accumulate(b, |gb| {
                        for r in 0..ta.rows {
                            let mut acc = 0.0;
                            for c in 0..cols {
                                acc += g[r * cols + c] * ta.data[r * cols + c];
                            }
                            gb[r] += acc;
                        }
                    });
                } else {
                    self.accumulate(a, |ga| {
                        for i in 0..g.len() {
                            ga[i] += g[i] * tb.data[i];
                        }
                    });
                    self.accumulate(b, |gb| {
                        for i in 0..g.len() {
                            gb[i] += g[i] * ta.data[i];
                        }
                    });
                }
            }
            Op::Scale(c) => {
                let c = *c;
                self.accumulate(inputs[0], |ga| {
                    for (x, &y) in ga.iter_mut().zip(g) {
                        *x += c * y;
                    }
                });
            }
            Op::AddScalar => {
                self.accumulate(inputs[0], |ga| {
                    for (x, &y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                });
            }
            Op::Relu => {
                let tx = self.value(inputs[0]).clone();
                self.accumulate(inputs[0], |ga| {
                    for i in 0..g.len() {
                        if tx.data[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                });
            }
            Op::Sigmoid => {
                let ty = self.nodes[node_idx].value.clone();
                self.accumulate(inputs[0], |ga| {
                    for i in 0..g.len() {
                        let y = ty.data[i];
                        ga[i] += g[i] * y * (1.0 - y);
                    }
                });
            }
            Op::Softplus => {
                let tx = self.value(inputs[0]).clone();
                self.accumulate(inputs[0], |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * sigmoid_stable(tx.data[i]);
                    }
                });
            }
            Op::Log => {
                let tx = self.value(inputs[0]).clone();
                self.accumulate(inputs[0], |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] / tx.data[i];
                    }
                });
            }
            Op::LayerNorm { xhat, inv_std } => {
                let (x, gamma, beta) = (inputs[0], inputs[1], inputs[2]);
                let d = self.value(x).cols;
                let m = self.value(x).rows;
                let tg = self.value(gamma).clone();
                let xhat = xhat.clone();
                let inv_std = inv_std.clone();
                self.accumulate(gamma, |gg| {
                    for r in 0..m {
                        for c in 0..d {
                            gg[c] += g[r * d + c] * xhat[r * d + c];
                        }
                    }
                });
                self.accumulate(beta, |gb| {
                    for r in 0..m {
                        for c in 0..d {
                            gb[c] += g[r * d + c];
                        }
                    }
                });
                self.accumulate(x, |gx| {
                    for r in 0..m {
                        // dy = g * gamma for this row
                        let mut mean_dy = 0.0;
                        let mut mean_dy_xhat = 0.0;
                        for c in 0..d {
                            let dy = g[r * d + c] * tg.data[c];
                            mean_dy += dy;
                            mean_dy_xhat += dy * xhat[r * d + c];
                        }
                        mean_dy /= d as f64;
                        mean_dy_xhat /= d as f64;
                        for c in 0..d {
                            let dy = g[r * d + c] * tg.data[c];
                            gx[r * d + c] +=
                                (dy - mean_dy - xhat[r * d + c] * mean_dy_xhat) * inv_std[r];
                        }
                    }
                });
            }
            Op::SegmentSum { seg } => {
                let seg = seg.clone();
                let d = self.value(inputs[0]).cols;
                self.accumulate(inputs[0], |gx| {
                    for (r, &s) in seg.iter().enumerate() {
                        for c in 0..d {
                            gx[r * d + c] += g[s * d + c];
                        }
                    }
                });
            }
            Op::SegmentSoftmax { seg } => {
                let seg = seg.clone();
                let ty = self.nodes[node_idx].value.clone();
                let n_seg = seg.iter().copied().max().map_or(0, |m| m + 1);
                let mut seg_dot = vec![0.0; n_seg];
                for (r, &s) in seg.iter().enumerate() {
                    seg_dot[s] += g[r] * ty.data[r];
                }
                self.accumulate(inputs[0], |gx| {
                    for (r, &s) in seg.iter().enumerate() {
                        gx[r] += ty.data[r] * (g[r] - seg_dot[s]);
                    }
                });
            }
            Op::ConcatCols => {
                let (a, b) = (inputs[0], inputs[1]);
                let (m, ca) = (self.value(a).rows, self.value(a).cols);
                let cb = self.value(b).cols;
                self.accumulate(a, |ga| {
                    for r in 0..m {
                        for c in 0..ca {
                            ga[r * ca + c] += g[r * (ca + cb) + c];
                        }
                    }
                });
                self.accumulate(b, |gb| {
                    for r in 0..m {
                        for c in 0..cb {
                            gb[r * cb + c] += g[r * (ca + cb) + ca + c];
                        }
                    }
                });
            }
            Op::GatherRows { idx } => {
                let idx = idx.clone();
                let d = self.value(inputs[0]).cols;
                self.accumulate(inputs[0], |gx| {
                    for (r, &i) in idx.iter().enumerate() {
                        for c in 0..d {
                            gx[i * d + c] += g[r * d + c];
                        }
                    }
                });
            }
            Op::BroadcastRows => {
                let d = self.value(inputs[0]).cols;
                self.accumulate(inputs[0], |gx| {
                    for (i, &y) in g.iter().enumerate() {
                        gx[i % d] += y;
                    }
                });
            }
            Op::RowSum => {
                let d = self.value(inputs[0]).cols;
                self.accumulate(inputs[0], |gx| {
                    for r in 0..g.len() {
                        for c in 0..d {
                            gx[r * d + c] += g[r];
                        }
                    }
                });
            }
            Op::SumAll => {
                self.accumulate(inputs[0], |gx| {
                    for x in gx.iter_mut() {
                        *x += g[0];
                    }
                });
            }
            Op::SeqTopkLogprob { order } => {
                let order = order.clone();
                let tl = self.value(inputs[0]).clone();
                let n = tl.rows;
                let gs = g[0];
                self.accumulate(inputs[0], |gx| {
                    let mut removed = vec![false; n];
                    for &c in &order {
                        gx[c] += gs;
                        let lse = log_sum_exp_masked(&tl.data, &removed);
                        for j in 0..n {
                            if !removed[j] {
                                gx[j] -= gs * (tl.data[j] - lse).exp();
                            }
                        }
                        removed[c] = true;
                    }
                });
            }
        }
    }
}

fn sigmoid_stable(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus_stable(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn log_sum_exp_masked(x: &[f64], removed: &[bool]) -> f64 {
    let mut m = f64::NEG_INFINITY;
    for (i, &v) in x.iter().enumerate() {
        if !removed[i] && v > m {
            m = v;
        }
    }
    let mut s = 0.0;
    for (i, &v) in x.iter().enumerate() {
        if !removed[i] {
            s += (v - m).exp();
        }
    }
    m + s.ln()
}

/// Central finite-difference gradient check.
///
/// `build` must construct the loss from leaf tensors created in order from
/// `params`. Returns the maximum unit-floored relative error
/// `|g - fd| / max(1, |g|, |fd|)` over all parameter elements.
pub fn finite_diff_check<F>(params: &[Tensor], build: F, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[TensorId]) -> Result<TensorId>,
{
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = ps.iter().map(|p| tape.leaf(p.clone(), true)).collect();
        let loss = build(&mut tape, &ids)?;
        Ok(tape.value(loss).item())
    };

    // analytic gradients
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = params.iter().map(|p| tape.leaf(p.clone(), true)).collect();
    let loss = build(&mut tape, &ids)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(params)
        .map(|(&id, p)| {
            tape.grad(id)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; p.data.len()])
        })
        .collect();

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        for ei in 0..p.data.len() {
            let orig = work[pi].data[ei];
            work[pi].data[ei] = orig + h;
            let up = eval(&work)?;
            work[pi].data[ei] = orig - h;
            let down = eval(&work)?;
            work[pi].data[ei] = orig;
            let fd = (up - down) / (2.0 * h);
            let g = analytic[pi][ei];
            let err = (g - fd).abs() / g.abs().max(fd.abs()).max(1.0);
            if err > worst {
                worst = err;
            }
        }
    }
    Ok(worst)
}
