//! Reverse-mode gradient engine.
//!
//! Operations are recorded on a [`Tape`] during the forward pass; nodes are
//! appended in execution order, so a single reverse sweep visits each node
//! exactly once and accumulates gradients additively across shared uses.
//!
//! All ops treat tensors as row-major 2-D views (rows = product of leading
//! extents). Block-batched ops take explicit block geometry instead of
//! relying on reshapes.

use crate::error::{Error, Result};
use crate::tensor::{matmul_acc, matmul_at_acc, matmul_bt_acc, Tensor};

pub const PRED_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf,
    /// Row lookup into a table node: out[i, :] = table[ids[i], :].
    Gather { table: NodeId, ids: Vec<u32> },
    /// 2-D matrix product.
    Matmul { a: NodeId, b: NodeId },
    /// Block-batched matmul: `blocks` independent [m x k] * [k x n] products
    /// laid out contiguously. With `transpose_b`, b blocks are [n x k].
    Bmm {
        a: NodeId,
        b: NodeId,
        blocks: usize,
        m: usize,
        k: usize,
        n: usize,
        transpose_b: bool,
    },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    MulElem { a: NodeId, b: NodeId },
    /// [R x n] + bias[n] broadcast over rows.
    AddRowBroadcast { a: NodeId, bias: NodeId },
    Scale { a: NodeId, c: f64 },
    Relu { a: NodeId },
    Sigmoid { a: NodeId },
    /// Horizontal concatenation of equal-row-count parts.
    ConcatCols { parts: Vec<NodeId>, widths: Vec<usize> },
    /// Each input row repeated `times` consecutive times.
    RepeatRows { a: NodeId, times: usize },
    /// Row softmax of (logits + bias); bias entries are finite or -inf.
    MaskedSoftmax { logits: NodeId, bias: NodeId },
    /// Pass kept entries through, emit -inf elsewhere. Gradients flow only
    /// to kept entries; the selection itself is not differentiated.
    Suppress {
        scores: NodeId,
        keep: Vec<bool>,
        eligible: Vec<bool>,
    },
    /// Zero out rows whose mask entry is 0.
    MulRowMask { a: NodeId, mask: Vec<f64> },
    /// Mean over valid rows within each consecutive block of `block` rows;
    /// blocks with no valid row produce a zero row.
    BlockMeanValidRows {
        a: NodeId,
        block: usize,
        valid: Vec<bool>,
    },
    /// out[r] = flags[r] ? a[r] : b[r], rowwise.
    SelectRowsByFlag {
        a: NodeId,
        b: NodeId,
        flags: Vec<bool>,
    },
    /// Mean binary cross-entropy against fixed labels, with prediction
    /// clamping to [PRED_CLAMP, 1 - PRED_CLAMP].
    BceLoss { preds: NodeId, labels: Vec<f64> },
    SumAll { a: NodeId },
    MeanAll { a: NodeId },
    /// Same data, new shape.
    Reshape { a: NodeId },
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Vec<f64>>,
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last backward() loss w.r.t. this node.
    pub fn grad(&self, id: NodeId) -> &[f64] {
        &self.grads[id.0]
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn gather(&mut self, table: NodeId, ids: &[u32]) -> Result<NodeId> {
        let t = self.value(table);
        if t.shape().len() != 2 {
            return Err(Error::DimensionMismatch {
                op: "gather",
                lhs: t.shape().to_vec(),
                rhs: vec![ids.len()],
            });
        }
        let (v, d) = (t.shape()[0], t.shape()[1]);
        let mut out = vec![0.0; ids.len() * d];
        for (i, &id) in ids.iter().enumerate() {
            let id = id as usize;
            assert!(id < v, "gather id {id} out of table rows {v}");
            out[i * d..(i + 1) * d].copy_from_slice(&t.data()[id * d..(id + 1) * d]);
        }
        let value = Tensor::from_vec(&[ids.len(), d], out)?;
        Ok(self.push(value, Op::Gather { table, ids: ids.to_vec() }))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = (ta.rows_2d(), ta.cols_2d());
        let (kb, n) = (tb.rows_2d(), tb.cols_2d());
        if k != kb {
            return Err(Error::DimensionMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(ta.data(), tb.data(), &mut out, m, k, n);
        let value = Tensor::from_vec(&[m, n], out)?;
        Ok(self.push(value, Op::Matmul { a, b }))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn bmm(
        &mut self,
        a: NodeId,
        b: NodeId,
        blocks: usize,
        m: usize,
        k: usize,
        n: usize,
        transpose_b: bool,
    ) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        let b_block = if transpose_b { n * k } else { k * n };
        if ta.len() != blocks * m * k || tb.len() != blocks * b_block {
            return Err(Error::DimensionMismatch {
                op: "bmm",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; blocks * m * n];
        for blk in 0..blocks {
            let ab = &ta.data()[blk * m * k..(blk + 1) * m * k];
            let bb = &tb.data()[blk * b_block..(blk + 1) * b_block];
            let cb = &mut out[blk * m * n..(blk + 1) * m * n];
            if transpose_b {
                matmul_bt_acc(ab, bb, cb, m, k, n);
            } else {
                matmul_acc(ab, bb, cb, m, k, n);
            }
        }
        let value = Tensor::from_vec(&[blocks * m, n], out)?;
        Ok(self.push(value, Op::Bmm { a, b, blocks, m, k, n, transpose_b }))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::DimensionMismatch {
                op,
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::from_vec(self.value(a).shape(), out)?;
        Ok(self.push(value, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let value = Tensor::from_vec(self.value(a).shape(), out)?;
        Ok(self.push(value, Op::Sub { a, b }))
    }

    pub fn mul_elem(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul_elem", a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::from_vec(self.value(a).shape(), out)?;
        Ok(self.push(value, Op::MulElem { a, b }))
    }

    pub fn add_row_broadcast(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(bias));
        let (r, n) = (ta.rows_2d(), ta.cols_2d());
        if tb.len() != n {
            return Err(Error::DimensionMismatch {
                op: "add_row_broadcast",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut out = ta.data().to_vec();
        for row in 0..r {
            for j in 0..n {
                out[row * n + j] += tb.data()[j];
            }
        }
        let value = Tensor::from_vec(ta.shape(), out)?;
        Ok(self.push(value, Op::AddRowBroadcast { a, bias }))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let out: Vec<f64> = self.value(a).data().iter().map(|x| x * c).collect();
        let value = Tensor::from_vec(self.value(a).shape(), out).unwrap();
        self.push(value, Op::Scale { a, c })
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let out: Vec<f64> = self.value(a).data().iter().map(|x| x.max(0.0)).collect();
        let value = Tensor::from_vec(self.value(a).shape(), out).unwrap();
        self.push(value, Op::Relu { a })
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .map(|x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        let value = Tensor::from_vec(self.value(a).shape(), out).unwrap();
        self.push(value, Op::Sigmoid { a })
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        assert!(!parts.is_empty(), "concat_cols needs at least one part");
        let rows = self.value(parts[0]).rows_2d();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            if self.value(p).rows_2d() != rows {
                return Err(Error::DimensionMismatch {
                    op: "concat_cols",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
            widths.push(self.value(p).cols_2d());
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..rows {
                out[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let value = Tensor::from_vec(&[rows, total], out)?;
        Ok(self.push(value, Op::ConcatCols { parts: parts.to_vec(), widths }))
    }

    pub fn repeat_rows(&mut self, a: NodeId, times: usize) -> NodeId {
        let t = self.value(a);
        let (r, n) = (t.rows_2d(), t.cols_2d());
        let mut out = vec![0.0; r * times * n];
        for row in 0..r {
            let src = &t.data()[row * n..(row + 1) * n];
            for t_i in 0..times {
                let dst = (row * times + t_i) * n;
                out[dst..dst + n].copy_from_slice(src);
            }
        }
        let value = Tensor::from_vec(&[r * times, n], out).unwrap();
        self.push(value, Op::RepeatRows { a, times })
    }

    /// Row softmax of logits + bias. Positions with bias = -inf get exactly
    /// zero weight; a row with no finite position is a degenerate mask.
    pub fn masked_softmax(&mut self, logits: NodeId, bias: NodeId) -> Result<NodeId> {
        self.same_shape("masked_softmax", logits, bias)?;
        let (tl, tb) = (self.value(logits), self.value(bias));
        let (rows, n) = (tl.rows_2d(), tl.cols_2d());
        let mut out = vec![0.0; rows * n];
        for r in 0..rows {
            let l = &tl.data()[r * n..(r + 1) * n];
            let b = &tb.data()[r * n..(r + 1) * n];
            let mut rowmax = f64::NEG_INFINITY;
            for j in 0..n {
                let v = l[j] + b[j];
                if v.is_nan() {
                    return Err(Error::Invariant(format!(
                        "masked_softmax: NaN at row {r} col {j}"
                    )));
                }
                rowmax = rowmax.max(v);
            }
            if rowmax == f64::NEG_INFINITY {
                return Err(Error::DegenerateMask { row: r });
            }
            let o = &mut out[r * n..(r + 1) * n];
            let mut sum = 0.0;
            for j in 0..n {
                let e = (l[j] + b[j] - rowmax).exp();
                o[j] = e;
                sum += e;
            }
            for v in o.iter_mut() {
                *v /= sum;
            }
        }
        let value = Tensor::from_vec(tl.shape(), out)?;
        Ok(self.push(value, Op::MaskedSoftmax { logits, bias }))
    }

    /// Keep selected entries, suppress the rest to -inf. `eligible` marks
    /// positions that took part in the selection (valid, non-padded); it is
    /// retained for kink diagnostics only.
    pub fn suppress(&mut self, scores: NodeId, keep: Vec<bool>, eligible: Vec<bool>) -> Result<NodeId> {
        let t = self.value(scores);
        if keep.len() != t.len() || eligible.len() != t.len() {
            return Err(Error::DimensionMismatch {
                op: "suppress",
                lhs: t.shape().to_vec(),
                rhs: vec![keep.len()],
            });
        }
        let out: Vec<f64> = t
            .data()
            .iter()
            .zip(&keep)
            .map(|(&v, &k)| if k { v } else { f64::NEG_INFINITY })
            .collect();
        let value = Tensor::from_vec(t.shape(), out)?;
        Ok(self.push(value, Op::Suppress { scores, keep, eligible }))
    }

    pub fn mul_row_mask(&mut self, a: NodeId, mask: &[f64]) -> Result<NodeId> {
        let t = self.value(a);
        let (rows, n) = (t.rows_2d(), t.cols_2d());
        if mask.len() != rows {
            return Err(Error::DimensionMismatch {
                op: "mul_row_mask",
                lhs: t.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let mut out = t.data().to_vec();
        for r in 0..rows {
            if mask[r] != 1.0 {
                for v in &mut out[r * n..(r + 1) * n] {
                    *v *= mask[r];
                }
            }
        }
        let value = Tensor::from_vec(t.shape(), out)?;
        Ok(self.push(value, Op::MulRowMask { a, mask: mask.to_vec() }))
    }

    /// Mean over valid rows within each block of `block` consecutive rows.
    /// Divides by the valid count, never by the block size; empty blocks
    /// yield zero rows.
    pub fn block_mean_valid_rows(&mut self, a: NodeId, block: usize, valid: &[bool]) -> Result<NodeId> {
        let t = self.value(a);
        let (rows, n) = (t.rows_2d(), t.cols_2d());
        if block == 0 || rows % block != 0 || valid.len() != rows {
            return Err(Error::DimensionMismatch {
                op: "block_mean_valid_rows",
                lhs: t.shape().to_vec(),
                rhs: vec![block, valid.len()],
            });
        }
        let blocks = rows / block;
        let mut out = vec![0.0; blocks * n];
        for blk in 0..blocks {
            let mut count = 0usize;
            for r in blk * block..(blk + 1) * block {
                if valid[r] {
                    count += 1;
                    for j in 0..n {
                        out[blk * n + j] += t.data()[r * n + j];
                    }
                }
            }
            if count > 0 {
                for j in 0..n {
                    out[blk * n + j] /= count as f64;
                }
            }
        }
        let value = Tensor::from_vec(&[blocks, n], out)?;
        Ok(self.push(value, Op::BlockMeanValidRows { a, block, valid: valid.to_vec() }))
    }

    pub fn select_rows_by_flag(&mut self, a: NodeId, b: NodeId, flags: &[bool]) -> Result<NodeId> {
        self.same_shape("select_rows_by_flag", a, b)?;
        let t = self.value(a);
        let (rows, n) = (t.rows_2d(), t.cols_2d());
        if flags.len() != rows {
            return Err(Error::DimensionMismatch {
                op: "select_rows_by_flag",
                lhs: t.shape().to_vec(),
                rhs: vec![flags.len()],
            });
        }
        let mut out = vec![0.0; rows * n];
        for r in 0..rows {
            let src = if flags[r] { self.value(a) } else { self.value(b) };
            out[r * n..(r + 1) * n].copy_from_slice(&src.data()[r * n..(r + 1) * n]);
        }
        let value = Tensor::from_vec(t.shape(), out)?;
        Ok(self.push(value, Op::SelectRowsByFlag { a, b, flags: flags.to_vec() }))
    }

    /// Mean negative log-likelihood of binary labels under predictions,
    /// clamping predictions away from 0 and 1 for log stability.
    pub fn bce_loss(&mut self, preds: NodeId, labels: &[f64]) -> Result<NodeId> {
        let t = self.value(preds);
        if labels.len() != t.len() {
            return Err(Error::DimensionMismatch {
                op: "bce_loss",
                lhs: t.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let n = labels.len() as f64;
        let mut loss = 0.0;
        for (&p, &y) in t.data().iter().zip(labels) {
            let pc = p.clamp(PRED_CLAMP, 1.0 - PRED_CLAMP);
            loss -= y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
        }
        loss /= n;
        let value = Tensor::scalar(loss);
        Ok(self.push(value, Op::BceLoss { preds, labels: labels.to_vec() }))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll { a })
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let s: f64 = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::MeanAll { a })
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(value, Op::Reshape { a }))
    }

    /// Reverse sweep from a scalar loss node. Fills per-node gradients;
    /// read them back with [`Tape::grad`].
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::TapeEmpty);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss {
                shape: self.value(loss).shape().to_vec(),
            });
        }
        self.grads = self.nodes.iter().map(|n| vec![0.0; n.value.len()]).collect();
        self.grads[loss.0][0] = 1.0;

        let Tape { nodes, grads } = self;
        for idx in (0..=loss.0).rev() {
            let g = std::mem::take(&mut grads[idx]);
            if g.iter().all(|&v| v == 0.0) {
                grads[idx] = g;
                continue;
            }
            match &nodes[idx].op {
                Op::Leaf => {}
                Op::Gather { table, ids } => {
                    let d = nodes[idx].value.cols_2d();
                    let dt = &mut grads[table.0];
                    for (i, &id) in ids.iter().enumerate() {
                        let base = id as usize * d;
                        for j in 0..d {
                            dt[base + j] += g[i * d + j];
                        }
                    }
                }
                Op::Matmul { a, b } => {
                    let m = nodes[a.0].value.rows_2d();
                    let k = nodes[a.0].value.cols_2d();
                    let n = nodes[b.0].value.cols_2d();
                    matmul_bt_acc(&g, nodes[b.0].value.data(), &mut grads[a.0], m, n, k);
                    matmul_at_acc(nodes[a.0].value.data(), &g, &mut grads[b.0], m, k, n);
                }
                Op::Bmm { a, b, blocks, m, k, n, transpose_b } => {
                    let (blocks, m, k, n, tb) = (*blocks, *m, *k, *n, *transpose_b);
                    let b_block = if tb { n * k } else { k * n };
                    for blk in 0..blocks {
                        let gb = &g[blk * m * n..(blk + 1) * m * n];
                        let bb = &nodes[b.0].value.data()[blk * b_block..(blk + 1) * b_block];
                        let da = &mut grads[a.0][blk * m * k..(blk + 1) * m * k];
                        if tb {
                            // c = a * b^T: da += g * b, db += g^T * a
                            matmul_acc(gb, bb, da, m, n, k);
                        } else {
                            matmul_bt_acc(gb, bb, da, m, n, k);
                        }
                        let ab = &nodes[a.0].value.data()[blk * m * k..(blk + 1) * m * k];
                        let db = &mut grads[b.0][blk * b_block..(blk + 1) * b_block];
                        if tb {
                            matmul_at_acc(gb, ab, db, m, n, k);
                        } else {
                            matmul_at_acc(ab, gb, db, m, k, n);
                        }
                    }
                }
                Op::Add { a, b } => {
                    for (d, &gv) in grads[a.0].iter_mut().zip(&g) {
                        *d += gv;
                    }
                    for (d, &gv) in grads[b.0].iter_mut().zip(&g) {
                        *d += gv;
                    }
                }
                Op::Sub { a, b } => {
                    for (d, &gv) in grads[a.0].iter_mut().zip(&g) {
                        *d += gv;
                    }
                    for (d, &gv) in grads[b.0].iter_mut().zip(&g) {
                        *d -= gv;
                    }
                }
                Op::MulElem { a, b } => {
                    for ((d, &gv), &bv) in grads[a.0].iter_mut().zip(&g).zip(nodes[b.0].value.data()) {
                        *d += gv * bv;
                    }
                    for ((d, &gv), &av) in grads[b.0].iter_mut().zip(&g).zip(nodes[a.0].value.data()) {
                        *d += gv * av;
                    }
                }
                Op::AddRowBroadcast { a, bias } => {
                    let n = nodes[bias.0].value.len();
                    let rows = g.len() / n;
                    for (d, &gv) in grads[a.0].iter_mut().zip(&g) {
                        *d += gv;
                    }
                    let db = &mut grads[bias.0];
                    for r in 0..rows {
                        for j in 0..n {
                            db[j] += g[r * n + j];
                        }
                    }
                }
                Op::Scale { a, c } => {
                    let c = *c;
                    for (d, &gv) in grads[a.0].iter_mut().zip(&g) {
                        *d += c * gv;
                    }
                }
                Op::Relu { a } => {
                    for ((d, &gv), &av) in grads[a.0].iter_mut().zip(&g).zip(nodes[a.0].value.data()) {
                        if av > 0.0 {
                            *d += gv;
                        }
                    }
                }
                Op::Sigmoid { a } => {
                    for ((d, &gv), &y) in grads[a.0].iter_mut().zip(&g).zip(nodes[idx].value.data()) {
                        *d += gv * y * (1.0 - y);
                    }
                }
                Op::ConcatCols { parts, widths } => {
                    let total: usize = widths.iter().sum();
                    let rows = g.len() / total;
                    let mut offset = 0;
                    for (p, w) in parts.iter().zip(widths) {
                        let dp = &mut grads[p.0];
                        for r in 0..rows {
                            for j in 0..*w {
                                dp[r * w + j] += g[r * total + offset + j];
                            }
                        }
                        offset += w;
                    }
                }
                Op::RepeatRows { a, times } => {
                    let times = *times;
                    let n = nodes[a.0].value.cols_2d();
                    let rows = nodes[a.0].value.rows_2d();
                    let da = &mut grads[a.0];
                    for r in 0..rows {
                        for t_i in 0..times {
                            let src = ((r * times) + t_i) * n;
                            for j in 0..n {
                                da[r * n + j] += g[src + j];
                            }
                        }
                    }
                }
                Op::MaskedSoftmax { logits, bias } => {
                    let out = nodes[idx].value.data();
                    let n = nodes[idx].value.cols_2d();
                    let rows = nodes[idx].value.rows_2d();
                    let bval = nodes[bias.0].value.data();
                    // dl feeds both inputs; recomputed for the bias side to
                    // keep the two mutable grad borrows sequential.
                    for r in 0..rows {
                        let mut dot = 0.0;
                        for j in 0..n {
                            dot += g[r * n + j] * out[r * n + j];
                        }
                        let dl_row: Vec<f64> = (0..n)
                            .map(|j| out[r * n + j] * (g[r * n + j] - dot))
                            .collect();
                        let dlog = &mut grads[logits.0];
                        for j in 0..n {
                            dlog[r * n + j] += dl_row[j];
                        }
                        let dbias = &mut grads[bias.0];
                        for j in 0..n {
                            if bval[r * n + j].is_finite() {
                                dbias[r * n + j] += dl_row[j];
                            }
                        }
                    }
                }
                Op::Suppress { scores, keep, .. } => {
                    for ((d, &gv), &k) in grads[scores.0].iter_mut().zip(&g).zip(keep) {
                        if k {
                            *d += gv;
                        }
                    }
                }
                Op::MulRowMask { a, mask } => {
                    let n = nodes[a.0].value.cols_2d();
                    let da = &mut grads[a.0];
                    for (r, &mv) in mask.iter().enumerate() {
                        if mv != 0.0 {
                            for j in 0..n {
                                da[r * n + j] += mv * g[r * n + j];
                            }
                        }
                    }
                }
                Op::BlockMeanValidRows { a, block, valid } => {
                    let block = *block;
                    let n = nodes[idx].value.cols_2d();
                    let blocks = nodes[idx].value.rows_2d();
                    let da = &mut grads[a.0];
                    for blk in 0..blocks {
                        let count = valid[blk * block..(blk + 1) * block]
                            .iter()
                            .filter(|&&v| v)
                            .count();
                        if count == 0 {
                            continue;
                        }
                        let inv = 1.0 / count as f64;
                        for r in blk * block..(blk + 1) * block {
                            if valid[r] {
                                for j in 0..n {
                                    da[r * n + j] += g[blk * n + j] * inv;
                                }
                            }
                        }
                    }
                }
                Op::SelectRowsByFlag { a, b, flags } => {
                    let (a, b) = (*a, *b);
                    let n = nodes[idx].value.cols_2d();
                    for (r, &f) in flags.iter().enumerate() {
                        let target = if f { a } else { b };
                        let dt = &mut grads[target.0];
                        for j in 0..n {
                            dt[r * n + j] += g[r * n + j];
                        }
                    }
                }
                Op::BceLoss { preds, labels } => {
                    let pval = nodes[preds.0].value.data();
                    let n = labels.len() as f64;
                    let g0 = g[0];
                    let dp = &mut grads[preds.0];
                    for (i, (&p, &y)) in pval.iter().zip(labels).enumerate() {
                        if p > PRED_CLAMP && p < 1.0 - PRED_CLAMP {
                            dp[i] += g0 * (p - y) / (p * (1.0 - p)) / n;
                        }
                    }
                }
                Op::SumAll { a } => {
                    let g0 = g[0];
                    for d in grads[a.0].iter_mut() {
                        *d += g0;
                    }
                }
                Op::MeanAll { a } => {
                    let g0 = g[0] / nodes[a.0].value.len() as f64;
                    for d in grads[a.0].iter_mut() {
                        *d += g0;
                    }
                }
                Op::Reshape { a } => {
                    for (d, &gv) in grads[a.0].iter_mut().zip(&g) {
                        *d += gv;
                    }
                }
            }
            grads[idx] = g;
        }
        Ok(())
    }

    /// Smallest |pre-activation| over all rectifier nodes. Finite-difference
    /// checks reject points where this is below the perturbation size.
    pub fn min_abs_relu_preactivation(&self) -> f64 {
        let mut min = f64::INFINITY;
        for node in &self.nodes {
            if let Op::Relu { a } = node.op {
                for &v in self.nodes[a.0].value.data() {
                    min = min.min(v.abs());
                }
            }
        }
        min
    }

    /// Smallest per-row margin between the weakest kept score and the
    /// strongest dropped eligible score across all suppress nodes.
    pub fn min_suppress_margin(&self) -> f64 {
        let mut min = f64::INFINITY;
        for node in &self.nodes {
            if let Op::Suppress { scores, keep, eligible } = &node.op {
                let t = &self.nodes[scores.0].value;
                let (rows, n) = (t.rows_2d(), t.cols_2d());
                for r in 0..rows {
                    let mut kept_min = f64::INFINITY;
                    let mut dropped_max = f64::NEG_INFINITY;
                    for j in 0..n {
                        let i = r * n + j;
                        if !eligible[i] {
                            continue;
                        }
                        let v = t.data()[i];
                        if keep[i] {
                            kept_min = kept_min.min(v);
                        } else {
                            dropped_max = dropped_max.max(v);
                        }
                    }
                    if dropped_max > f64::NEG_INFINITY && kept_min < f64::INFINITY {
                        min = min.min(kept_min - dropped_max);
                    }
                }
            }
        }
        min
    }
}
