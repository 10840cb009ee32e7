//! Context Interaction Unit: relevance scoring with top-k irrelevance
//! suppression, followed by biased cross-attention with a residual
//! connection.
//!
//! The same unit serves both context passes: explicit (each clicked item
//! attending over its exposure page) and implicit (the target attending
//! over the pre-ranking candidates). Everything is expressed over blocks so
//! one code path handles a single instance, one sample's S clicks, or a
//! whole batch.

use crate::error::{Error, Result};
use crate::mlp::Mlp;
use crate::params::{Init, ParamId, ParamSet, TapeBinding};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct CiuParams {
    /// Scores [anchor; item; anchor-item; anchor*item] -> scalar relevance.
    pub relevance_mlp: Mlp,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    /// Top-k width: how many relevant items survive suppression.
    pub k: usize,
    pub dim: usize,
}

impl CiuParams {
    /// Register one unit under `prefix`. The output projection starts at
    /// zero so the unit begins as the identity map through its residual.
    pub fn register(
        set: &mut ParamSet,
        prefix: &str,
        dim: usize,
        k: usize,
        relevance_hidden: &[usize],
    ) -> CiuParams {
        assert!(k >= 1, "top-k width must be at least 1");
        let relevance_mlp = Mlp::register(
            set,
            &format!("{prefix}.relevance_mlp"),
            4 * dim,
            relevance_hidden,
            1,
        );
        let glorot = Init::Glorot { fan_in: dim, fan_out: dim };
        CiuParams {
            relevance_mlp,
            w_q: set.register(&format!("{prefix}.w_q"), &[dim, dim], glorot),
            w_k: set.register(&format!("{prefix}.w_k"), &[dim, dim], glorot),
            w_v: set.register(&format!("{prefix}.w_v"), &[dim, dim], glorot),
            w_o: set.register(&format!("{prefix}.w_o"), &[dim, dim], Init::Zero),
            k,
            dim,
        }
    }
}

/// Indices of the k highest-scoring valid positions, ties broken by lower
/// index. Errors when no position is valid.
pub fn topk_indices(scores: &[f64], valid: &[bool], k: usize) -> Result<Vec<usize>> {
    let mut ranked: Vec<usize> = Vec::with_capacity(scores.len());
    for (i, (&s, &v)) in scores.iter().zip(valid).enumerate() {
        if v {
            if !s.is_finite() {
                return Err(Error::Invariant(format!("non-finite relevance score {s} at {i}")));
            }
            ranked.push(i);
        }
    }
    if ranked.is_empty() {
        return Err(Error::DegeneratePage);
    }
    ranked.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    ranked.truncate(k.min(ranked.len()));
    Ok(ranked)
}

/// Raw relevance scores next to their suppressed form: exactly
/// min(k, valid) finite entries, the rest -inf.
#[derive(Clone, Debug)]
pub struct RelevanceScores {
    pub raw: Tensor,
    pub suppressed: Tensor,
}

/// Keep the k highest-scoring valid positions of a score vector; every
/// other position, including padding, becomes -inf.
pub fn topk_suppress(scores: &Tensor, valid: &[bool], k: usize) -> Result<Tensor> {
    let kept = topk_indices(scores.data(), valid, k)?;
    let mut out = vec![f64::NEG_INFINITY; scores.len()];
    for &i in &kept {
        out[i] = scores.data()[i];
    }
    Tensor::from_vec(scores.shape(), out)
}

/// Relevance of each item to its block's anchor:
/// MLP([anchor; item; anchor - item; anchor * item]) per item.
/// anchors: [N x D], items: [N*per_block x D]; returns [N x per_block].
pub fn relevance_scores_blocks(
    tape: &mut Tape,
    binding: &TapeBinding,
    params: &CiuParams,
    anchors: NodeId,
    items: NodeId,
    per_block: usize,
) -> Result<NodeId> {
    let n_blocks = tape.value(anchors).rows_2d();
    let d = tape.value(anchors).cols_2d();
    if tape.value(items).cols_2d() != d
        || tape.value(items).rows_2d() != n_blocks * per_block
    {
        return Err(Error::DimensionMismatch {
            op: "relevance_scores",
            lhs: tape.value(anchors).shape().to_vec(),
            rhs: tape.value(items).shape().to_vec(),
        });
    }
    let rep = tape.repeat_rows(anchors, per_block);
    let diff = tape.sub(rep, items)?;
    let prod = tape.mul_elem(rep, items)?;
    let input = tape.concat_cols(&[rep, items, diff, prod])?;
    let scores = params.relevance_mlp.forward(tape, binding, input)?;
    tape.reshape(scores, &[n_blocks, per_block])
}

/// Single-anchor relevance scores: anchor [1 x D], items [n x D] -> [1 x n].
pub fn relevance_scores(
    tape: &mut Tape,
    binding: &TapeBinding,
    params: &CiuParams,
    anchor: NodeId,
    items: NodeId,
) -> Result<NodeId> {
    let n = tape.value(items).rows_2d();
    relevance_scores_blocks(tape, binding, params, anchor, items, n)
}

/// Forward result with the internals needed by diagnostics and dumps.
pub struct CiuOutput {
    /// [N x D] augmented anchors (residual included, invalid rows zeroed).
    pub output: NodeId,
    /// [N x per_block] raw relevance scores.
    pub scores: NodeId,
    /// Which positions survived suppression.
    pub keep: Vec<bool>,
    /// [N x per_block] attention weights after masked softmax.
    pub weights: NodeId,
}

/// Block-batched CIU forward.
///
/// For each block b: q = anchor_b W^Q, K = items_b W^K, V = items_b W^V,
/// weights = softmax(q K^T / sqrt(D) + suppressed relevance), and
/// output_b = (weights V) W^O + anchor_b.
///
/// Invalid anchors (padded click slots) produce zero rows; their blocks are
/// carried through attention against a dummy kept position so the batch
/// path stays NaN-free, then zeroed. A valid anchor over a block with no
/// valid item is a degenerate page.
pub fn ciu_forward_blocks(
    tape: &mut Tape,
    binding: &TapeBinding,
    params: &CiuParams,
    anchors: NodeId,
    items: NodeId,
    item_valid: &[bool],
    anchor_valid: &[bool],
    per_block: usize,
) -> Result<CiuOutput> {
    let n_blocks = tape.value(anchors).rows_2d();
    let d = params.dim;
    if item_valid.len() != n_blocks * per_block || anchor_valid.len() != n_blocks {
        return Err(Error::DimensionMismatch {
            op: "ciu_forward",
            lhs: vec![n_blocks, per_block],
            rhs: vec![item_valid.len(), anchor_valid.len()],
        });
    }

    let scores = relevance_scores_blocks(tape, binding, params, anchors, items, per_block)?;

    let mut keep = vec![false; n_blocks * per_block];
    let mut eligible = vec![false; n_blocks * per_block];
    for b in 0..n_blocks {
        let lo = b * per_block;
        let hi = lo + per_block;
        if anchor_valid[b] {
            let kept = topk_indices(
                &tape.value(scores).data()[lo..hi],
                &item_valid[lo..hi],
                params.k,
            )?;
            for i in kept {
                keep[lo + i] = true;
            }
            eligible[lo..hi].copy_from_slice(&item_valid[lo..hi]);
        } else {
            // Dummy block: attend to slot 0 only, output discarded below.
            keep[lo] = true;
        }
    }
    let supp = tape.suppress(scores, keep.clone(), eligible)?;

    let q = tape.matmul(anchors, binding.node(params.w_q))?;
    let k_mat = tape.matmul(items, binding.node(params.w_k))?;
    let v_mat = tape.matmul(items, binding.node(params.w_v))?;
    let logits = tape.bmm(q, k_mat, n_blocks, 1, d, per_block, true)?;
    let scaled = tape.scale(logits, 1.0 / (d as f64).sqrt());
    let weights = tape.masked_softmax(scaled, supp)?;
    let ctx = tape.bmm(weights, v_mat, n_blocks, 1, per_block, d, false)?;
    let proj = tape.matmul(ctx, binding.node(params.w_o))?;
    let residual = tape.add(proj, anchors)?;
    let mask: Vec<f64> = anchor_valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
    let output = tape.mul_row_mask(residual, &mask)?;

    Ok(CiuOutput { output, scores, keep, weights })
}

/// Single-anchor CIU: anchor [1 x D], items [n x D].
pub fn ciu_forward(
    tape: &mut Tape,
    binding: &TapeBinding,
    params: &CiuParams,
    anchor: NodeId,
    items: NodeId,
    item_valid: &[bool],
) -> Result<CiuOutput> {
    let n = tape.value(items).rows_2d();
    ciu_forward_blocks(tape, binding, params, anchor, items, item_valid, &[true], n)
}

/// Explicit decision-making context: augment each clicked item with its
/// exposure page. clicks [S x D_s], pages [S*P x D_s] -> [S x D_s].
/// Padded click rows pass through as zero and stay masked.
pub fn explicit_context_pass(
    tape: &mut Tape,
    binding: &TapeBinding,
    params: &CiuParams,
    clicks: NodeId,
    pages: NodeId,
    page_valid: &[bool],
    click_valid: &[bool],
    p_max: usize,
) -> Result<CiuOutput> {
    ciu_forward_blocks(tape, binding, params, clicks, pages, page_valid, click_valid, p_max)
}

/// Implicit decision-making context: refine the target against the
/// pre-ranking candidates. target [1 x D_t], candidates [C x D_t].
pub fn implicit_context_pass(
    tape: &mut Tape,
    binding: &TapeBinding,
    params: &CiuParams,
    target: NodeId,
    candidates: NodeId,
    cand_valid: &[bool],
) -> Result<CiuOutput> {
    ciu_forward(tape, binding, params, target, candidates, cand_valid)
}
