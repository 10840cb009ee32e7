//! Adaptive Interest Aggregation Unit: align each augmented behavior
//! interest to the refined target, capture mutual influence with
//! self-attention, then average-pool and project to the interest vector.

use crate::error::{Error, Result};
use crate::mlp::Mlp;
use crate::params::{Init, ParamId, ParamSet, TapeBinding};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct AiauParams {
    /// [xt_re; xc_aug_i] -> aligned interest of dim D_a.
    pub align_mlp: Mlp,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    /// Pooled interest -> final interest vector, both of dim D_a.
    pub agg_mlp: Mlp,
    pub d_a: usize,
}

impl AiauParams {
    pub fn register(
        set: &mut ParamSet,
        prefix: &str,
        d_t: usize,
        d_s: usize,
        d_a: usize,
        align_hidden: &[usize],
        agg_hidden: &[usize],
    ) -> AiauParams {
        let align_mlp = Mlp::register(set, &format!("{prefix}.align_mlp"), d_t + d_s, align_hidden, d_a);
        let glorot = Init::Glorot { fan_in: d_a, fan_out: d_a };
        let w_q = set.register(&format!("{prefix}.w_q"), &[d_a, d_a], glorot);
        let w_k = set.register(&format!("{prefix}.w_k"), &[d_a, d_a], glorot);
        let w_v = set.register(&format!("{prefix}.w_v"), &[d_a, d_a], glorot);
        let agg_mlp = Mlp::register(set, &format!("{prefix}.agg_mlp"), d_a, agg_hidden, d_a);
        AiauParams { align_mlp, w_q, w_k, w_v, agg_mlp, d_a }
    }
}

/// Align interests to their block's refined target:
/// row i of block b = align_mlp([xt_re_b; xc_aug_{b,i}]).
/// xt_re: [B x D_t], xc_aug: [B*S x D_s] -> [B*S x D_a]; masked rows
/// produce zero and stay masked.
pub fn align_blocks(
    tape: &mut Tape,
    binding: &TapeBinding,
    params: &AiauParams,
    xt_re: NodeId,
    xc_aug: NodeId,
    click_valid: &[bool],
    s_max: usize,
) -> Result<NodeId> {
    let blocks = tape.value(xt_re).rows_2d();
    if tape.value(xc_aug).rows_2d() != blocks * s_max || click_valid.len() != blocks * s_max {
        return Err(Error::DimensionMismatch {
            op: "align",
            lhs: tape.value(xt_re).shape().to_vec(),
            rhs: tape.value(xc_aug).shape().to_vec(),
        });
    }
    let rep = tape.repeat_rows(xt_re, s_max);
    let input = tape.concat_cols(&[rep, xc_aug])?;
    let aligned = params.align_mlp.forward(tape, binding, input)?;
    let mask: Vec<f64> = click_valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
    tape.mul_row_mask(aligned, &mask)
}

/// Single-target wrapper: xt_re [1 x D_t], xc_aug [S x D_s].
pub fn align(
    tape: &mut Tape,
    binding: &TapeBinding,
    params: &AiauParams,
    xt_re: NodeId,
    xc_aug: NodeId,
    click_valid: &[bool],
) -> Result<NodeId> {
    let s = tape.value(xc_aug).rows_2d();
    align_blocks(tape, binding, params, xt_re, xc_aug, click_valid, s)
}

/// Self-attention over aligned interests within each block. Invalid
/// positions are excluded as keys via -inf bias and zeroed as query rows.
/// Blocks with no valid row produce zero rows.
pub fn mutual_influence_blocks(
    tape: &mut Tape,
    binding: &TapeBinding,
    params: &AiauParams,
    xc_a: NodeId,
    click_valid: &[bool],
    s_max: usize,
) -> Result<NodeId> {
    let rows = tape.value(xc_a).rows_2d();
    if rows % s_max != 0 || click_valid.len() != rows {
        return Err(Error::DimensionMismatch {
            op: "mutual_influence",
            lhs: tape.value(xc_a).shape().to_vec(),
            rhs: vec![s_max, click_valid.len()],
        });
    }
    let blocks = rows / s_max;
    let d_a = params.d_a;

    let q = tape.matmul(xc_a, binding.node(params.w_q))?;
    let k = tape.matmul(xc_a, binding.node(params.w_k))?;
    let v = tape.matmul(xc_a, binding.node(params.w_v))?;
    let logits = tape.bmm(q, k, blocks, s_max, d_a, s_max, true)?;
    let scaled = tape.scale(logits, 1.0 / (d_a as f64).sqrt());

    // Key mask, shared by every query row of a block. Blocks with no valid
    // key keep column 0 so softmax stays defined; their rows are zeroed out.
    let mut bias = vec![0.0f64; blocks * s_max * s_max];
    for b in 0..blocks {
        let any_valid = click_valid[b * s_max..(b + 1) * s_max].iter().any(|&x| x);
        for i in 0..s_max {
            for j in 0..s_max {
                let keep = if any_valid { click_valid[b * s_max + j] } else { j == 0 };
                if !keep {
                    bias[(b * s_max + i) * s_max + j] = f64::NEG_INFINITY;
                }
            }
        }
    }
    let bias = tape.leaf(Tensor::from_vec(&[blocks * s_max, s_max], bias)?);
    let weights = tape.masked_softmax(scaled, bias)?;
    let out = tape.bmm(weights, v, blocks, s_max, s_max, d_a, false)?;
    let mask: Vec<f64> = click_valid.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    tape.mul_row_mask(out, &mask)
}

/// Single-block wrapper; errors when every row is invalid.
pub fn mutual_influence(
    tape: &mut Tape,
    binding: &TapeBinding,
    params: &AiauParams,
    xc_a: NodeId,
    click_valid: &[bool],
) -> Result<NodeId> {
    if !click_valid.iter().any(|&v| v) {
        return Err(Error::DegeneratePage);
    }
    let s = tape.value(xc_a).rows_2d();
    mutual_influence_blocks(tape, binding, params, xc_a, click_valid, s)
}

/// Average-pool valid rows per block (dividing by the valid count, not the
/// block size) and run the aggregation MLP. Blocks without valid rows yield
/// agg_mlp(0); the model layer substitutes its learned empty-interest
/// vector for those.
pub fn aggregate_blocks(
    tape: &mut Tape,
    binding: &TapeBinding,
    params: &AiauParams,
    xc_m: NodeId,
    click_valid: &[bool],
    s_max: usize,
) -> Result<NodeId> {
    let pooled = tape.block_mean_valid_rows(xc_m, s_max, click_valid)?;
    params.agg_mlp.forward(tape, binding, pooled)
}

/// Single-block wrapper; errors when every row is invalid.
pub fn aggregate(
    tape: &mut Tape,
    binding: &TapeBinding,
    params: &AiauParams,
    xc_m: NodeId,
    click_valid: &[bool],
) -> Result<NodeId> {
    if !click_valid.iter().any(|&v| v) {
        return Err(Error::DegeneratePage);
    }
    let s = tape.value(xc_m).rows_2d();
    aggregate_blocks(tape, binding, params, xc_m, click_valid, s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{finite_diff, relative_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn unit(d_t: usize, d_s: usize, d_a: usize, seed: u64) -> (ParamSet, AiauParams) {
        let mut set = ParamSet::new();
        let params = AiauParams::register(&mut set, "aiau", d_t, d_s, d_a, &[6, 5], &[5, 5]);
        set.initialize(seed);
        (set, params)
    }

    #[test]
    fn zero_align_mlp_outputs_zero_rows() {
        let mut set = ParamSet::new();
        let params = AiauParams::register(&mut set, "aiau", 3, 3, 4, &[5, 4], &[4, 4]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let binding = TapeBinding::bind(&mut tape, &set);
        let xt = tape.leaf(rand_tensor(&mut rng, &[1, 3]));
        let xc = tape.leaf(rand_tensor(&mut rng, &[3, 3]));
        let out = align(&mut tape, &binding, &params, xt, xc, &[true, true, false]).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_interests_align_identically() {
        let (set, params) = unit(3, 3, 4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let binding = TapeBinding::bind(&mut tape, &set);
        let xt = tape.leaf(rand_tensor(&mut rng, &[1, 3]));
        let row: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let xc = tape.leaf(Tensor::from_vec(&[2, 3], row.repeat(2)).unwrap());
        let out = align(&mut tape, &binding, &params, xt, xc, &[true, true]).unwrap();
        let d = tape.value(out).data();
        for j in 0..4 {
            assert!((d[j] - d[4 + j]).abs() < 1e-15);
        }
    }

    #[test]
    fn align_matches_per_row_scalar_oracle() {
        let (set, params) = unit(3, 2, 4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xt_re = rand_tensor(&mut rng, &[1, 3]);
        let xc_aug = rand_tensor(&mut rng, &[3, 2]);

        let mut tape = Tape::new();
        let binding = TapeBinding::bind(&mut tape, &set);
        let xt = tape.leaf(xt_re.clone());
        let xc = tape.leaf(xc_aug.clone());
        let out = align(&mut tape, &binding, &params, xt, xc, &[true; 3]).unwrap();

        for i in 0..3 {
            let mut input = xt_re.data().to_vec();
            input.extend_from_slice(&xc_aug.data()[i * 2..(i + 1) * 2]);
            let mut t2 = Tape::new();
            let b2 = TapeBinding::bind(&mut t2, &set);
            let x = t2.leaf(Tensor::from_vec(&[1, 5], input).unwrap());
            let y = params.align_mlp.forward(&mut t2, &b2, x).unwrap();
            for j in 0..4 {
                assert!((tape.value(out).data()[i * 4 + j] - t2.value(y).data()[j]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn single_valid_row_attends_to_itself() {
        let (set, params) = unit(3, 3, 3, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let xc_a = rand_tensor(&mut rng, &[3, 3]);
        let mut tape = Tape::new();
        let binding = TapeBinding::bind(&mut tape, &set);
        let x = tape.leaf(xc_a.clone());
        let out = mutual_influence(&mut tape, &binding, &params, x, &[false, true, false]).unwrap();

        // Row 1 output = row1 . W^V; rows 0 and 2 are zeroed.
        let w_v = &set.get(params.w_v).value;
        for j in 0..3 {
            let mut s = 0.0;
            for i in 0..3 {
                s += xc_a.data()[3 + i] * w_v.data()[i * 3 + j];
            }
            assert!((tape.value(out).data()[3 + j] - s).abs() <= 1e-12);
            assert_eq!(tape.value(out).data()[j], 0.0);
            assert_eq!(tape.value(out).data()[6 + j], 0.0);
        }
    }

    #[test]
    fn identical_rows_yield_identical_outputs() {
        let (set, params) = unit(3, 3, 3, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let row: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut tape = Tape::new();
        let binding = TapeBinding::bind(&mut tape, &set);
        let x = tape.leaf(Tensor::from_vec(&[4, 3], row.repeat(4)).unwrap());
        let out = mutual_influence(&mut tape, &binding, &params, x, &[true; 4]).unwrap();
        let d = tape.value(out).data();
        for i in 1..4 {
            for j in 0..3 {
                assert!((d[j] - d[i * 3 + j]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn mutual_influence_matches_direct_evaluation() {
        let (set, params) = unit(3, 3, 3, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let xc_a = rand_tensor(&mut rng, &[4, 3]);
        let mut tape = Tape::new();
        let binding = TapeBinding::bind(&mut tape, &set);
        let x = tape.leaf(xc_a.clone());
        let out = mutual_influence(&mut tape, &binding, &params, x, &[true; 4]).unwrap();

        // Direct evaluation: Q K^T / sqrt(D_a), softmax, times V.
        let project = |w: &Tensor| -> Vec<f64> {
            let mut out = vec![0.0; 12];
            for r in 0..4 {
                for j in 0..3 {
                    for i in 0..3 {
                        out[r * 3 + j] += xc_a.data()[r * 3 + i] * w.data()[i * 3 + j];
                    }
                }
            }
            out
        };
        let q = project(&set.get(params.w_q).value);
        let k = project(&set.get(params.w_k).value);
        let v = project(&set.get(params.w_v).value);
        let scale = 1.0 / 3.0f64.sqrt();
        for r in 0..4 {
            let logits: Vec<f64> = (0..4)
                .map(|c| {
                    (0..3).map(|i| q[r * 3 + i] * k[c * 3 + i]).sum::<f64>() * scale
                })
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            for j in 0..3 {
                let mut s = 0.0;
                for c in 0..4 {
                    s += exps[c] / z * v[c * 3 + j];
                }
                assert!((tape.value(out).data()[r * 3 + j] - s).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn mutual_influence_errors_on_all_invalid() {
        let (set, params) = unit(3, 3, 3, 12);
        let mut tape = Tape::new();
        let binding = TapeBinding::bind(&mut tape, &set);
        let x = tape.leaf(Tensor::zeros(&[2, 3]));
        assert!(mutual_influence(&mut tape, &binding, &params, x, &[false, false]).is_err());
    }

    #[test]
    fn aggregate_mean_of_equal_rows() {
        let (set, params) = unit(3, 3, 3, 13);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let row: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut tape = Tape::new();
        let binding = TapeBinding::bind(&mut tape, &set);
        let x = tape.leaf(Tensor::from_vec(&[3, 3], row.repeat(3)).unwrap());
        let agg = aggregate(&mut tape, &binding, &params, x, &[true; 3]).unwrap();

        let mut t2 = Tape::new();
        let b2 = TapeBinding::bind(&mut t2, &set);
        let v = t2.leaf(Tensor::from_vec(&[1, 3], row).unwrap());
        let y = params.agg_mlp.forward(&mut t2, &b2, v).unwrap();
        for j in 0..3 {
            assert!((tape.value(agg).data()[j] - t2.value(y).data()[j]).abs() <= 1e-12);
        }
    }

    #[test]
    fn full_aiau_is_permutation_invariant_over_valid_rows() {
        let (set, params) = unit(3, 2, 4, 15);
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let xt_re = rand_tensor(&mut rng, &[1, 3]);
        let xc_aug = rand_tensor(&mut rng, &[4, 2]);
        let valid = [true, true, false, true];

        let run = |xc: &Tensor, valid: &[bool]| -> Vec<f64> {
            let mut tape = Tape::new();
            let binding = TapeBinding::bind(&mut tape, &set);
            let xt = tape.leaf(xt_re.clone());
            let x = tape.leaf(xc.clone());
            let a = align(&mut tape, &binding, &params, xt, x, valid).unwrap();
            let m = mutual_influence(&mut tape, &binding, &params, a, valid).unwrap();
            let s = aggregate(&mut tape, &binding, &params, m, valid).unwrap();
            tape.value(s).data().to_vec()
        };
        let base = run(&xc_aug, &valid);

        let perm = [3usize, 0, 2, 1];
        let mut p_xc = Tensor::zeros(&[4, 2]);
        let mut p_valid = [false; 4];
        for (dst, &src) in perm.iter().enumerate() {
            p_xc.data_mut()[dst * 2..(dst + 1) * 2]
                .copy_from_slice(&xc_aug.data()[src * 2..(src + 1) * 2]);
            p_valid[dst] = valid[src];
        }
        let permuted = run(&p_xc, &p_valid);
        for (a, b) in base.iter().zip(&permuted) {
            assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn target_perturbation_changes_interest() {
        let (set, params) = unit(3, 2, 4, 17);
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let xt_re = rand_tensor(&mut rng, &[1, 3]);
        let xc_aug = rand_tensor(&mut rng, &[3, 2]);

        let run = |xt: &Tensor| -> Vec<f64> {
            let mut tape = Tape::new();
            let binding = TapeBinding::bind(&mut tape, &set);
            let t = tape.leaf(xt.clone());
            let x = tape.leaf(xc_aug.clone());
            let a = align(&mut tape, &binding, &params, t, x, &[true; 3]).unwrap();
            let m = mutual_influence(&mut tape, &binding, &params, a, &[true; 3]).unwrap();
            let s = aggregate(&mut tape, &binding, &params, m, &[true; 3]).unwrap();
            tape.value(s).data().to_vec()
        };
        let base = run(&xt_re);

        let mut dir: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        dir.iter_mut().for_each(|v| *v /= norm);
        let mut xt2 = xt_re.clone();
        for (v, d) in xt2.data_mut().iter_mut().zip(&dir) {
            *v += d;
        }
        let moved = run(&xt2);
        let change: f64 = base
            .iter()
            .zip(&moved)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(change > 0.0, "interest vector ignored the refined target");
    }

    #[test]
    fn full_chain_gradients_match_finite_differences() {
        let (mut set, params) = unit(3, 2, 3, 19);
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let xt_re = rand_tensor(&mut rng, &[1, 3]);
        let xc_aug = rand_tensor(&mut rng, &[3, 2]);
        let valid = [true, false, true];
        let weight = rand_tensor(&mut rng, &[1, 3]);

        let run = |s: &ParamSet| -> f64 {
            let mut tape = Tape::new();
            let binding = TapeBinding::bind(&mut tape, s);
            let xt = tape.leaf(xt_re.clone());
            let xc = tape.leaf(xc_aug.clone());
            let a = align(&mut tape, &binding, &params, xt, xc, &valid).unwrap();
            let m = mutual_influence(&mut tape, &binding, &params, a, &valid).unwrap();
            let agg = aggregate(&mut tape, &binding, &params, m, &valid).unwrap();
            let w = tape.leaf(weight.clone());
            let weighted = tape.mul_elem(agg, w).unwrap();
            let loss = tape.sum_all(weighted);
            tape.value(loss).data()[0]
        };

        let fd = finite_diff(&mut set, 1e-5, run);

        let mut tape = Tape::new();
        let binding = TapeBinding::bind(&mut tape, &set);
        let xt = tape.leaf(xt_re.clone());
        let xc = tape.leaf(xc_aug.clone());
        let a = align(&mut tape, &binding, &params, xt, xc, &valid).unwrap();
        let m = mutual_influence(&mut tape, &binding, &params, a, &valid).unwrap();
        let agg = aggregate(&mut tape, &binding, &params, m, &valid).unwrap();
        let w = tape.leaf(weight.clone());
        let weighted = tape.mul_elem(agg, w).unwrap();
        let loss = tape.sum_all(weighted);
        tape.backward(loss).unwrap();
        assert!(tape.min_abs_relu_preactivation() > 1e-4, "fd too close to a kink");
        binding.harvest_grads(&tape, &mut set);

        for (p, fd_t) in set.iter().zip(&fd) {
            for (a, b) in p.grad.data().iter().zip(fd_t.data()) {
                assert!(
                    relative_error(*a, *b) <= 1e-5,
                    "{}: analytic {a} vs fd {b}",
                    p.name
                );
            }
        }
    }
}
