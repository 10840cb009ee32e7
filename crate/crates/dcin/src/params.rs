//! Named model parameters, initialization, and the AdaGrad optimizer.

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// Handle into a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub adagrad_accum: Tensor,
}

/// How a parameter is filled when the set is initialized.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zero,
    /// Uniform in +-sqrt(6 / (fan_in + fan_out)).
    Glorot { fan_in: usize, fan_out: usize },
    /// Glorot, but with row 0 zeroed (reserved padding/out-of-vocabulary row).
    EmbeddingTable { fan_in: usize, fan_out: usize },
}

/// Ordered collection of uniquely named parameters.
#[derive(Clone, Default)]
pub struct ParamSet {
    params: Vec<Parameter>,
    inits: Vec<Init>,
    by_name: BTreeMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn register(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name}"
        );
        let id = self.params.len();
        self.params.push(Parameter {
            name: name.to_string(),
            value: Tensor::zeros(shape),
            grad: Tensor::zeros(shape),
            adagrad_accum: Tensor::zeros(shape),
        });
        self.inits.push(init);
        self.by_name.insert(name.to_string(), id);
        ParamId(id)
    }

    /// Fill every parameter from its declared initializer. Each parameter
    /// draws from its own stream, derived from the seed and the parameter's
    /// rank in name order, so adding a parameter elsewhere in the model does
    /// not shift unrelated draws.
    pub fn initialize(&mut self, seed: u64) {
        let ranked: Vec<usize> = self.by_name.values().copied().collect();
        for (rank, &idx) in ranked.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(
                seed ^ (rank as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
            );
            let init = self.inits[idx];
            let p = &mut self.params[idx];
            match init {
                Init::Zero => p.value.fill(0.0),
                Init::Glorot { fan_in, fan_out } => {
                    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    for v in p.value.data_mut() {
                        *v = rng.gen_range(-bound..bound);
                    }
                }
                Init::EmbeddingTable { fan_in, fan_out } => {
                    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    for v in p.value.data_mut() {
                        *v = rng.gen_range(-bound..bound);
                    }
                    let cols = *p.value.shape().last().unwrap();
                    for v in &mut p.value.data_mut()[..cols] {
                        *v = 0.0;
                    }
                }
            }
            p.grad.fill(0.0);
            p.adagrad_accum.fill(0.0);
        }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar values across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    /// All handles, in registration order.
    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.by_name.get(name).map(|&i| &self.params[i])
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    /// Iterate parameters in registration order.
    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    /// Iterate in name order (the canonical order for checkpoints).
    pub fn iter_name_order(&self) -> impl Iterator<Item = &Parameter> {
        self.by_name.values().map(|&i| &self.params[i])
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Name of the first parameter holding a non-finite value, if any.
    pub fn first_non_finite_value(&self) -> Option<&str> {
        self.params
            .iter()
            .find(|p| !p.value.all_finite())
            .map(|p| p.name.as_str())
    }
}

/// Binding of a whole ParamSet onto a tape: one leaf per parameter, inserted
/// in registration order so every forward pass is identically shaped.
pub struct TapeBinding {
    nodes: Vec<NodeId>,
}

impl TapeBinding {
    pub fn bind(tape: &mut Tape, set: &ParamSet) -> TapeBinding {
        let nodes = set
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone()))
            .collect();
        TapeBinding { nodes }
    }

    pub fn node(&self, id: ParamId) -> NodeId {
        self.nodes[id.0]
    }

    /// Accumulate tape gradients back into the parameter grads.
    pub fn harvest_grads(&self, tape: &Tape, set: &mut ParamSet) {
        for (i, &node) in self.nodes.iter().enumerate() {
            let g = tape.grad(node);
            for (dst, &src) in set.params[i].grad.data_mut().iter_mut().zip(g) {
                *dst += src;
            }
        }
    }
}

/// One AdaGrad update: per element, accum += g^2 and
/// value -= lr * g / (sqrt(accum) + eps); gradients are zeroed afterwards.
pub fn adagrad_step(set: &mut ParamSet, learning_rate: f64, epsilon: f64) -> Result<()> {
    for p in &mut set.params {
        if !p.grad.all_finite() {
            return Err(Error::NonFiniteGradient {
                name: p.name.clone(),
            });
        }
    }
    for p in &mut set.params {
        let n = p.value.len();
        let value = p.value.data_mut();
        let grad = p.grad.data_mut();
        let accum = p.adagrad_accum.data_mut();
        for i in 0..n {
            let g = grad[i];
            if g != 0.0 {
                accum[i] += g * g;
                value[i] -= learning_rate * g / (accum[i].sqrt() + epsilon);
            }
            grad[i] = 0.0;
        }
    }
    Ok(())
}

/// Central finite differences of a scalar function over every parameter
/// element. Test oracle; slow path.
pub fn finite_diff<F>(set: &mut ParamSet, eps: f64, mut f: F) -> Vec<Tensor>
where
    F: FnMut(&ParamSet) -> f64,
{
    assert!((1e-7..=1e-4).contains(&eps), "eps outside supported range");
    let mut out = Vec::with_capacity(set.params.len());
    for pi in 0..set.params.len() {
        let n = set.params[pi].value.len();
        let mut grad = Tensor::zeros(set.params[pi].value.shape());
        for e in 0..n {
            let orig = set.params[pi].value.data()[e];
            set.params[pi].value.data_mut()[e] = orig + eps;
            let up = f(set);
            set.params[pi].value.data_mut()[e] = orig - eps;
            let down = f(set);
            set.params[pi].value.data_mut()[e] = orig;
            grad.data_mut()[e] = (up - down) / (2.0 * eps);
        }
        out.push(grad);
    }
    out
}

/// Relative error with the |a| vs |b| max denominator floored at 1e-8.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_panic() {
        let mut set = ParamSet::new();
        set.register("w", &[2, 2], Init::Zero);
        let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
            set.register("w", &[2, 2], Init::Zero);
        }));
        assert!(result.is_err());
    }

    #[test]
    fn initialization_is_deterministic_and_bounded() {
        let mut a = ParamSet::new();
        a.register("w1", &[3, 4], Init::Glorot { fan_in: 3, fan_out: 4 });
        a.register("w0", &[2, 2], Init::Glorot { fan_in: 2, fan_out: 2 });
        a.initialize(42);
        let mut b = ParamSet::new();
        b.register("w1", &[3, 4], Init::Glorot { fan_in: 3, fan_out: 4 });
        b.register("w0", &[2, 2], Init::Glorot { fan_in: 2, fan_out: 2 });
        b.initialize(42);
        for (pa, pb) in a.iter().zip(b.iter()) {
            assert_eq!(pa.value, pb.value);
        }
        let bound = (6.0 / 7.0f64).sqrt();
        for &v in a.by_name("w1").unwrap().value.data() {
            assert!(v.abs() < bound);
        }
    }

    #[test]
    fn embedding_init_zeroes_row_zero() {
        let mut set = ParamSet::new();
        set.register("table", &[5, 3], Init::EmbeddingTable { fan_in: 5, fan_out: 3 });
        set.initialize(7);
        let t = set.by_name("table").unwrap();
        assert_eq!(&t.value.data()[..3], &[0.0, 0.0, 0.0]);
        assert!(t.value.data()[3..].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn adagrad_zero_grad_is_noop() {
        let mut set = ParamSet::new();
        let id = set.register("w", &[2], Init::Zero);
        set.get_mut(id).value = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        adagrad_step(&mut set, 0.1, 1e-8).unwrap();
        assert_eq!(set.get(id).value.data(), &[1.0, 2.0]);
        assert_eq!(set.get(id).adagrad_accum.data(), &[0.0, 0.0]);
    }

    #[test]
    fn adagrad_first_and_second_step() {
        let mut set = ParamSet::new();
        let id = set.register("w", &[1], Init::Zero);
        set.get_mut(id).grad = Tensor::from_vec(&[1], vec![3.0]).unwrap();
        adagrad_step(&mut set, 0.1, 1e-8).unwrap();
        let v1 = set.get(id).value.data()[0];
        assert!((v1 - (-0.1 * 3.0 / (3.0 + 1e-8))).abs() < 1e-12);
        assert_eq!(set.get(id).grad.data()[0], 0.0);

        set.get_mut(id).grad = Tensor::from_vec(&[1], vec![3.0]).unwrap();
        adagrad_step(&mut set, 0.1, 1e-8).unwrap();
        let delta2 = set.get(id).value.data()[0] - v1;
        assert!((delta2 - (-0.1 * 3.0 / (18.0f64.sqrt() + 1e-8))).abs() < 1e-12);
        assert!((delta2 + 0.070711).abs() < 1e-5);
    }

    #[test]
    fn adagrad_rejects_non_finite_grad() {
        let mut set = ParamSet::new();
        let id = set.register("bad", &[1], Init::Zero);
        set.get_mut(id).grad = Tensor::from_vec(&[1], vec![f64::NAN]).unwrap();
        match adagrad_step(&mut set, 0.1, 1e-8) {
            Err(Error::NonFiniteGradient { name }) => assert_eq!(name, "bad"),
            other => panic!("expected NonFiniteGradient, got {other:?}"),
        }
    }

    #[test]
    fn adagrad_is_elementwise_independent() {
        // Permuting elements of a parameter permutes the update identically.
        let values = vec![0.5, -1.0, 2.0, 0.1];
        let grads = vec![0.3, -0.2, 1.5, 0.0];
        let accums = vec![0.1, 0.0, 2.0, 0.5];
        let perm = [2usize, 0, 3, 1];

        let run = |vals: &[f64], gs: &[f64], acc: &[f64]| -> Vec<f64> {
            let mut set = ParamSet::new();
            let id = set.register("w", &[4], Init::Zero);
            set.get_mut(id).value = Tensor::from_vec(&[4], vals.to_vec()).unwrap();
            set.get_mut(id).grad = Tensor::from_vec(&[4], gs.to_vec()).unwrap();
            set.get_mut(id).adagrad_accum = Tensor::from_vec(&[4], acc.to_vec()).unwrap();
            adagrad_step(&mut set, 0.05, 1e-8).unwrap();
            set.get(id).value.data().to_vec()
        };

        let base = run(&values, &grads, &accums);
        let pv: Vec<f64> = perm.iter().map(|&i| values[i]).collect();
        let pg: Vec<f64> = perm.iter().map(|&i| grads[i]).collect();
        let pa: Vec<f64> = perm.iter().map(|&i| accums[i]).collect();
        let permuted = run(&pv, &pg, &pa);
        for (j, &i) in perm.iter().enumerate() {
            assert_eq!(permuted[j], base[i]);
        }
    }

    #[test]
    fn finite_diff_quadratic_and_constant() {
        let mut set = ParamSet::new();
        let id = set.register("theta", &[1], Init::Zero);
        set.get_mut(id).value = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        let grads = finite_diff(&mut set, 1e-5, |s| {
            let x = s.get(ParamId(0)).value.data()[0];
            x * x
        });
        assert!((grads[0].data()[0] - 2.0).abs() <= 1e-8);
        let _ = id;

        let grads = finite_diff(&mut set, 1e-5, |_| 7.5);
        assert_eq!(grads[0].data()[0], 0.0);
    }

    #[test]
    fn finite_diff_agrees_with_backward_on_weighted_sum() {
        let mut set = ParamSet::new();
        let id = set.register("w", &[2, 2], Init::Glorot { fan_in: 2, fan_out: 2 });
        set.initialize(3);

        let run = |s: &ParamSet| -> f64 {
            let mut tape = Tape::new();
            let w = tape.leaf(s.get(id).value.clone());
            let x = tape.leaf(Tensor::from_vec(&[2, 2], vec![0.4, -0.3, 0.8, 0.2]).unwrap());
            let y = tape.matmul(x, w).unwrap();
            let sq = tape.mul_elem(y, y).unwrap();
            let loss = tape.sum_all(sq);
            tape.value(loss).data()[0]
        };
        let fd = finite_diff(&mut set, 1e-5, run);

        let mut tape = Tape::new();
        let binding = TapeBinding::bind(&mut tape, &set);
        let x = tape.leaf(Tensor::from_vec(&[2, 2], vec![0.4, -0.3, 0.8, 0.2]).unwrap());
        let y = tape.matmul(x, binding.node(id)).unwrap();
        let sq = tape.mul_elem(y, y).unwrap();
        let loss = tape.sum_all(sq);
        tape.backward(loss).unwrap();
        binding.harvest_grads(&tape, &mut set);

        for (a, b) in set.get(id).grad.data().iter().zip(fd[0].data()) {
            assert!(relative_error(*a, *b) <= 1e-5, "{a} vs {b}");
        }
    }
}
