//! Multi-layer perceptrons: affine chains with rectifier hidden layers and
//! a linear output layer.

use crate::error::Result;
use crate::params::{Init, ParamId, ParamSet, TapeBinding};
use crate::tape::{NodeId, Tape};

#[derive(Clone, Debug)]
pub struct Mlp {
    /// (weight, bias) per affine layer, in forward order.
    layers: Vec<(ParamId, ParamId)>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Mlp {
    /// Register an MLP under `prefix`: hidden layers of the given widths
    /// with rectifier activation, then a linear output layer.
    pub fn register(
        set: &mut ParamSet,
        prefix: &str,
        in_dim: usize,
        hidden: &[usize],
        out_dim: usize,
    ) -> Mlp {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut prev = in_dim;
        for (i, &width) in hidden.iter().chain(std::iter::once(&out_dim)).enumerate() {
            let w = set.register(
                &format!("{prefix}.{i}.weight"),
                &[prev, width],
                Init::Glorot { fan_in: prev, fan_out: width },
            );
            let b = set.register(&format!("{prefix}.{i}.bias"), &[width], Init::Zero);
            layers.push((w, b));
            prev = width;
        }
        Mlp { layers, in_dim, out_dim }
    }

    /// Forward over a [rows x in_dim] input.
    pub fn forward(&self, tape: &mut Tape, binding: &TapeBinding, input: NodeId) -> Result<NodeId> {
        let mut x = input;
        let last = self.layers.len() - 1;
        for (i, (w, b)) in self.layers.iter().enumerate() {
            let wx = tape.matmul(x, binding.node(*w))?;
            x = tape.add_row_broadcast(wx, binding.node(*b))?;
            if i != last {
                x = tape.relu(x);
            }
        }
        Ok(x)
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.layers.iter().flat_map(|(w, b)| [*w, *b])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{finite_diff, relative_error, TapeBinding};
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weights_give_zero_output() {
        let mut set = ParamSet::new();
        let mlp = Mlp::register(&mut set, "m", 3, &[4, 2], 1);
        // Registered but not initialized: everything stays zero.
        let mut tape = Tape::new();
        let binding = TapeBinding::bind(&mut tape, &set);
        let x = tape.leaf(Tensor::from_vec(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.1, -0.7]).unwrap());
        let y = mlp.forward(&mut tape, &binding, x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0]);
    }

    #[test]
    fn identity_single_layer_passthrough() {
        let mut set = ParamSet::new();
        let mlp = Mlp::register(&mut set, "m", 2, &[], 2);
        let w = set.id_by_name("m.0.weight").unwrap();
        set.get_mut(w).value = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let mut tape = Tape::new();
        let binding = TapeBinding::bind(&mut tape, &set);
        let x = tape.leaf(Tensor::from_vec(&[1, 2], vec![0.3, -0.9]).unwrap());
        let y = mlp.forward(&mut tape, &binding, x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.3, -0.9]);
    }

    #[test]
    fn random_two_hidden_matches_scalar_oracle() {
        let mut set = ParamSet::new();
        let mlp = Mlp::register(&mut set, "m", 4, &[5, 3], 2);
        set.initialize(11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let input: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let mut tape = Tape::new();
        let binding = TapeBinding::bind(&mut tape, &set);
        let x = tape.leaf(Tensor::from_vec(&[1, 4], input.clone()).unwrap());
        let y = mlp.forward(&mut tape, &binding, x).unwrap();

        // Per-neuron scalar re-evaluation.
        let layer = |xs: &[f64], w: &Tensor, b: &Tensor, relu: bool| -> Vec<f64> {
            let (i_dim, o_dim) = (w.shape()[0], w.shape()[1]);
            (0..o_dim)
                .map(|o| {
                    let mut s = b.data()[o];
                    for i in 0..i_dim {
                        s += xs[i] * w.data()[i * o_dim + o];
                    }
                    if relu {
                        s.max(0.0)
                    } else {
                        s
                    }
                })
                .collect()
        };
        let h1 = layer(
            &input,
            &set.by_name("m.0.weight").unwrap().value,
            &set.by_name("m.0.bias").unwrap().value,
            true,
        );
        let h2 = layer(
            &h1,
            &set.by_name("m.1.weight").unwrap().value,
            &set.by_name("m.1.bias").unwrap().value,
            true,
        );
        let out = layer(
            &h2,
            &set.by_name("m.2.weight").unwrap().value,
            &set.by_name("m.2.bias").unwrap().value,
            false,
        );
        for (a, b) in tape.value(y).data().iter().zip(&out) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn width_mismatch_is_an_error() {
        let mut set = ParamSet::new();
        let mlp = Mlp::register(&mut set, "m", 4, &[3], 1);
        let mut tape = Tape::new();
        let binding = TapeBinding::bind(&mut tape, &set);
        let x = tape.leaf(Tensor::zeros(&[2, 5]));
        assert!(mlp.forward(&mut tape, &binding, x).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut set = ParamSet::new();
        let mlp = Mlp::register(&mut set, "m", 3, &[4, 3], 1);
        set.initialize(21);
        let input = Tensor::from_vec(&[2, 3], vec![0.4, -0.2, 0.9, -0.6, 0.3, 0.15]).unwrap();

        let run = |s: &ParamSet| -> f64 {
            let mut tape = Tape::new();
            let binding = TapeBinding::bind(&mut tape, s);
            let x = tape.leaf(input.clone());
            let y = mlp.forward(&mut tape, &binding, x).unwrap();
            let loss = tape.sum_all(y);
            tape.value(loss).data()[0]
        };
        let fd = finite_diff(&mut set, 1e-5, run);

        let mut tape = Tape::new();
        let binding = TapeBinding::bind(&mut tape, &set);
        let x = tape.leaf(input.clone());
        let y = mlp.forward(&mut tape, &binding, x).unwrap();
        let loss = tape.sum_all(y);
        tape.backward(loss).unwrap();
        assert!(tape.min_abs_relu_preactivation() > 1e-5, "kink too close for fd");
        binding.harvest_grads(&tape, &mut set);

        for (p, fd_t) in set.iter().zip(&fd) {
            for (a, b) in p.value.data().iter().zip(fd_t.data()) {
                let _ = a;
                let _ = b;
            }
            for (a, b) in p.grad.data().iter().zip(fd_t.data()) {
                assert!(relative_error(*a, *b) <= 1e-5, "{}: {a} vs {b}", p.name);
            }
        }
    }
}
