use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{uniform_init, Activation, Module};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    /// `[in, out]`
    pub weight: Tensor,
    /// `[1, out]`
    pub bias: Tensor,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new(inputs: usize, outputs: usize, activation: Activation, rng: &mut impl Rng) -> Self {
        Self {
            weight: uniform_init(rng, inputs, outputs, inputs),
            bias: uniform_init(rng, 1, outputs, inputs),
            activation,
        }
    }

    pub fn zeros(inputs: usize, outputs: usize, activation: Activation) -> Self {
        Self {
            weight: Tensor::zeros(inputs, outputs),
            bias: Tensor::zeros(1, outputs),
            activation,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.rows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.cols()
    }

    pub(crate) fn forward_with(&self, tape: &mut Tape, w: Var, b: Var, x: Var) -> Result<Var> {
        let z = tape.matmul(x, w)?;
        let z = tape.add(z, b)?;
        Ok(self.activation.apply(tape, z))
    }
}

/// Fully connected feed-forward network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
}

impl Mlp {
    /// `sizes = [in, h1, ..., out]`; hidden layers use `hidden`, the last one `output`.
    pub fn new(sizes: &[usize], hidden: Activation, output: Activation, rng: &mut impl Rng) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least input and output sizes");
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n { output } else { hidden };
                DenseLayer::new(sizes[i], sizes[i + 1], act, rng)
            })
            .collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").outputs()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_dim()];
        s.extend(self.layers.iter().map(DenseLayer::outputs));
        s
    }

    /// Plain forward pass without a tape.
    pub fn eval_direct(&self, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.input_dim() {
            return Err(Error::Dimension {
                expected: self.input_dim(),
                got: x.cols(),
            });
        }
        let mut h = x.clone();
        for l in &self.layers {
            let mut z = h.matmul(&l.weight);
            let cols = z.cols();
            let b = l.bias.data();
            for (i, v) in z.data_mut().iter_mut().enumerate() {
                *v = l.activation.eval(*v + b[i % cols]);
            }
            h = z;
        }
        Ok(h)
    }
}

impl Module for Mlp {
    fn parameters(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    fn forward(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<Var> {
        let got = tape.shape(x)[1];
        if got != self.input_dim() {
            return Err(Error::Dimension {
                expected: self.input_dim(),
                got,
            });
        }
        let mut h = x;
        for (l, p) in self.layers.iter().zip(params.chunks(2)) {
            h = l.forward_with(tape, p[0], p[1], h)?;
        }
        Ok(h)
    }

    fn eval(&self, x: &Tensor) -> Result<Tensor> {
        self.eval_direct(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weights_output_bias() {
        let mut net = Mlp {
            layers: vec![DenseLayer::zeros(2, 3, Activation::Relu), DenseLayer::zeros(3, 1, Activation::None)],
        };
        net.layers[1].bias = Tensor::scalar(0.75);
        let y = net.eval(&Tensor::from_rows(&[vec![1.0, -4.0], vec![9.0, 2.0]])).unwrap();
        assert_eq!(y.data(), &[0.75, 0.75]);
    }

    #[test]
    fn tape_forward_matches_direct_eval() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Mlp::new(&[2, 8, 8, 1], Activation::Elu, Activation::None, &mut rng);
        let x = Tensor::from_rows(&[vec![0.3, -0.2], vec![1.5, 0.4]]);
        let mut t = Tape::new();
        let p = net.bind(&mut t, false);
        let xv = t.constant(x.clone());
        let y = net.forward(&mut t, &p, xv).unwrap();
        let direct = net.eval_direct(&x).unwrap();
        for (a, b) in t.value(y).data().iter().zip(direct.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn wrong_input_width_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Mlp::new(&[2, 4, 1], Activation::Relu, Activation::None, &mut rng);
        assert!(matches!(net.eval(&Tensor::zeros(1, 3)), Err(Error::Dimension { .. })));
    }
}
