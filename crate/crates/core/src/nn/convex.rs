use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{uniform_init, Activation, DenseLayer, Module};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// `z' = act(z Wz + x Wx + b)` with `Wz >= 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvexLayer {
    pub wz: Tensor,
    pub wx: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

/// Input-convex network: the first layer is unconstrained, later layers have
/// non-negative hidden-to-hidden weights and skip connections from the input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvexNet {
    pub first: DenseLayer,
    pub layers: Vec<ConvexLayer>,
}

impl ConvexNet {
    /// `sizes = [in, h1, ..., out]` with at least one hidden layer.
    pub fn new(sizes: &[usize], activation: Activation, rng: &mut impl Rng) -> Result<Self> {
        if sizes.len() < 3 {
            return Err(Error::invalid("a convex net needs at least one hidden layer"));
        }
        if !activation.is_convex_monotone() {
            return Err(Error::invalid(format!("{activation:?} is not convex and non-decreasing")));
        }
        let input = sizes[0];
        let first = DenseLayer::new(input, sizes[1], activation, rng);
        let n = sizes.len() - 1;
        let layers = (1..n)
            .map(|i| ConvexLayer {
                wz: uniform_init(rng, sizes[i], sizes[i + 1], sizes[i]).map(f64::abs),
                wx: uniform_init(rng, input, sizes[i + 1], input),
                bias: uniform_init(rng, 1, sizes[i + 1], sizes[i]),
                activation: if i + 1 == n { Activation::None } else { activation },
            })
            .collect();
        Ok(Self { first, layers })
    }

    pub fn input_dim(&self) -> usize {
        self.first.inputs()
    }
}

impl Module for ConvexNet {
    fn parameters(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.first.weight, &self.first.bias];
        for l in &self.layers {
            out.extend([&l.wz, &l.wx, &l.bias]);
        }
        out
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.first.weight, &mut self.first.bias];
        for l in &mut self.layers {
            out.extend([&mut l.wz, &mut l.wx, &mut l.bias]);
        }
        out
    }

    fn forward(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<Var> {
        let got = tape.shape(x)[1];
        if got != self.input_dim() {
            return Err(Error::Dimension {
                expected: self.input_dim(),
                got,
            });
        }
        let mut z = self.first.forward_with(tape, params[0], params[1], x)?;
        for (l, p) in self.layers.iter().zip(params[2..].chunks(3)) {
            let a = tape.matmul(z, p[0])?;
            let b = tape.matmul(x, p[1])?;
            let s = tape.add(a, b)?;
            let s = tape.add(s, p[2])?;
            z = l.activation.apply(tape, s);
        }
        Ok(z)
    }

    fn project(&mut self) {
        for l in &mut self.layers {
            l.wz.map_inplace(|w| w.max(0.0));
        }
    }
}
