//! Network building blocks.

mod adam;
mod convex;
mod dense;
mod invertible;
mod spectral;

pub use adam::Adam;
pub use convex::{ConvexLayer, ConvexNet};
pub use dense::{DenseLayer, Mlp};
pub use invertible::{
    scaled_identity_block, BatchNorm, InvertibleLayer, InvertibleNet, ResidualBlock, INVERSE_MAX_ITER, INVERSE_TOL,
};
pub use spectral::{spectral_normalize, SpectralState};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Rows per tape when evaluating large point sets.
pub const EVAL_CHUNK: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    None,
    Relu,
    /// Leaky ReLU with slope 0.01.
    LeakyRelu,
    Elu,
    Swish,
    Sigmoid,
    /// `4 * sigmoid(x)`, which has Lipschitz constant 1.
    Sigmoid4,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::None => x,
            Activation::Relu => tape.relu(x),
            Activation::LeakyRelu => tape.leaky_relu(x, 0.01),
            Activation::Elu => tape.elu(x),
            Activation::Swish => tape.swish(x),
            Activation::Sigmoid => tape.sigmoid(x),
            Activation::Sigmoid4 => {
                let s = tape.sigmoid(x);
                tape.scale(s, 4.0)
            }
        }
    }

    pub fn eval(self, x: f64) -> f64 {
        match self {
            Activation::None => x,
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu => {
                if x > 0.0 {
                    x
                } else {
                    0.01 * x
                }
            }
            Activation::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Activation::Swish => x * sigmoid(x),
            Activation::Sigmoid => sigmoid(x),
            Activation::Sigmoid4 => 4.0 * sigmoid(x),
        }
    }

    /// Global Lipschitz constant (maximum slope).
    pub fn lipschitz(self) -> f64 {
        match self {
            Activation::Sigmoid => 0.25,
            // max of d/dx x*sigmoid(x), attained near x = 2.3994
            Activation::Swish => 1.099_839_2,
            _ => 1.0,
        }
    }

    /// Convex and non-decreasing, as required inside an input-convex net.
    pub fn is_convex_monotone(self) -> bool {
        matches!(
            self,
            Activation::None | Activation::Relu | Activation::LeakyRelu | Activation::Elu
        )
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "none" | "linear" => Self::None,
            "relu" => Self::Relu,
            "leaky_relu" => Self::LeakyRelu,
            "elu" => Self::Elu,
            "swish" => Self::Swish,
            "sigmoid" => Self::Sigmoid,
            "sigmoid4" => Self::Sigmoid4,
            other => return Err(Error::InvalidArgument(format!("unknown activation '{other}'"))),
        })
    }
}

/// A network whose parameters can be placed on a tape and optimized.
pub trait Module {
    fn parameters(&self) -> Vec<&Tensor>;

    fn parameters_mut(&mut self) -> Vec<&mut Tensor>;

    /// Builds the forward graph of `x` using `params`, which must come from
    /// [`Module::bind`] on the same tape.
    fn forward(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<Var>;

    /// Re-imposes structural constraints (spectral bounds, non-negativity)
    /// after an optimizer step.
    fn project(&mut self) {}

    /// Places every parameter on `tape`, as trainable leaves or constants.
    fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.parameters()
            .into_iter()
            .map(|p| {
                if trainable {
                    tape.var(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect()
    }

    fn num_parameters(&self) -> usize {
        self.parameters().iter().map(|p| p.len()).sum()
    }

    /// Forward pass on plain values, evaluated in chunks.
    fn eval(&self, x: &Tensor) -> Result<Tensor> {
        let mut parts = Vec::new();
        for rows in chunks(x.rows()) {
            let mut tape = Tape::new();
            let params = self.bind(&mut tape, false);
            let xv = tape.constant(x.select_rows(&rows));
            let y = self.forward(&mut tape, &params, xv)?;
            parts.push(tape.value(y).clone());
        }
        Ok(stack_parts(parts, x.rows()))
    }
}

pub(crate) fn chunks(n: usize) -> impl Iterator<Item = Vec<usize>> {
    (0..n.div_ceil(EVAL_CHUNK).max(1)).map(move |c| (c * EVAL_CHUNK..((c + 1) * EVAL_CHUNK).min(n)).collect())
}

pub(crate) fn stack_parts(parts: Vec<Tensor>, rows: usize) -> Tensor {
    if parts.len() == 1 {
        return parts.into_iter().next().expect("one part");
    }
    let refs: Vec<&Tensor> = parts.iter().collect();
    let out = Tensor::vstack(&refs);
    debug_assert_eq!(out.rows(), rows);
    out
}

/// Values and input gradients of a per-sample scalar function, in chunks.
///
/// `build` receives the input node and returns the `[n, 1]` output node.
pub fn value_and_input_grad<F>(x: &Tensor, build: F) -> Result<(Vec<f64>, Tensor)>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut values = Vec::with_capacity(x.rows());
    let mut grads = Vec::new();
    for rows in chunks(x.rows()) {
        let mut tape = Tape::new();
        let xv = tape.var(x.select_rows(&rows));
        let y = build(&mut tape, xv)?;
        values.extend_from_slice(tape.value(y).data());
        let g = tape.backward(y, &[xv], &[])?;
        grads.push(g.into_iter().next().expect("one gradient"));
    }
    Ok((values, stack_parts(grads, x.rows())))
}

/// PyTorch-style uniform initialization `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub(crate) fn uniform_init(rng: &mut impl Rng, rows: usize, cols: usize, fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::matrix(rows, cols, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid4_slope_is_one_at_origin() {
        let h = 1e-6;
        let s = (Activation::Sigmoid4.eval(h) - Activation::Sigmoid4.eval(-h)) / (2.0 * h);
        assert!((s - 1.0).abs() < 1e-9);
    }

    #[test]
    fn swish_constant_bounds_its_slope() {
        let mut max: f64 = 0.0;
        for i in 0..200_000 {
            let x = -10.0 + i as f64 * 1e-4;
            let h = 1e-6;
            let d = (Activation::Swish.eval(x + h) - Activation::Swish.eval(x - h)) / (2.0 * h);
            max = max.max(d);
        }
        assert!(max <= Activation::Swish.lipschitz() + 1e-6);
        assert!(max > 1.099);
    }

    #[test]
    fn tape_and_scalar_activations_agree() {
        let xs = [-2.0, -0.3, 0.0, 0.7, 3.0];
        for act in [
            Activation::None,
            Activation::Relu,
            Activation::LeakyRelu,
            Activation::Elu,
            Activation::Swish,
            Activation::Sigmoid,
            Activation::Sigmoid4,
        ] {
            let mut t = Tape::new();
            let x = t.constant(Tensor::row(&xs));
            let y = act.apply(&mut t, x);
            for (i, &v) in xs.iter().enumerate() {
                assert!((t.value(y).data()[i] - act.eval(v)).abs() < 1e-14, "{act:?}");
            }
        }
    }
}
