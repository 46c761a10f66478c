use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{spectral_normalize, Activation, DenseLayer, Mlp, Module, SpectralState};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const INVERSE_MAX_ITER: usize = 1000;
pub const INVERSE_TOL: f64 = 1e-8;

/// `y = x + g(x)` with a spectrally normalized residual `g`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualBlock {
    pub net: Mlp,
    pub spectral: Vec<SpectralState>,
}

impl ResidualBlock {
    /// Residual subnet `dim -> hidden[0] -> ... -> dim`, spectrally bounded by `coeff`
    /// per layer. Fails unless the resulting Lipschitz bound of `g` is below 1.
    pub fn new(dim: usize, hidden: &[usize], activation: Activation, coeff: f64, rng: &mut impl Rng) -> Result<Self> {
        let mut sizes = vec![dim];
        sizes.extend_from_slice(hidden);
        sizes.push(dim);
        let net = Mlp::new(&sizes, activation, Activation::None, rng);
        Self::from_net(net, coeff, rng)
    }

    /// Wraps an existing subnet, normalizing it to `coeff` per layer.
    pub fn from_net(net: Mlp, coeff: f64, rng: &mut impl Rng) -> Result<Self> {
        if net.input_dim() != net.output_dim() {
            return Err(Error::Dimension {
                expected: net.input_dim(),
                got: net.output_dim(),
            });
        }
        if !(coeff > 0.0 && coeff < 1.0) {
            return Err(Error::invalid(format!("spectral coeff must be in (0, 1), got {coeff}")));
        }
        let spectral = net
            .layers
            .iter()
            .map(|l| SpectralState::new(l.inputs(), l.outputs(), coeff, rng))
            .collect();
        let mut block = Self { net, spectral };
        let bound = block.lipschitz_bound();
        if bound >= 1.0 {
            return Err(Error::invalid(format!(
                "residual Lipschitz bound {bound:.4} is not below 1; lower the coeff or use a 1-Lipschitz activation"
            )));
        }
        block.normalize(50)?;
        Ok(block)
    }

    /// Upper bound on `Lip(g)` from the per-layer coeffs and activation slopes.
    pub fn lipschitz_bound(&self) -> f64 {
        self.spectral.iter().map(|s| s.coeff).product::<f64>()
            * self.net.layers[..self.net.layers.len() - 1]
                .iter()
                .map(|l| l.activation.lipschitz())
                .product::<f64>()
            * self.net.layers.last().map_or(1.0, |l| l.activation.lipschitz())
    }

    pub fn normalize(&mut self, iters: usize) -> Result<()> {
        for (l, s) in self.net.layers.iter_mut().zip(&mut self.spectral) {
            l.weight = spectral_normalize(&l.weight, s, iters)?;
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn residual(&self, x: &Tensor) -> Result<Tensor> {
        self.net.eval_direct(x)
    }

    pub fn eval(&self, x: &Tensor) -> Result<Tensor> {
        let g = self.residual(x)?;
        Ok(x.zip_map(&g, |a, b| a + b))
    }

    /// Fixed-point inversion `x <- y - g(x)`, starting from `x = y`. Stops once
    /// the max-abs residual is below `tol * max(1, max|y|)`.
    pub fn inverse(&self, y: &Tensor, max_iter: usize, tol: f64) -> Result<Tensor> {
        let tol = tol * y.max_abs().max(1.0);
        let mut x = y.clone();
        let mut residual = f64::INFINITY;
        for _ in 0..=max_iter {
            let g = self.residual(&x)?;
            residual = x
                .data()
                .iter()
                .zip(g.data())
                .zip(y.data())
                .fold(0.0f64, |m, ((a, b), c)| m.max((a + b - c).abs()));
            if residual < tol {
                return Ok(x);
            }
            x = y.zip_map(&g, |a, b| a - b);
        }
        Err(Error::InversionFailed {
            iters: max_iter,
            residual,
        })
    }

    /// Residual after each of `iters` fixed-point steps; used to check the contraction rate.
    pub fn inverse_residuals(&self, y: &Tensor, iters: usize) -> Result<Vec<f64>> {
        let mut x = y.clone();
        let mut out = Vec::with_capacity(iters + 1);
        for _ in 0..=iters {
            let g = self.residual(&x)?;
            let r = x
                .data()
                .iter()
                .zip(g.data())
                .zip(y.data())
                .fold(0.0f64, |m, ((a, b), c)| m.max((a + b - c).abs()));
            out.push(r);
            x = y.zip_map(&g, |a, b| a - b);
        }
        Ok(out)
    }
}

/// Per-feature affine normalization. Uses batch statistics while `training`
/// and stored running statistics otherwise, where it is an invertible affine map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
    #[serde(skip)]
    pub training: bool,
}

impl BatchNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Tensor::ones(1, dim),
            beta: Tensor::zeros(1, dim),
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
            eps: 1e-5,
            training: false,
        }
    }

    fn affine(&self) -> (Vec<f64>, Vec<f64>) {
        let scale: Vec<f64> = (0..self.gamma.len())
            .map(|j| self.gamma.data()[j] / (self.running_var[j] + self.eps).sqrt())
            .collect();
        let shift = (0..scale.len())
            .map(|j| self.beta.data()[j] - self.running_mean[j] * scale[j])
            .collect();
        (scale, shift)
    }

    pub fn eval(&self, x: &Tensor) -> Tensor {
        let (scale, shift) = self.affine();
        let c = x.cols();
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = *v * scale[i % c] + shift[i % c];
        }
        out
    }

    pub fn inverse(&self, y: &Tensor) -> Tensor {
        let (scale, shift) = self.affine();
        let c = y.cols();
        let mut out = y.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = (*v - shift[i % c]) / scale[i % c];
        }
        out
    }

    /// Sets the running statistics to the mean and (biased) variance of `x`.
    pub fn set_statistics(&mut self, x: &Tensor) {
        let (n, c) = x.dims2();
        for j in 0..c {
            let mean = (0..n).map(|i| x.get(i, j)).sum::<f64>() / n as f64;
            let var = (0..n).map(|i| (x.get(i, j) - mean).powi(2)).sum::<f64>() / n as f64;
            self.running_mean[j] = mean;
            self.running_var[j] = var;
        }
    }

    fn forward(&self, tape: &mut Tape, gamma: Var, beta: Var, x: Var) -> Result<Var> {
        if self.training {
            return Ok(tape.batch_norm(x, gamma, beta, self.eps)?);
        }
        let m = tape.constant(Tensor::row(&self.running_mean));
        let inv: Vec<f64> = self.running_var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let inv = tape.constant(Tensor::row(&inv));
        let c = tape.sub(x, m)?;
        let n = tape.mul(c, inv)?;
        let s = tape.mul(n, gamma)?;
        Ok(tape.add(s, beta)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum InvertibleLayer {
    Residual(ResidualBlock),
    BatchNorm(BatchNorm),
}

/// A stack of invertible layers. With no layers it is the identity map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvertibleNet {
    pub dim: usize,
    pub layers: Vec<InvertibleLayer>,
}

impl InvertibleNet {
    pub fn identity(dim: usize) -> Self {
        Self { dim, layers: Vec::new() }
    }

    /// `blocks` residual blocks, each with subnet `dim -> hidden x (depth-1) -> dim`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        dim: usize,
        blocks: usize,
        hidden: usize,
        depth: usize,
        activation: Activation,
        coeff: f64,
        batch_norm: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if depth == 0 {
            return Err(Error::invalid("residual subnet depth must be at least 1"));
        }
        let widths = vec![hidden; depth - 1];
        let mut layers = Vec::new();
        for _ in 0..blocks {
            if batch_norm {
                layers.push(InvertibleLayer::BatchNorm(BatchNorm::new(dim)));
            }
            layers.push(InvertibleLayer::Residual(ResidualBlock::new(dim, &widths, activation, coeff, rng)?));
        }
        Ok(Self { dim, layers })
    }

    pub fn from_blocks(dim: usize, blocks: Vec<ResidualBlock>) -> Self {
        Self {
            dim,
            layers: blocks.into_iter().map(InvertibleLayer::Residual).collect(),
        }
    }

    pub fn num_blocks(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| matches!(l, InvertibleLayer::Residual(_)))
            .count()
    }

    pub fn set_training(&mut self, training: bool) {
        for l in &mut self.layers {
            if let InvertibleLayer::BatchNorm(bn) = l {
                bn.training = training;
            }
        }
    }

    /// Freezes batch-norm statistics to those of `x` propagated through the stack.
    pub fn refresh_statistics(&mut self, x: &Tensor) -> Result<()> {
        let mut h = x.clone();
        for l in &mut self.layers {
            h = match l {
                InvertibleLayer::Residual(b) => b.eval(&h)?,
                InvertibleLayer::BatchNorm(bn) => {
                    bn.set_statistics(&h);
                    bn.eval(&h)
                }
            };
        }
        Ok(())
    }

    /// Spectral projection with `iters` power iterations per weight.
    pub fn normalize(&mut self, iters: usize) -> Result<()> {
        for l in &mut self.layers {
            match l {
                InvertibleLayer::Residual(b) => b.normalize(iters)?,
                InvertibleLayer::BatchNorm(bn) => bn.gamma.map_inplace(|g| {
                    if g.abs() < 1e-3 {
                        1e-3f64.copysign(g)
                    } else {
                        g
                    }
                }),
            }
        }
        Ok(())
    }

    fn check_dim(&self, got: usize) -> Result<()> {
        if got != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                got,
            });
        }
        Ok(())
    }

    /// Forward map on plain values (inference-mode batch norm).
    pub fn eval_direct(&self, x: &Tensor) -> Result<Tensor> {
        self.check_dim(x.cols())?;
        let mut h = x.clone();
        for l in &self.layers {
            h = match l {
                InvertibleLayer::Residual(b) => b.eval(&h)?,
                InvertibleLayer::BatchNorm(bn) => bn.eval(&h),
            };
        }
        Ok(h)
    }

    pub fn inverse(&self, y: &Tensor) -> Result<Tensor> {
        self.inverse_with(y, INVERSE_MAX_ITER, INVERSE_TOL)
    }

    pub fn inverse_with(&self, y: &Tensor, max_iter: usize, tol: f64) -> Result<Tensor> {
        self.check_dim(y.cols())?;
        let mut h = y.clone();
        for l in self.layers.iter().rev() {
            h = match l {
                InvertibleLayer::Residual(b) => b.inverse(&h, max_iter, tol)?,
                InvertibleLayer::BatchNorm(bn) => bn.inverse(&h),
            };
        }
        Ok(h)
    }
}

impl Module for InvertibleNet {
    fn parameters(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in &self.layers {
            match l {
                InvertibleLayer::Residual(b) => out.extend(b.net.parameters()),
                InvertibleLayer::BatchNorm(bn) => out.extend([&bn.gamma, &bn.beta]),
            }
        }
        out
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            match l {
                InvertibleLayer::Residual(b) => out.extend(b.net.parameters_mut()),
                InvertibleLayer::BatchNorm(bn) => out.extend([&mut bn.gamma, &mut bn.beta]),
            }
        }
        out
    }

    fn forward(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<Var> {
        self.check_dim(tape.shape(x)[1])?;
        let mut h = x;
        let mut at = 0;
        for l in &self.layers {
            match l {
                InvertibleLayer::Residual(b) => {
                    let n = b.net.layers.len() * 2;
                    let g = b.net.forward(tape, &params[at..at + n], h)?;
                    h = tape.add(h, g)?;
                    at += n;
                }
                InvertibleLayer::BatchNorm(bn) => {
                    h = bn.forward(tape, params[at], params[at + 1], h)?;
                    at += 2;
                }
            }
        }
        Ok(h)
    }

    fn project(&mut self) {
        self.normalize(1).expect("shapes are fixed at construction");
    }

    fn eval(&self, x: &Tensor) -> Result<Tensor> {
        self.eval_direct(x)
    }
}

/// A block whose residual is the linear map `x -> a * x` (for `|a| < 1`).
pub fn scaled_identity_block(dim: usize, a: f64, rng: &mut impl Rng) -> Result<ResidualBlock> {
    let mut layer = DenseLayer::zeros(dim, dim, Activation::None);
    layer.weight = Tensor::eye(dim).scale(a);
    let coeff = (a.abs() + 1e-9).min(1.0 - 1e-9);
    ResidualBlock::from_net(Mlp { layers: vec![layer] }, coeff, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn half_residual_inverts_by_hand() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = scaled_identity_block(1, 0.5, &mut rng).unwrap();
        let y = b.eval(&Tensor::scalar(2.0)).unwrap();
        assert!((y.item() - 3.0).abs() < 1e-12);
        let x = b.inverse(&Tensor::scalar(3.0), 100, 1e-10).unwrap();
        assert!((x.item() - 2.0).abs() < 1e-8);
    }

    #[test]
    fn zero_residual_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = Mlp {
            layers: vec![DenseLayer::zeros(2, 2, Activation::None)],
        };
        let b = ResidualBlock::from_net(net, 0.9, &mut rng).unwrap();
        let y = Tensor::row(&[0.3, -7.0]);
        assert_eq!(b.eval(&y).unwrap(), y);
        assert_eq!(b.inverse(&y, 100, 1e-8).unwrap(), y);
    }

    #[test]
    fn swish_subnet_at_high_coeff_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(ResidualBlock::new(2, &[16, 16], Activation::Swish, 0.97, &mut rng).is_err());
        assert!(ResidualBlock::new(2, &[16, 16], Activation::LeakyRelu, 0.97, &mut rng).is_ok());
    }

    #[test]
    fn inverse_non_convergence_reports_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = ResidualBlock::new(2, &[8], Activation::Elu, 0.95, &mut rng).unwrap();
        let y = Tensor::row(&[1.0, 2.0]);
        match b.inverse(&y, 0, 0.0) {
            Err(Error::InversionFailed { residual, .. }) => assert!(residual > 0.0),
            other => panic!("expected failure, got {other:?}"),
        }
    }

    #[test]
    fn batch_norm_stack_roundtrips_in_eval_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut net = InvertibleNet::new(2, 2, 8, 2, Activation::Elu, 0.9, true, &mut rng).unwrap();
        let x = Tensor::from_rows(&[vec![0.1, 2.0], vec![-1.0, 0.5], vec![3.0, -0.3]]);
        net.refresh_statistics(&x).unwrap();
        let y = net.eval_direct(&x).unwrap();
        let back = net.inverse(&y).unwrap();
        assert!(back.zip_map(&x, |a, b| a - b).max_abs() < 1e-7);
    }
}
