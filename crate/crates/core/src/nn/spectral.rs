use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Persistent power-iteration vectors for one weight matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralState {
    /// Left singular vector estimate, length = rows.
    pub u: Vec<f64>,
    /// Right singular vector estimate, length = cols.
    pub v: Vec<f64>,
    /// Target bound on the largest singular value.
    pub coeff: f64,
}

fn normalize(x: &mut [f64]) -> f64 {
    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > 0.0 {
        x.iter_mut().for_each(|v| *v /= n);
    }
    n
}

impl SpectralState {
    pub fn new(rows: usize, cols: usize, coeff: f64, rng: &mut impl Rng) -> Self {
        let mut u: Vec<f64> = (0..rows).map(|_| rng.sample(StandardNormal)).collect();
        let mut v: Vec<f64> = (0..cols).map(|_| rng.sample(StandardNormal)).collect();
        normalize(&mut u);
        normalize(&mut v);
        Self { u, v, coeff }
    }

    /// Runs `iters` power iterations and returns the estimate of `sigma_max(w)`.
    pub fn estimate(&mut self, w: &Tensor, iters: usize) -> f64 {
        let (r, c) = w.dims2();
        let d = w.data();
        for _ in 0..iters {
            let mut v = vec![0.0; c];
            for i in 0..r {
                let ui = self.u[i];
                for j in 0..c {
                    v[j] += d[i * c + j] * ui;
                }
            }
            if normalize(&mut v) == 0.0 {
                return 0.0;
            }
            let mut u = vec![0.0; r];
            for i in 0..r {
                u[i] = (0..c).map(|j| d[i * c + j] * v[j]).sum();
            }
            if normalize(&mut u) == 0.0 {
                return 0.0;
            }
            self.u = u;
            self.v = v;
        }
        let mut sigma = 0.0;
        for i in 0..r {
            for j in 0..c {
                sigma += self.u[i] * d[i * c + j] * self.v[j];
            }
        }
        sigma.abs()
    }
}

/// Scales `weight` by `coeff / max(sigma, coeff)`, so it is never scaled up.
///
/// A zero matrix is returned unchanged.
pub fn spectral_normalize(weight: &Tensor, state: &mut SpectralState, iters: usize) -> Result<Tensor> {
    if iters == 0 {
        return Err(Error::invalid("spectral normalization needs at least one iteration"));
    }
    let (r, c) = weight.dims2();
    if state.u.len() != r || state.v.len() != c {
        return Err(Error::Dimension {
            expected: state.u.len() * state.v.len(),
            got: r * c,
        });
    }
    let sigma = state.estimate(weight, iters);
    if sigma <= state.coeff {
        return Ok(weight.clone());
    }
    Ok(weight.scale(state.coeff / sigma))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn state(n: usize, coeff: f64) -> SpectralState {
        SpectralState::new(n, n, coeff, &mut ChaCha8Rng::seed_from_u64(1))
    }

    #[test]
    fn diagonal_is_scaled_to_coeff() {
        let w = Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, 1.0]]);
        let out = spectral_normalize(&w, &mut state(2, 0.9), 200).unwrap();
        assert!((out.get(0, 0) - 0.9).abs() < 1e-9);
        assert!((out.get(1, 1) - 0.45).abs() < 1e-9);
    }

    #[test]
    fn identity_becomes_scaled_identity() {
        let out = spectral_normalize(&Tensor::eye(2), &mut state(2, 0.9), 5).unwrap();
        assert!((out.get(0, 0) - 0.9).abs() < 1e-12);
        assert!((out.get(1, 1) - 0.9).abs() < 1e-12);
        assert_eq!(out.get(0, 1), 0.0);
    }

    #[test]
    fn small_matrix_is_untouched() {
        let w = Tensor::from_rows(&[vec![0.5, 0.0], vec![0.0, 0.1]]);
        assert_eq!(spectral_normalize(&w, &mut state(2, 0.9), 50).unwrap(), w);
    }

    #[test]
    fn zero_matrix_and_zero_iters() {
        let w = Tensor::zeros(2, 2);
        assert_eq!(spectral_normalize(&w, &mut state(2, 0.9), 3).unwrap(), w);
        assert!(spectral_normalize(&w, &mut state(2, 0.9), 0).is_err());
    }
}
