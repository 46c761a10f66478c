//! Dense row-major `f64` tensors.
//!
//! Every tensor carries an explicit shape. The differentiable ops on
//! [`Tape`](super::Tape) work on rank-2 tensors; a scalar is `[1, 1]` and a
//! bias row is `[1, n]`.

use serde::{Deserialize, Serialize};

use super::AutodiffError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, AutodiffError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(AutodiffError::InvalidShape {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    /// Builds a `[rows, cols]` matrix, panicking on a length mismatch.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length");
        Self {
            shape: vec![rows, cols],
            data,
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::full(rows, cols, 0.0)
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Self::full(rows, cols, 1.0)
    }

    pub fn full(rows: usize, cols: usize, value: f64) -> Self {
        Self::matrix(rows, cols, vec![value; rows * cols])
    }

    pub fn scalar(value: f64) -> Self {
        Self::matrix(1, 1, vec![value])
    }

    /// A `[1, n]` row vector.
    pub fn row(values: &[f64]) -> Self {
        Self::matrix(1, values.len(), values.to_vec())
    }

    /// A `[n, 1]` column vector.
    pub fn column(values: &[f64]) -> Self {
        Self::matrix(values.len(), 1, values.to_vec())
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self::matrix(rows.len(), cols, rows.concat())
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn rows(&self) -> usize {
        self.dims2().0
    }

    pub fn cols(&self) -> usize {
        self.dims2().1
    }

    /// `(rows, cols)` of a rank-2 tensor; rank-1 is viewed as a single row.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            [] => (1, 1),
            _ => panic!("dims2 on rank-{} tensor", self.shape.len()),
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        let cols = self.cols();
        self.data[r * cols + c] = value;
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_vec(&self, r: usize) -> Vec<f64> {
        self.row_slice(r).to_vec()
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self, AutodiffError> {
        Self::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn map_inplace(&mut self, f: impl Fn(f64) -> f64) {
        for v in &mut self.data {
            *v = f(*v);
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = self.dims2();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::matrix(c, r, out)
    }

    /// Plain matrix product without shape recovery; callers check shapes.
    pub fn matmul(&self, other: &Tensor) -> Self {
        let (m, k) = self.dims2();
        let (k2, n) = other.dims2();
        assert_eq!(k, k2, "matmul inner dimension");
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Self::matrix(m, n, out)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Euclidean norm of every row, as a plain vector.
    pub fn row_norms(&self) -> Vec<f64> {
        (0..self.rows())
            .map(|r| self.row_slice(r).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect()
    }

    /// Stacks rows `indices` into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let c = self.cols();
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            out.extend_from_slice(self.row_slice(i));
        }
        Self::matrix(indices.len(), c, out)
    }

    /// Concatenates matrices with equal column counts along the row axis.
    pub fn vstack(parts: &[&Tensor]) -> Self {
        let c = parts.first().map_or(0, |t| t.cols());
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            assert_eq!(p.cols(), c, "vstack column mismatch");
            rows += p.rows();
            data.extend_from_slice(&p.data);
        }
        Self::matrix(rows, c, data)
    }

    /// Removes row `index` from a matrix.
    pub fn remove_row(&self, index: usize) -> Self {
        let keep: Vec<usize> = (0..self.rows()).filter(|&i| i != index).collect();
        self.select_rows(&keep)
    }

    /// Removes column `index` from a matrix.
    pub fn remove_column(&self, index: usize) -> Self {
        self.transpose().remove_row(index).transpose()
    }

    /// Appends one row to a matrix.
    pub fn push_row(&self, row: &[f64]) -> Self {
        assert_eq!(row.len(), self.cols(), "push_row width");
        let mut data = self.data.clone();
        data.extend_from_slice(row);
        Self::matrix(self.rows() + 1, self.cols(), data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::new(vec![2, 3], vec![0.0; 5]),
            Err(AutodiffError::InvalidShape { .. })
        ));
    }

    #[test]
    fn matmul_by_hand() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let b = Tensor::column(&[1.0, 1.0]);
        assert_eq!(a.matmul(&b).data(), &[3.0, 7.0]);
    }

    #[test]
    fn transpose_twice_is_identity() {
        let a = Tensor::matrix(2, 3, (0..6).map(f64::from).collect());
        assert_eq!(a.transpose().transpose(), a);
        assert_eq!(a.transpose().get(2, 1), a.get(1, 2));
    }

    #[test]
    fn row_edits() {
        let a = Tensor::matrix(3, 2, (0..6).map(f64::from).collect());
        assert_eq!(a.remove_row(1).data(), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(a.remove_column(0).data(), &[1.0, 3.0, 5.0]);
        assert_eq!(a.push_row(&[9.0, 9.0]).rows(), 4);
    }
}
