//! Small dense helpers: a row-major sample matrix and Cholesky-based
//! quadratic forms for the low-dimensional covariances used throughout.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Row-major `rows × dim` matrix of samples.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleMatrix {
    dim: usize,
    data: Vec<f64>,
}

impl SampleMatrix {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter {
                name: "dim",
                reason: "must be positive".into(),
            });
        }
        if !data.len().is_multiple_of(dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: data.len() % dim,
            });
        }
        Ok(SampleMatrix { dim, data })
    }

    pub fn zeros(rows: usize, dim: usize) -> Self {
        SampleMatrix {
            dim,
            data: vec![0.0; rows * dim],
        }
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let dim = rows
            .first()
            .map(|r| r.as_ref().len())
            .ok_or(Error::Empty("rows"))?;
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            let r = r.as_ref();
            if r.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        SampleMatrix::new(dim, data)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter_rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for r in self.iter_rows() {
            for (acc, v) in m.iter_mut().zip(r) {
                *acc += v;
            }
        }
        let n = self.rows() as f64;
        m.iter_mut().for_each(|v| *v /= n);
        m
    }

    /// Unbiased sample covariance, row-major `dim × dim`.
    pub fn covariance(&self) -> Vec<f64> {
        let d = self.dim;
        let mean = self.mean();
        let mut c = vec![0.0; d * d];
        for r in self.iter_rows() {
            for i in 0..d {
                let di = r[i] - mean[i];
                for j in 0..d {
                    c[i * d + j] += di * (r[j] - mean[j]);
                }
            }
        }
        let denom = (self.rows().max(2) - 1) as f64;
        c.iter_mut().for_each(|v| *v /= denom);
        c
    }

    /// Applies `f` to every row, e.g. to translate a batch.
    pub fn map_rows(&self, mut f: impl FnMut(&[f64], &mut [f64])) -> SampleMatrix {
        let mut out = SampleMatrix::zeros(self.rows(), self.dim);
        for i in 0..self.rows() {
            f(self.row(i), out.row_mut(i));
        }
        out
    }
}

/// Lower Cholesky factor of a symmetric positive definite `n × n` matrix
/// (row-major), returned row-major.
pub fn cholesky_lower(cov: &[f64], n: usize) -> Result<Vec<f64>> {
    if cov.len() != n * n {
        return Err(Error::DimensionMismatch {
            expected: n * n,
            actual: cov.len(),
        });
    }
    for i in 0..n {
        for j in 0..i {
            let (a, b) = (cov[i * n + j], cov[j * n + i]);
            if (a - b).abs() > 1e-12 * a.abs().max(b.abs()).max(1.0) {
                return Err(Error::NotPositiveDefinite);
            }
        }
    }
    let m = DMatrix::from_row_slice(n, n, cov);
    let chol = m.cholesky().ok_or(Error::NotPositiveDefinite)?;
    let l = chol.l();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            out[i * n + j] = l[(i, j)];
        }
    }
    Ok(out)
}

/// Solves `L y = b` in place for lower-triangular row-major `L`.
#[inline]
pub(crate) fn forward_substitute(l: &[f64], n: usize, b: &mut [f64]) {
    for i in 0..n {
        let mut acc = b[i];
        let row = &l[i * n..i * n + i];
        for (lij, yj) in row.iter().zip(&b[..i]) {
            acc -= lij * yj;
        }
        b[i] = acc / l[i * n + i];
    }
}

/// Solves `Lᵀ x = y` in place for lower-triangular row-major `L`.
#[inline]
pub(crate) fn backward_substitute(l: &[f64], n: usize, y: &mut [f64]) {
    for i in (0..n).rev() {
        let mut acc = y[i];
        for j in i + 1..n {
            acc -= l[j * n + i] * y[j];
        }
        y[i] = acc / l[i * n + i];
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn identity(n: usize, scale: f64) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        m[i * n + i] = scale;
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_against_factor() {
        let cov = [4.0, 2.0, 0.6, 2.0, 2.0, 0.5, 0.6, 0.5, 3.0];
        let l = cholesky_lower(&cov, 3).unwrap();
        let b = [1.0, -2.0, 0.5];
        let mut x = b;
        forward_substitute(&l, 3, &mut x);
        backward_substitute(&l, 3, &mut x);
        for i in 0..3 {
            let r: f64 = (0..3).map(|j| cov[i * 3 + j] * x[j]).sum();
            assert!((r - b[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_indefinite_and_asymmetric() {
        assert_eq!(
            cholesky_lower(&[1.0, 2.0, 2.0, 1.0], 2),
            Err(Error::NotPositiveDefinite)
        );
        assert_eq!(
            cholesky_lower(&[1.0, 0.5, 0.0, 1.0], 2),
            Err(Error::NotPositiveDefinite)
        );
    }

    #[test]
    fn sample_moments() {
        let m = SampleMatrix::from_rows(&[[1.0, 0.0], [3.0, 2.0]]).unwrap();
        assert_eq!(m.mean(), vec![2.0, 1.0]);
        assert_eq!(m.covariance(), vec![2.0, 2.0, 2.0, 2.0]);
    }
}
