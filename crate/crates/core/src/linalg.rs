//! Small dense helpers for d×d row-major tables.

use nalgebra::DMatrix;

use crate::{Error, Result};

pub(crate) fn to_matrix(dim: usize, data: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(dim, dim, data)
}

pub(crate) fn from_matrix(m: &DMatrix<f64>) -> Vec<f64> {
    let (r, c) = m.shape();
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            out.push(m[(i, j)]);
        }
    }
    out
}

pub(crate) fn inverse(dim: usize, data: &[f64]) -> Result<Vec<f64>> {
    if dim == 1 {
        return if data[0] != 0.0 {
            Ok(vec![1.0 / data[0]])
        } else {
            Err(Error::input("matrix is singular"))
        };
    }
    to_matrix(dim, data)
        .try_inverse()
        .map(|m| from_matrix(&m))
        .ok_or_else(|| Error::input("matrix is singular"))
}

/// Lower Cholesky factor of a symmetric positive-definite table.
pub(crate) fn cholesky(dim: usize, data: &[f64]) -> Result<Vec<f64>> {
    to_matrix(dim, data)
        .cholesky()
        .map(|c| from_matrix(&c.l()))
        .ok_or_else(|| Error::input("covariance is not positive definite"))
}

pub(crate) fn determinant(dim: usize, data: &[f64]) -> f64 {
    if dim == 1 {
        return data[0];
    }
    to_matrix(dim, data).determinant()
}

pub(crate) fn identity(dim: usize) -> Vec<f64> {
    let mut m = vec![0.0; dim * dim];
    for k in 0..dim {
        m[k * dim + k] = 1.0;
    }
    m
}

pub(crate) fn matmul(dim: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; dim * dim];
    for i in 0..dim {
        for j in 0..dim {
            let mut s = 0.0;
            for k in 0..dim {
                s += a[i * dim + k] * b[k * dim + j];
            }
            out[i * dim + j] = s;
        }
    }
    out
}

pub(crate) fn transpose(dim: usize, a: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; dim * dim];
    for i in 0..dim {
        for j in 0..dim {
            out[j * dim + i] = a[i * dim + j];
        }
    }
    out
}

pub(crate) fn matvec(dim: usize, a: &[f64], x: &[f64], out: &mut [f64]) {
    for i in 0..dim {
        let row = &a[i * dim..(i + 1) * dim];
        out[i] = row.iter().zip(x).map(|(r, v)| r * v).sum();
    }
}

pub(crate) fn is_symmetric(dim: usize, a: &[f64]) -> bool {
    (0..dim).all(|i| (0..i).all(|j| a[i * dim + j] == a[j * dim + i]))
}
