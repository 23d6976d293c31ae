//! Dense row-major matrices and the handful of kernels the optimizer needs.
//!
//! Everything here is deterministic: loops run in a fixed order and no
//! operation depends on thread scheduling, so identical inputs always give
//! bit-identical outputs.

mod io;
mod svd;

pub use io::{read_matrix, write_matrix, MatrixHeader};
pub use svd::{svd, truncated_basis, SvdResult};

use std::fmt;

use crate::error::{GemsError, Result};

/// A dense `rows x cols` matrix of `f64` stored row-major.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows.min(8) {
            write!(f, "  ")?;
            for c in 0..self.cols.min(8) {
                write!(f, "{:>12.6e} ", self.get(r, c))?;
            }
            writeln!(f)?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    /// Validated constructor: positive dimensions, matching length, finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(GemsError::InvalidArgument(format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(GemsError::InvalidArgument(format!(
                "data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        let m = Matrix { rows, cols, data };
        m.check_finite("Matrix::new")?;
        Ok(m)
    }

    /// Zero matrix. Zero-sized dimensions are allowed here (e.g. an `n x 0` basis).
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// First `cols` columns of the `rows x rows` identity.
    pub fn eye_columns(rows: usize, cols: usize) -> Self {
        let mut m = Matrix::zeros(rows, cols);
        for i in 0..rows.min(cols) {
            m.data[i * cols + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(GemsError::InvalidArgument("ragged rows".into()));
        }
        Matrix::new(r, c, rows.iter().flat_map(|row| row.iter().copied()).collect())
    }

    pub fn column_vector(values: &[f64]) -> Result<Self> {
        Matrix::new(values.len(), 1, values.to_vec())
    }

    /// Unchecked constructor for kernels that already guarantee the invariants.
    pub(crate) fn from_vec_unchecked(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Matrix { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols;
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    /// Reports the first non-finite entry, if any.
    pub fn check_finite(&self, context: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(idx) => Err(GemsError::NonFinite {
                context: context.to_string(),
                row: idx / self.cols.max(1),
                col: idx % self.cols.max(1),
            }),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `self * other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(GemsError::shape(
                "matmul",
                (self.cols, other.cols),
                (other.rows, other.cols),
            ));
        }
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[p * n..(p + 1) * n];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(Matrix::from_vec_unchecked(m, n, out))
    }

    /// `selfᵀ * other`.
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(GemsError::shape(
                "t_matmul",
                (self.rows, other.cols),
                (other.rows, other.cols),
            ));
        }
        let (k, m, n) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; m * n];
        for p in 0..k {
            let arow = &self.data[p * m..(p + 1) * m];
            let brow = &other.data[p * n..(p + 1) * n];
            for (i, &a) in arow.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(Matrix::from_vec_unchecked(m, n, out))
    }

    /// `self * otherᵀ`.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(GemsError::shape(
                "matmul_t",
                (other.rows, self.cols),
                (other.rows, other.cols),
            ));
        }
        let (m, k, n) = (self.rows, self.cols, other.rows);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &other.data[j * k..(j + 1) * k];
                out[i * n + j] = dot(arow, brow);
            }
        }
        Ok(Matrix::from_vec_unchecked(m, n, out))
    }

    fn check_same_shape(&self, other: &Matrix, context: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(GemsError::shape(context, self.shape(), other.shape()));
        }
        Ok(())
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other, "add")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Matrix::from_vec_unchecked(self.rows, self.cols, data))
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other, "sub")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Matrix::from_vec_unchecked(self.rows, self.cols, data))
    }

    /// `self += scale * other`.
    pub fn axpy(&mut self, scale: f64, other: &Matrix) -> Result<()> {
        self.check_same_shape(other, "axpy")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix::from_vec_unchecked(self.rows, self.cols, self.data.iter().map(|v| v * s).collect())
    }

    pub fn scale_in_place(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix::from_vec_unchecked(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn frobenius_norm(&self) -> f64 {
        frobenius_norm(self)
    }

    /// Largest absolute entry; 0 for an empty matrix.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Columns `0..r` as a new `rows x r` matrix.
    pub fn leading_columns(&self, r: usize) -> Matrix {
        Matrix::from_fn(self.rows, r, |i, j| self.get(i, j))
    }

    /// `self * selfᵀ`, the orthogonal projector when `self` has orthonormal columns.
    pub fn outer_projector(&self) -> Matrix {
        self.matmul_t(self).expect("shapes conform by construction")
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `sqrt(sum a_ij^2)`.
pub fn frobenius_norm(a: &Matrix) -> f64 {
    a.data.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Inner product of the flattened matrices.
pub fn flat_dot(a: &Matrix, b: &Matrix) -> Result<f64> {
    a.check_same_shape(b, "flat_dot")?;
    Ok(dot(&a.data, &b.data))
}

/// Cosine similarity of the flattened matrices, clamped to `[-1, 1]`.
pub fn flat_cosine(a: &Matrix, b: &Matrix) -> Result<f64> {
    a.check_same_shape(b, "flat_cosine")?;
    let na = frobenius_norm(a);
    let nb = frobenius_norm(b);
    if na == 0.0 || nb == 0.0 {
        return Err(GemsError::DegenerateGradient("flat_cosine".into()));
    }
    Ok((dot(&a.data, &b.data) / (na * nb)).clamp(-1.0, 1.0))
}

/// `f * fᵀ` for an `n x C` feature matrix. Symmetric by construction: only the
/// upper triangle is accumulated and then mirrored.
pub fn covariance(f: &Matrix) -> Result<Matrix> {
    if f.cols() == 0 {
        return Err(GemsError::Empty("covariance of a matrix with no columns".into()));
    }
    f.check_finite("covariance")?;
    let n = f.rows();
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = dot(f.row(i), f.row(j));
            out.data[i * n + j] = v;
            out.data[j * n + i] = v;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn constructor_rejects_non_finite_with_index() {
        let err = Matrix::new(2, 2, vec![1.0, 2.0, f64::NAN, 4.0]).unwrap_err();
        match err {
            GemsError::NonFinite { row, col, .. } => assert_eq!((row, col), (1, 0)),
            other => panic!("unexpected {other:?}"),
        }
        assert!(Matrix::new(1, 2, vec![1.0]).is_err());
        assert!(Matrix::new(0, 2, vec![]).is_err());
    }

    #[test]
    fn frobenius_examples() {
        assert_eq!(Matrix::zeros(3, 3).frobenius_norm(), 0.0);
        assert_eq!(Matrix::from_rows(&[&[3.0, 4.0]]).unwrap().frobenius_norm(), 5.0);
        let a = random(4, 4, 11);
        let mut acc = 0.0;
        for r in 0..4 {
            for c in 0..4 {
                acc += a.get(r, c) * a.get(r, c);
            }
        }
        assert!((a.frobenius_norm() - acc.sqrt()).abs() <= 1e-12);
    }

    #[test]
    fn cosine_examples() {
        let a = random(3, 2, 5);
        assert!((flat_cosine(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        assert!((flat_cosine(&a, &a.scale(-1.0)).unwrap() + 1.0).abs() < 1e-15);
        let e1 = Matrix::from_rows(&[&[1.0, 0.0]]).unwrap();
        let e2 = Matrix::from_rows(&[&[0.0, 1.0]]).unwrap();
        assert_eq!(flat_cosine(&e1, &e2).unwrap(), 0.0);
        assert!(matches!(
            flat_cosine(&e1, &Matrix::zeros(1, 2)),
            Err(GemsError::DegenerateGradient(_))
        ));
    }

    #[test]
    fn covariance_examples() {
        assert_eq!(covariance(&Matrix::identity(2)).unwrap(), Matrix::identity(2));
        let col = Matrix::column_vector(&[1.0, 2.0]).unwrap();
        assert_eq!(
            covariance(&col).unwrap(),
            Matrix::from_rows(&[&[1.0, 2.0], &[2.0, 4.0]]).unwrap()
        );
        // naive triple loop, same accumulation order
        let f = random(3, 5, 9);
        let c = covariance(&f).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let mut acc = 0.0;
                for k in 0..5 {
                    acc += f.get(i, k) * f.get(j, k);
                }
                assert_eq!(c.get(i, j), acc);
            }
        }
    }

    #[test]
    fn matmul_variants_agree() {
        let a = random(4, 3, 1);
        let b = random(3, 5, 2);
        let ab = a.matmul(&b).unwrap();
        let ab2 = a.transpose().t_matmul(&b).unwrap();
        let ab3 = a.matmul_t(&b.transpose()).unwrap();
        for i in 0..ab.len() {
            assert!((ab.as_slice()[i] - ab2.as_slice()[i]).abs() < 1e-14);
            assert!((ab.as_slice()[i] - ab3.as_slice()[i]).abs() < 1e-14);
        }
        assert!(a.matmul(&a).is_err());
    }
}
