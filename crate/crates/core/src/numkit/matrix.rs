use serde::{Deserialize, Serialize};

use super::vector::{axpy, dot};
use super::{DenseVector, Real};
use crate::{Error, Result};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DenseMatrix<T> {
    rows: usize,
    cols: usize,
    values: Vec<T>,
}

impl<T: Real> DenseMatrix<T> {
    pub fn new(rows: usize, cols: usize, values: Vec<T>) -> Result<Self> {
        if rows * cols != values.len() {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                actual: values.len(),
            });
        }
        Ok(Self { rows, cols, values })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            values: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_diagonal(diag: &[T]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut values = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::DimensionMismatch {
                    expected: cols,
                    actual: r.len(),
                });
            }
            values.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            values,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[T] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_vector(&self, i: usize) -> DenseVector<T> {
        DenseVector::new(self.row(i).to_vec())
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scaled(&self, factor: T) -> Self {
        self.map(|v| v * factor)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other)?;
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| a + b)
                .collect(),
        })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other)?;
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| a - b)
                .collect(),
        })
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: T, other: &Self) -> Result<()> {
        self.check_same_shape(other)?;
        axpy(alpha, &other.values, &mut self.values);
        Ok(())
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::DimensionMismatch {
                expected: self.cols,
                actual: other.rows,
            });
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.values[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a != T::zero() {
                    axpy(a, other.row(k), out_row);
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other`.
    pub fn matmul_tn(&self, other: &Self) -> Result<Self> {
        if self.rows != other.rows {
            return Err(Error::DimensionMismatch {
                expected: self.rows,
                actual: other.rows,
            });
        }
        let mut out = Self::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let b = other.row(k);
            for (i, &a) in self.row(k).iter().enumerate() {
                if a != T::zero() {
                    axpy(a, b, &mut out.values[i * other.cols..(i + 1) * other.cols]);
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`.
    pub fn matmul_nt(&self, other: &Self) -> Result<Self> {
        if self.cols != other.cols {
            return Err(Error::DimensionMismatch {
                expected: self.cols,
                actual: other.cols,
            });
        }
        let mut out = Self::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.values[i * other.rows + j] = dot(a, other.row(j));
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, v: &DenseVector<T>) -> Result<DenseVector<T>> {
        if self.cols != v.len() {
            return Err(Error::DimensionMismatch {
                expected: self.cols,
                actual: v.len(),
            });
        }
        Ok(DenseVector::new(
            (0..self.rows)
                .map(|i| dot(self.row(i), v.as_slice()))
                .collect(),
        ))
    }

    /// `selfᵀ · v`.
    pub fn matvec_t(&self, v: &DenseVector<T>) -> Result<DenseVector<T>> {
        if self.rows != v.len() {
            return Err(Error::DimensionMismatch {
                expected: self.rows,
                actual: v.len(),
            });
        }
        let mut out = vec![T::zero(); self.cols];
        for (i, &vi) in v.iter().enumerate() {
            axpy(vi, self.row(i), &mut out);
        }
        Ok(DenseVector::new(out))
    }

    /// Mean over rows, giving one value per column.
    pub fn column_means(&self) -> DenseVector<T> {
        let mut out = vec![T::zero(); self.cols];
        for i in 0..self.rows {
            axpy(T::one(), self.row(i), &mut out);
        }
        let n = T::lit(self.rows.max(1) as f64);
        DenseVector::new(out.into_iter().map(|v| v / n).collect())
    }

    /// Mean over columns, giving one value per row.
    pub fn row_means(&self) -> DenseVector<T> {
        let n = T::lit(self.cols.max(1) as f64);
        DenseVector::new(
            (0..self.rows)
                .map(|i| self.row(i).iter().copied().sum::<T>() / n)
                .collect(),
        )
    }

    pub fn frobenius_norm(&self) -> T {
        dot(&self.values, &self.values).sqrt()
    }

    pub fn max_abs(&self) -> T {
        self.values.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn trace(&self) -> T {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn is_symmetric(&self, tol: T) -> bool {
        self.rows == self.cols
            && (0..self.rows).all(|i| (0..i).all(|j| (self[(i, j)] - self[(j, i)]).abs() <= tol))
    }

    /// Row-wise softmax of `self / temperature`, computed with max subtraction.
    pub fn softmax_rows(&self, temperature: T) -> Result<Self> {
        if !(temperature > T::zero()) {
            return Err(Error::InvalidArgument(format!(
                "softmax temperature must be positive, got {temperature}"
            )));
        }
        let mut out = self.clone();
        for i in 0..self.rows {
            softmax_in_place(out.row_mut(i), temperature);
        }
        Ok(out)
    }

    pub fn cast<U: Real>(&self) -> DenseMatrix<U> {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            values: self
                .values
                .iter()
                .map(|&v| U::lit(v.to_f64_lossy()))
                .collect(),
        }
    }

    fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::DimensionMismatch {
                expected: self.values.len(),
                actual: other.values.len(),
            });
        }
        Ok(())
    }
}

/// In-place softmax of `row / temperature`.
pub(crate) fn softmax_in_place<T: Real>(row: &mut [T], temperature: T) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = ((*v - max) / temperature).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

impl<T> std::ops::Index<(usize, usize)> for DenseMatrix<T> {
    type Output = T;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.values[i * self.cols + j]
    }
}

impl<T> std::ops::IndexMut<(usize, usize)> for DenseMatrix<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.values[i * self.cols + j]
    }
}

pub fn softmax_rows<T: Real>(m: &DenseMatrix<T>, temperature: T) -> Result<DenseMatrix<T>> {
    m.softmax_rows(temperature)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_examples() {
        let m =
            DenseMatrix::from_rows(&[vec![0.0f64, 0.0], vec![2f64.ln(), 0.0], vec![1000.0, 0.0]])
                .unwrap();
        let s = m.softmax_rows(1.0).unwrap();
        assert_eq!(s.row(0), &[0.5, 0.5]);
        assert!((s[(1, 0)] - 2.0 / 3.0).abs() < 1e-12);
        assert!((s[(1, 1)] - 1.0 / 3.0).abs() < 1e-12);
        assert!(s.is_finite());
        assert!((s[(2, 0)] - 1.0).abs() < 1e-12 && s[(2, 1)] < 1e-300);
        assert!(m.softmax_rows(0.0).is_err());
        assert!(m.softmax_rows(-1.0).is_err());
    }

    #[test]
    fn products_agree_with_transposes() {
        let a = DenseMatrix::new(2, 3, vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = DenseMatrix::new(3, 2, vec![7.0f64, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let ab = a.matmul(&b).unwrap();
        assert_eq!(ab.as_slice(), &[58.0, 64.0, 139.0, 154.0]);
        assert_eq!(a.transpose().matmul_tn(&b).unwrap(), ab);
        assert_eq!(a.matmul_nt(&b.transpose()).unwrap(), ab);
        assert!(a.matmul(&a).is_err());
        assert!(DenseMatrix::new(2, 2, vec![1.0f64]).is_err());
    }

    proptest! {
        #[test]
        fn softmax_rows_are_stochastic(
            values in prop::collection::vec(-1e3f64..1e3, 12),
            temperature in 0.05f64..10.0,
        ) {
            let m = DenseMatrix::new(3, 4, values).unwrap();
            let s = m.softmax_rows(temperature).unwrap();
            for i in 0..3 {
                let total: f64 = s.row(i).iter().sum();
                prop_assert!((total - 1.0).abs() <= 1e-9);
                prop_assert!(s.row(i).iter().all(|&v| v >= 0.0 && v.is_finite()));
            }
        }
    }
}
