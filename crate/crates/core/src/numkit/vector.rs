use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use super::Real;
use crate::{Error, Result};

/// Norms below this are treated as degenerate by normalisation and cosine.
pub const NORM_FLOOR: f64 = 1e-12;

/// Dense, owned vector of reals.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DenseVector<T>(Vec<T>);

impl<T: Real> DenseVector<T> {
    pub fn new(values: Vec<T>) -> Self {
        Self(values)
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![T::zero(); len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<T> {
        self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, T> {
        self.0.iter()
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        check_len(self.len(), other.len())?;
        Ok(dot(&self.0, &other.0))
    }

    pub fn norm(&self) -> T {
        dot(&self.0, &self.0).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn scaled(&self, factor: T) -> Self {
        Self(self.0.iter().map(|&v| v * factor).collect())
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        check_len(self.len(), other.len())?;
        Ok(Self(
            self.0.iter().zip(&other.0).map(|(&a, &b)| a - b).collect(),
        ))
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        check_len(self.len(), other.len())?;
        Ok(Self(
            self.0.iter().zip(&other.0).map(|(&a, &b)| a + b).collect(),
        ))
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: T, other: &Self) -> Result<()> {
        check_len(self.len(), other.len())?;
        axpy(alpha, &other.0, &mut self.0);
        Ok(())
    }

    /// Unit-norm copy of `self`.
    pub fn l2_normalize(&self) -> Result<Self> {
        let n = self.norm();
        if !(n.to_f64_lossy() > NORM_FLOOR) {
            return Err(Error::Degenerate(format!(
                "cannot normalise vector with norm {n}"
            )));
        }
        Ok(self.scaled(T::one() / n))
    }

    /// Cosine similarity, clamped to [-1, 1].
    pub fn cosine(&self, other: &Self) -> Result<T> {
        check_len(self.len(), other.len())?;
        let (na, nb) = (self.norm(), other.norm());
        if !(na.to_f64_lossy() > NORM_FLOOR) || !(nb.to_f64_lossy() > NORM_FLOOR) {
            return Err(Error::Degenerate("cosine of a zero vector".into()));
        }
        let c = dot(&self.0, &other.0) / (na * nb);
        Ok(c.max(-T::one()).min(T::one()))
    }

    /// Converts the scalar type, e.g. `f32` to `f64`.
    pub fn cast<U: Real>(&self) -> DenseVector<U> {
        DenseVector(self.0.iter().map(|&v| U::lit(v.to_f64_lossy())).collect())
    }
}

impl<T> From<Vec<T>> for DenseVector<T> {
    fn from(values: Vec<T>) -> Self {
        Self(values)
    }
}

impl<T> Index<usize> for DenseVector<T> {
    type Output = T;
    fn index(&self, i: usize) -> &T {
        &self.0[i]
    }
}

impl<T> IndexMut<usize> for DenseVector<T> {
    fn index_mut(&mut self, i: usize) -> &mut T {
        &mut self.0[i]
    }
}

fn check_len(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch { expected, actual });
    }
    Ok(())
}

#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

#[inline]
pub(crate) fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn l2_normalize<T: Real>(v: &DenseVector<T>) -> Result<DenseVector<T>> {
    v.l2_normalize()
}

pub fn cosine<T: Real>(a: &DenseVector<T>, b: &DenseVector<T>) -> Result<T> {
    a.cosine(b)
}
