use super::{DenseMatrix, DenseVector, Real};
use crate::{Error, Result};

const MAX_SWEEPS: usize = 100;

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues sorted in descending order and the matching unit
/// eigenvectors as the columns of the second matrix, so `m = V·diag(λ)·Vᵀ`.
pub fn sym_eig<T: Real>(m: &DenseMatrix<T>) -> Result<(DenseVector<T>, DenseMatrix<T>)> {
    let n = m.rows();
    if m.cols() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: m.cols(),
        });
    }
    let scale = m.max_abs().max(T::one());
    if !m.is_symmetric(T::lit(1e-8) * scale) {
        return Err(Error::InvalidArgument(
            "sym_eig requires a symmetric matrix".into(),
        ));
    }

    let mut a = m.clone();
    let mut v = DenseMatrix::identity(n);
    let tol = T::epsilon() * T::epsilon() * a.frobenius_norm().powi(2).max(T::min_positive_value());

    for _ in 0..MAX_SWEEPS {
        let off: T = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[(i, j)] * a[(i, j)])
            .sum();
        if off <= tol {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq == T::zero() {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (T::lit(2.0) * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                rotate(&mut a, &mut v, p, q, c, s);
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        a[(j, j)]
            .partial_cmp(&a[(i, i)])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let values = DenseVector::new(order.iter().map(|&i| a[(i, i)]).collect());
    let mut vectors = DenseMatrix::zeros(n, n);
    for (col, &src) in order.iter().enumerate() {
        for row in 0..n {
            vectors[(row, col)] = v[(row, src)];
        }
    }
    Ok((values, vectors))
}

/// Applies the Jacobi rotation zeroing `a[p][q]` to both sides of `a` and
/// accumulates it into `v`.
fn rotate<T: Real>(a: &mut DenseMatrix<T>, v: &mut DenseMatrix<T>, p: usize, q: usize, c: T, s: T) {
    let n = a.rows();
    for k in 0..n {
        let (akp, akq) = (a[(k, p)], a[(k, q)]);
        a[(k, p)] = c * akp - s * akq;
        a[(k, q)] = s * akp + c * akq;
    }
    for k in 0..n {
        let (apk, aqk) = (a[(p, k)], a[(q, k)]);
        a[(p, k)] = c * apk - s * aqk;
        a[(q, k)] = s * apk + c * aqk;
    }
    for k in 0..n {
        let (vkp, vkq) = (v[(k, p)], v[(k, q)]);
        v[(k, p)] = c * vkp - s * vkq;
        v[(k, q)] = s * vkp + c * vkq;
    }
}

/// Rebuilds `V·diag(λ)·Vᵀ`.
pub fn reconstruct<T: Real>(
    values: &DenseVector<T>,
    vectors: &DenseMatrix<T>,
) -> Result<DenseMatrix<T>> {
    let scaled = vectors.matmul(&DenseMatrix::from_diagonal(values.as_slice()))?;
    scaled.matmul_nt(vectors)
}

/// Symmetric positive semi-definite square root; negative eigenvalues from
/// rounding are floored at zero.
pub fn psd_sqrt<T: Real>(m: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
    let (values, vectors) = sym_eig(m)?;
    let roots = DenseVector::new(values.iter().map(|&l| l.max(T::zero()).sqrt()).collect());
    reconstruct(&roots, &vectors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::SeededRng;

    fn relative_error(m: &DenseMatrix<f64>) -> f64 {
        let (vals, vecs) = sym_eig(m).unwrap();
        let r = reconstruct(&vals, &vecs).unwrap();
        r.sub(m).unwrap().frobenius_norm() / m.frobenius_norm().max(1e-300)
    }

    #[test]
    fn small_examples() {
        let (vals, _) = sym_eig(&DenseMatrix::<f64>::identity(3)).unwrap();
        assert_eq!(vals.as_slice(), &[1.0, 1.0, 1.0]);

        let (vals, vecs) = sym_eig(&DenseMatrix::from_diagonal(&[4.0f64, 1.0])).unwrap();
        assert_eq!(vals.as_slice(), &[4.0, 1.0]);
        assert!((vecs[(0, 0)].abs() - 1.0).abs() < 1e-12 && vecs[(1, 0)].abs() < 1e-12);
        assert!((vecs[(1, 1)].abs() - 1.0).abs() < 1e-12 && vecs[(0, 1)].abs() < 1e-12);

        let m = DenseMatrix::from_rows(&[vec![2.0f64, 1.0], vec![1.0, 2.0]]).unwrap();
        let (vals, _) = sym_eig(&m).unwrap();
        assert!((vals[0] - 3.0).abs() < 1e-12 && (vals[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_asymmetric_input() {
        let m = DenseMatrix::from_rows(&[vec![1.0f64, 2.0], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(sym_eig(&m), Err(Error::InvalidArgument(_))));
        assert!(sym_eig(&DenseMatrix::<f64>::zeros(2, 3)).is_err());
    }

    #[test]
    fn reconstructs_random_symmetric_matrices() {
        let mut rng = SeededRng::new(11);
        for n in [1usize, 2, 5, 17, 48] {
            for _ in 0..3 {
                let mut m = DenseMatrix::zeros(n, n);
                for i in 0..n {
                    for j in 0..=i {
                        let x = rng.normal();
                        m[(i, j)] = x;
                        m[(j, i)] = x;
                    }
                }
                let err = relative_error(&m);
                assert!(err <= 1e-6, "n={n} relative error {err}");
                let (vals, _) = sym_eig(&m).unwrap();
                assert!(vals.as_slice().windows(2).all(|w| w[0] >= w[1]));
            }
        }
    }

    #[test]
    fn psd_sqrt_squares_back() {
        let m = DenseMatrix::from_rows(&[vec![4.0f64, 1.0], vec![1.0, 3.0]]).unwrap();
        let r = psd_sqrt(&m).unwrap();
        let back = r.matmul(&r).unwrap();
        assert!(back.sub(&m).unwrap().max_abs() < 1e-10);
    }
}
