//! Symmetric eigenvalues by cyclic Jacobi rotations.

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

pub const JACOBI_TOL: f64 = 1e-10;
pub const JACOBI_MAX_SWEEPS: usize = 100;

/// All eigenvalues of a symmetric matrix, ascending.
///
/// The input is symmetrized as `(A + Aᵀ)/2` first. Sweeps stop once the
/// off-diagonal Frobenius norm falls below `1e-10 · max(1, ‖A‖_F)`.
pub fn sym_eigvals<T: Scalar>(a: &Tensor<T>) -> Result<Vec<T>> {
    let (n, m) = a.dims2()?;
    if n != m {
        return Err(Error::Shape(format!("eigensolver needs a square matrix, got {n}x{m}")));
    }
    if !a.is_finite() {
        return Err(Error::NonFinite("sym_eigvals input"));
    }
    let half = T::lit(0.5);
    let mut w = vec![T::zero(); n * n];
    for i in 0..n {
        for j in 0..n {
            w[i * n + j] = half * (a.at(i, j) + a.at(j, i));
        }
    }
    let frob = w.iter().map(|&x| x * x).sum::<T>().sqrt();
    let tol = T::lit(JACOBI_TOL) * frob.max(T::one());

    let off_norm = |w: &[T]| -> T {
        let mut s = T::zero();
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s = s + w[i * n + j] * w[i * n + j];
                }
            }
        }
        s.sqrt()
    };

    let mut sweeps = 0;
    loop {
        let off = off_norm(&w);
        if off <= tol {
            break;
        }
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(Error::NoConvergence {
                sweeps,
                off_norm: off.to_f64_lossy(),
            });
        }
        sweeps += 1;
        for p in 0..n.saturating_sub(1) {
            for q in (p + 1)..n {
                let apq = w[p * n + q];
                if apq == T::zero() {
                    continue;
                }
                let app = w[p * n + p];
                let aqq = w[q * n + q];
                // tangent of the rotation angle that zeroes (p, q)
                let theta = (aqq - app) / (T::lit(2.0) * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let t = if theta == T::zero() { T::one() } else { t };
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = w[k * n + p];
                    let akq = w[k * n + q];
                    w[k * n + p] = c * akp - s * akq;
                    w[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = w[p * n + k];
                    let aqk = w[q * n + k];
                    w[p * n + k] = c * apk - s * aqk;
                    w[q * n + k] = s * apk + c * aqk;
                }
                w[p * n + q] = T::zero();
                w[q * n + p] = T::zero();
            }
        }
    }
    let mut eig: Vec<T> = (0..n).map(|i| w[i * n + i]).collect();
    eig.sort_by(|a, b| a.partial_cmp(b).expect("finite eigenvalues"));
    Ok(eig)
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn sym_eig_min<T: Scalar>(a: &Tensor<T>) -> Result<T> {
    let eig = sym_eigvals(a)?;
    eig.first()
        .copied()
        .ok_or_else(|| Error::Shape("empty matrix has no eigenvalues".into()))
}

/// Largest eigenvalue of a symmetric matrix.
pub fn sym_eig_max<T: Scalar>(a: &Tensor<T>) -> Result<T> {
    let eig = sym_eigvals(a)?;
    eig.last()
        .copied()
        .ok_or_else(|| Error::Shape("empty matrix has no eigenvalues".into()))
}
