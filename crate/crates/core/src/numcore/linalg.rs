//! Dense symmetric positive-definite solves.

use super::Tensor;
use crate::error::{ensure, Error, Result};

/// Lower-triangular `L` with `L Lᵀ = A + ridge·I`.
pub fn cholesky(a: &Tensor, ridge: f64) -> Result<Tensor> {
    ensure!(
        a.shape().len() == 2 && a.rows() == a.cols(),
        "cholesky needs a square matrix, got {:?}",
        a.shape()
    );
    ensure!(ridge >= 0.0 && ridge.is_finite(), "ridge must be finite and >= 0, got {ridge}");
    let n = a.rows();
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut d = a.get(j, j) + ridge;
        for k in 0..j {
            d -= l[j * n + k] * l[j * n + k];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::Decomposition(format!(
                "matrix is not positive definite (pivot {j} = {d:e})"
            )));
        }
        let d = d.sqrt();
        l[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / d;
        }
    }
    Tensor::matrix(n, n, l)
}

/// Solves `(A + ridge·I) X = B` for symmetric positive-definite `A`.
///
/// `B` may be a matrix (`n × m`) or a vector of length `n`; the result has
/// the same shape as `B`.
pub fn cholesky_solve(a: &Tensor, b: &Tensor, ridge: f64) -> Result<Tensor> {
    let n = a.rows();
    ensure!(b.rows() == n, "right-hand side has {} rows, system has {}", b.rows(), n);
    let l = cholesky(a, ridge)?;
    let m = b.cols();
    let mut x = b.data().to_vec();
    let ld = l.data();
    for c in 0..m {
        // forward: L y = b
        for i in 0..n {
            let mut s = x[i * m + c];
            for k in 0..i {
                s -= ld[i * n + k] * x[k * m + c];
            }
            x[i * m + c] = s / ld[i * n + i];
        }
        // backward: Lᵀ x = y
        for i in (0..n).rev() {
            let mut s = x[i * m + c];
            for k in i + 1..n {
                s -= ld[k * n + i] * x[k * m + c];
            }
            x[i * m + c] = s / ld[i * n + i];
        }
    }
    Tensor::new(b.shape().to_vec(), x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn residual_inf(a: &Tensor, x: &Tensor, b: &Tensor, ridge: f64) -> f64 {
        let mut shifted = a.clone();
        for i in 0..a.rows() {
            shifted.set(i, i, a.get(i, i) + ridge);
        }
        let ax = shifted.matmul(x).unwrap();
        ax.zip_map(b, |p, q| p - q).unwrap().max_abs()
    }

    #[test]
    fn identity_system() {
        let a = Tensor::identity(3);
        let b = Tensor::matrix(3, 2, vec![1.0, -2.0, 0.5, 3.0, 7.0, 0.0]).unwrap();
        assert_eq!(cholesky_solve(&a, &b, 0.0).unwrap(), b);
    }

    #[test]
    fn scaled_identity() {
        let a = Tensor::identity(3).map(|v| 2.0 * v);
        let x = cholesky_solve(&a, &Tensor::identity(3), 0.0).unwrap();
        let expect = Tensor::identity(3).map(|v| 0.5 * v);
        for (a, b) in x.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn random_spd_multiply_back() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let m = Tensor::matrix(5, 5, (0..25).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let mut a = m.transpose().matmul(&m).unwrap();
            for i in 0..5 {
                a.set(i, i, a.get(i, i) + 1.0);
            }
            let b = Tensor::matrix(5, 3, (0..15).map(|_| rng.gen_range(-5.0..5.0)).collect()).unwrap();
            for ridge in [0.0, 0.3] {
                let x = cholesky_solve(&a, &b, ridge).unwrap();
                assert!(residual_inf(&a, &x, &b, ridge) <= 1e-8 * (1.0 + b.max_abs()));
            }
        }
    }

    #[test]
    fn indefinite_matrix_fails() {
        let a = Tensor::matrix(2, 2, vec![1.0, 2.0, 2.0, 1.0]).unwrap();
        let b = Tensor::column(vec![1.0, 1.0]);
        assert!(matches!(cholesky_solve(&a, &b, 0.0), Err(Error::Decomposition(_))));
        // a large enough ridge restores definiteness
        assert!(cholesky_solve(&a, &b, 2.0).is_ok());
    }
}
