//! Vanilla and polynomial two-stage least squares.

use serde::{Deserialize, Serialize};

use super::InstrumentBundle;
use crate::error::{ensure, Error, Result};
use crate::numcore::{cholesky, cholesky_solve, Tensor};

/// Smallest squared Cholesky pivot, relative to the largest diagonal entry,
/// accepted for an unregularized solve.
const RANK_TOL: f64 = 1e-12;

fn fit_error(stage: &str, detail: impl Into<String>) -> Error {
    Error::Fit {
        stage: stage.to_string(),
        detail: detail.into(),
    }
}

/// Solves `(AᵀA/n + ridge·I) β = Aᵀb/n` for already-centred `A`, `b`.
/// Without a ridge a near-singular Gram matrix is reported as rank deficient.
fn ridge_solve(a: &Tensor, b: &Tensor, ridge: f64, stage: &str) -> Result<Tensor> {
    let n = a.rows() as f64;
    let gram = a.transpose().matmul(a)?.map(|v| v / n);
    let rhs = a.transpose().matmul(b)?.map(|v| v / n);
    if a.cols() == 0 {
        return Ok(Tensor::zeros(&[0, b.cols()]));
    }
    if ridge == 0.0 {
        let l = cholesky(&gram, 0.0).map_err(|e| fit_error(stage, format!("rank deficient design: {e}")))?;
        let max_diag = (0..gram.rows()).map(|i| gram.get(i, i)).fold(0.0, f64::max);
        let min_pivot = (0..l.rows()).map(|i| l.get(i, i).powi(2)).fold(f64::INFINITY, f64::min);
        if min_pivot <= RANK_TOL * max_diag {
            return Err(fit_error(stage, "rank deficient design"));
        }
    }
    cholesky_solve(&gram, &rhs, ridge).map_err(|e| fit_error(stage, e.to_string()))
}

fn center(t: &Tensor) -> (Tensor, Vec<f64>) {
    let means = t.column_means();
    let neg: Vec<f64> = means.iter().map(|m| -m).collect();
    let centred = t.add_row(&Tensor::vector(neg)).expect("width matches");
    (centred, means)
}

/// Ridge regression with an unpenalized intercept.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RidgeFit {
    /// `p × m` coefficients.
    pub coef: Tensor,
    pub intercept: Vec<f64>,
}

impl RidgeFit {
    pub fn fit(a: &Tensor, b: &Tensor, ridge: f64, stage: &str) -> Result<Self> {
        ensure!(a.rows() == b.rows(), "design has {} rows, target {}", a.rows(), b.rows());
        ensure!(a.rows() >= 1, "cannot regress on zero rows");
        ensure!(ridge >= 0.0, "ridge must be non-negative");
        let (ac, a_mean) = center(a);
        let (bc, b_mean) = center(b);
        let coef = ridge_solve(&ac, &bc, ridge, stage)?;
        let shift = if a.cols() == 0 {
            vec![0.0; b.cols()]
        } else {
            Tensor::matrix(1, a.cols(), a_mean)?.matmul(&coef)?.into_data()
        };
        let intercept = b_mean.iter().zip(shift).map(|(m, s)| m - s).collect();
        Ok(RidgeFit { coef, intercept })
    }

    pub fn predict(&self, a: &Tensor) -> Result<Tensor> {
        ensure!(
            a.cols() == self.coef.rows(),
            "regression expects {} columns, got {}",
            self.coef.rows(),
            a.cols()
        );
        if a.cols() == 0 {
            let row = Tensor::vector(self.intercept.clone());
            return Tensor::zeros(&[a.rows(), self.intercept.len()]).add_row(&row);
        }
        a.matmul(&self.coef)?.add_row(&Tensor::vector(self.intercept.clone()))
    }
}

/// Stage 1: `x ~ [instrument, exogenous, 1]`. Stage 2: `y ~ [x̂, exogenous, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoSlsVan {
    pub stage1: RidgeFit,
    pub stage2: RidgeFit,
}

impl TwoSlsVan {
    /// Coefficient on the treatment in the structural equation.
    pub fn treatment_coefficient(&self) -> f64 {
        self.stage2.coef.get(0, 0)
    }

    pub fn predict(&self, x: &Tensor, exogenous: &Tensor) -> Result<Tensor> {
        self.stage2.predict(&Tensor::concat_cols(&[x, exogenous])?)
    }
}

pub fn twosls_van_fit(bundle: &InstrumentBundle, x: &Tensor, y: &Tensor) -> Result<TwoSlsVan> {
    bundle.check(x, y)?;
    let z = Tensor::concat_cols(&[&bundle.instrument, &bundle.exogenous])?;
    let stage1 = RidgeFit::fit(&z, x, 0.0, "stage 1")?;
    let xhat = stage1.predict(&z)?;
    let stage2 = RidgeFit::fit(&Tensor::concat_cols(&[&xhat, &bundle.exogenous])?, y, 0.0, "stage 2")?;
    Ok(TwoSlsVan { stage1, stage2 })
}

/// Ordinary least squares of `y` on `[x, exogenous, 1]`, ignoring endogeneity.
pub fn ols_fit(x: &Tensor, exogenous: &Tensor, y: &Tensor) -> Result<RidgeFit> {
    RidgeFit::fit(&Tensor::concat_cols(&[x, exogenous])?, y, 0.0, "ols")
}

/// Every monomial of total degree `1..=degree` over the input columns, with
/// cross terms and without the constant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolyFeatures {
    pub input_dim: usize,
    pub degree: usize,
    /// Each monomial as a sorted list of input column indices.
    pub terms: Vec<Vec<usize>>,
}

impl PolyFeatures {
    pub fn new(input_dim: usize, degree: usize) -> Self {
        let mut terms = Vec::new();
        let mut frontier: Vec<Vec<usize>> = vec![Vec::new()];
        for _ in 0..degree {
            let mut next = Vec::new();
            for t in &frontier {
                let start = t.last().copied().unwrap_or(0);
                for j in start..input_dim {
                    let mut m = t.clone();
                    m.push(j);
                    next.push(m);
                }
            }
            terms.extend(next.iter().cloned());
            frontier = next;
        }
        PolyFeatures {
            input_dim,
            degree,
            terms,
        }
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn transform(&self, t: &Tensor) -> Result<Tensor> {
        ensure!(
            t.cols() == self.input_dim,
            "polynomial basis expects {} columns, got {}",
            self.input_dim,
            t.cols()
        );
        let n = t.rows();
        if self.terms.is_empty() {
            return Ok(Tensor::empty_cols(n));
        }
        let mut out = Vec::with_capacity(n * self.terms.len());
        for i in 0..n {
            let row = t.row(i);
            out.extend(self.terms.iter().map(|m| m.iter().map(|&j| row[j]).product::<f64>()));
        }
        Tensor::matrix(n, self.terms.len(), out)
    }
}

/// 2SLS with polynomial bases on both stages: every treatment feature
/// `Φ(x, c)` is ridge-regressed on the instrument features `Ψ(z, c)`, then `y`
/// is ridge-regressed on the fitted `Φ̂`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoSlsPoly {
    pub treatment_basis: PolyFeatures,
    pub instrument_basis: PolyFeatures,
    pub stage1: RidgeFit,
    pub stage2: RidgeFit,
}

impl TwoSlsPoly {
    pub fn predict(&self, x: &Tensor, exogenous: &Tensor) -> Result<Tensor> {
        let phi = self.treatment_basis.transform(&Tensor::concat_cols(&[x, exogenous])?)?;
        self.stage2.predict(&phi)
    }
}

pub fn twosls_poly_fit(bundle: &InstrumentBundle, x: &Tensor, y: &Tensor, degree: usize, ridge: f64) -> Result<TwoSlsPoly> {
    bundle.check(x, y)?;
    ensure!(degree >= 1, "polynomial degree must be at least 1");
    ensure!(ridge >= 0.0 && ridge.is_finite(), "ridge must be finite and non-negative");
    let xc = Tensor::concat_cols(&[x, &bundle.exogenous])?;
    let zc = Tensor::concat_cols(&[&bundle.instrument, &bundle.exogenous])?;
    let treatment_basis = PolyFeatures::new(xc.cols(), degree);
    let instrument_basis = PolyFeatures::new(zc.cols(), degree);
    let phi = treatment_basis.transform(&xc)?;
    let psi = instrument_basis.transform(&zc)?;
    let stage1 = RidgeFit::fit(&psi, &phi, ridge, "stage 1")?;
    let phi_hat = stage1.predict(&psi)?;
    let stage2 = RidgeFit::fit(&phi_hat, y, ridge, "stage 2")?;
    Ok(TwoSlsPoly {
        treatment_basis,
        instrument_basis,
        stage1,
        stage2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn col(v: Vec<f64>) -> Tensor {
        Tensor::column(v)
    }

    #[test]
    fn ridge_fit_recovers_affine_map() {
        let a = Tensor::matrix(4, 2, vec![0.0, 1.0, 1.0, 0.0, 2.0, 5.0, -1.0, 3.0]).unwrap();
        let b: Vec<f64> = (0..4).map(|i| 2.0 * a.get(i, 0) - a.get(i, 1) + 0.5).collect();
        let f = RidgeFit::fit(&a, &col(b), 0.0, "s").unwrap();
        assert!((f.coef.get(0, 0) - 2.0).abs() < 1e-12);
        assert!((f.coef.get(1, 0) + 1.0).abs() < 1e-12);
        assert!((f.intercept[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn duplicate_columns_are_rank_deficient() {
        let a = Tensor::matrix(3, 2, vec![1.0, 1.0, 2.0, 2.0, 4.0, 4.0]).unwrap();
        let err = RidgeFit::fit(&a, &col(vec![1.0, 2.0, 3.0]), 0.0, "stage 1").unwrap_err();
        assert!(matches!(err, Error::Fit { ref stage, .. } if stage == "stage 1"), "{err}");
        assert!(RidgeFit::fit(&a, &col(vec![1.0, 2.0, 3.0]), 1e-3, "stage 1").is_ok());
    }

    #[test]
    fn poly_feature_counts() {
        // C(k + d, d) - 1 monomials
        assert_eq!(PolyFeatures::new(1, 3).len(), 3);
        assert_eq!(PolyFeatures::new(2, 2).len(), 5);
        assert_eq!(PolyFeatures::new(5, 3).len(), 55);
        assert_eq!(PolyFeatures::new(0, 3).len(), 0);
        let f = PolyFeatures::new(2, 2);
        let t = f.transform(&Tensor::matrix(1, 2, vec![2.0, 3.0]).unwrap()).unwrap();
        assert_eq!(t.data(), &[2.0, 3.0, 4.0, 6.0, 9.0]);
    }

    #[test]
    fn noiseless_linear_identification() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 200;
        let z: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x: Vec<f64> = z.iter().map(|v| 2.0 * v + 0.3).collect();
        let y: Vec<f64> = x.iter().map(|v| -v).collect();
        let b = InstrumentBundle::new(col(z), Tensor::empty_cols(n)).unwrap();
        let fit = twosls_van_fit(&b, &col(x), &col(y)).unwrap();
        assert!((fit.treatment_coefficient() + 1.0).abs() < 1e-8);
    }

    #[test]
    fn poly_degree_one_matches_van() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 300;
        let inst = Tensor::matrix(n, 2, (0..2 * n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let exo = Tensor::matrix(n, 1, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let e: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x: Vec<f64> = (0..n).map(|i| inst.get(i, 0) - inst.get(i, 1) + exo.get(i, 0) + e[i]).collect();
        let y: Vec<f64> = (0..n).map(|i| (x[i]).abs() + exo.get(i, 0) + e[i]).collect();
        let b = InstrumentBundle::new(inst, exo.clone()).unwrap();
        let (x, y) = (col(x), col(y));
        let van = twosls_van_fit(&b, &x, &y).unwrap();
        let poly = twosls_poly_fit(&b, &x, &y, 1, 0.0).unwrap();
        let a = van.predict(&x, &exo).unwrap();
        let p = poly.predict(&x, &exo).unwrap();
        for (u, v) in a.data().iter().zip(p.data()) {
            assert!((u - v).abs() < 1e-8);
        }
    }

    #[test]
    fn huge_ridge_gives_intercept_only() {
        let n = 50;
        let z = col((0..n).map(|i| (i as f64 * 0.37).sin()).collect());
        let x = col((0..n).map(|i| z.get(i, 0) * 2.0 + (i as f64).cos()).collect());
        let y = col((0..n).map(|i| x.get(i, 0).abs() + 1.5).collect());
        let b = InstrumentBundle::new(z, Tensor::empty_cols(n)).unwrap();
        let fit = twosls_poly_fit(&b, &x, &y, 3, 1e12).unwrap();
        assert!(fit.stage2.coef.max_abs() < 1e-9);
        let p = fit.predict(&x, &Tensor::empty_cols(n)).unwrap();
        let ybar = y.mean();
        assert!(p.data().iter().all(|v| (v - ybar).abs() < 1e-8));
    }
}
