//! Kernel instrumental-variable regression with RBF kernels.
//!
//! Stage 1 estimates the conditional mean embedding of the treatment
//! features given the instrument features by kernel ridge regression; in
//! dual form that yields `W = K_XX (K_ZZ + λI)⁻¹ K_ZZ`. Stage 2 regresses the
//! centred outcome on the embedded treatment:
//! `α = (W Wᵀ + ξ K_XX)⁻¹ W ỹ`, and `ĝ(x) = Σ_i α_i k(x, x_i) + ȳ`.
//!
//! Both stages use the same sample.

use serde::{Deserialize, Serialize};

use super::InstrumentBundle;
use crate::error::{ensure, Error, Result};
use crate::numcore::{cholesky_solve, Tensor};

/// Relative diagonal jitter that keeps the stage-2 system factorizable.
const JITTER: f64 = 1e-10;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KernelIvConfig {
    /// Instrument-kernel length scale; median heuristic when absent.
    pub scale_z: Option<f64>,
    /// Treatment-kernel length scale; median heuristic when absent.
    pub scale_x: Option<f64>,
    /// Stage-1 ridge `λ`; `1e-3 · N` when absent.
    pub ridge1: Option<f64>,
    /// Stage-2 ridge `ξ`; `1e-3 · N` when absent.
    pub ridge2: Option<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum()
}

/// `exp(-‖a_i - b_j‖² / 2ℓ²)`.
pub fn rbf_gram(a: &Tensor, b: &Tensor, scale: f64) -> Tensor {
    let (n, m) = (a.rows(), b.rows());
    let two_l2 = 2.0 * scale * scale;
    let mut out = Vec::with_capacity(n * m);
    for i in 0..n {
        let ai = a.row(i);
        out.extend((0..m).map(|j| (-sq_dist(ai, b.row(j)) / two_l2).exp()));
    }
    Tensor::matrix(n, m, out).expect("sized above")
}

/// Median of the pairwise Euclidean distances; 1 when every row coincides.
pub fn median_heuristic(a: &Tensor) -> f64 {
    let n = a.rows();
    let mut d: Vec<f64> = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            d.push(sq_dist(a.row(i), a.row(j)).sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(|a, b| a.total_cmp(b));
    let mid = d.len() / 2;
    let med = if d.len().is_multiple_of(2) {
        0.5 * (d[mid - 1] + d[mid])
    } else {
        d[mid]
    };
    if med > 0.0 {
        med
    } else {
        1.0
    }
}

fn solve(a: &Tensor, b: &Tensor, stage: &str) -> Result<Tensor> {
    let n = a.rows().max(1) as f64;
    let trace: f64 = (0..a.rows()).map(|i| a.get(i, i)).sum();
    let jitter = JITTER * (trace / n).max(f64::MIN_POSITIVE);
    cholesky_solve(a, b, jitter).map_err(|e| Error::Fit {
        stage: stage.to_string(),
        detail: e.to_string(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelIv {
    /// Training treatment features `[x, exogenous]`.
    pub support: Tensor,
    pub scale_x: f64,
    pub scale_z: f64,
    pub alpha: Tensor,
    pub y_mean: f64,
}

impl KernelIv {
    pub fn predict(&self, x: &Tensor, exogenous: &Tensor) -> Result<Tensor> {
        let feats = Tensor::concat_cols(&[x, exogenous])?;
        ensure!(
            feats.cols() == self.support.cols(),
            "KernelIV expects {} treatment feature columns, got {}",
            self.support.cols(),
            feats.cols()
        );
        let k = rbf_gram(&feats, &self.support, self.scale_x);
        Ok(k.matmul(&self.alpha)?.map(|v| v + self.y_mean))
    }
}

pub fn kerneliv_fit(bundle: &InstrumentBundle, x: &Tensor, y: &Tensor, cfg: &KernelIvConfig) -> Result<KernelIv> {
    bundle.check(x, y)?;
    let n = x.rows();
    let zf = Tensor::concat_cols(&[&bundle.instrument, &bundle.exogenous])?;
    let xf = Tensor::concat_cols(&[x, &bundle.exogenous])?;
    let scale_z = cfg.scale_z.unwrap_or_else(|| median_heuristic(&zf));
    let scale_x = cfg.scale_x.unwrap_or_else(|| median_heuristic(&xf));
    let ridge1 = cfg.ridge1.unwrap_or(1e-3 * n as f64);
    let ridge2 = cfg.ridge2.unwrap_or(1e-3 * n as f64);
    ensure!(scale_z > 0.0 && scale_x > 0.0, "kernel scales must be positive");
    ensure!(ridge1 > 0.0 && ridge2 > 0.0, "KernelIV ridges must be positive");

    let kzz = rbf_gram(&zf, &zf, scale_z);
    let kxx = rbf_gram(&xf, &xf, scale_x);
    let gamma = cholesky_solve(&kzz, &kzz, ridge1).map_err(|e| Error::Fit {
        stage: "stage 1".into(),
        detail: e.to_string(),
    })?;
    let w = kxx.matmul(&gamma)?;

    let y_mean = y.mean();
    let yc = y.map(|v| v - y_mean);
    let mut a = w.matmul(&w.transpose())?;
    for (av, kv) in a.data_mut().iter_mut().zip(kxx.data()) {
        *av += ridge2 * kv;
    }
    let alpha = solve(&a, &w.matmul(&yc)?, "stage 2")?;
    Ok(KernelIv {
        support: xf,
        scale_x,
        scale_z,
        alpha,
        y_mean,
    })
}

/// Plain kernel ridge regression `y ~ k(x, ·)` with an unpenalized mean.
pub fn kernel_ridge_predict(x: &Tensor, y: &Tensor, scale: f64, ridge: f64, at: &Tensor) -> Result<Tensor> {
    let y_mean = y.mean();
    let k = rbf_gram(x, x, scale);
    let alpha = cholesky_solve(&k, &y.map(|v| v - y_mean), ridge)?;
    Ok(rbf_gram(at, x, scale).matmul(&alpha)?.map(|v| v + y_mean))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn median_of_three_points() {
        // distances 1, 2, 3
        let t = Tensor::column(vec![0.0, 1.0, 3.0]);
        assert_eq!(median_heuristic(&t), 2.0);
        assert_eq!(median_heuristic(&Tensor::column(vec![5.0, 5.0])), 1.0);
    }

    #[test]
    fn instrument_equal_to_treatment_matches_kernel_ridge() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 40;
        let x = Tensor::column((0..n).map(|_| rng.gen_range(-2.0..2.0)).collect());
        let y = Tensor::column(x.data().iter().map(|v| v.abs() + rng.gen_range(-0.1..0.1)).collect());
        let b = InstrumentBundle::new(x.clone(), Tensor::empty_cols(n)).unwrap();
        let cfg = KernelIvConfig {
            scale_z: Some(1.0),
            scale_x: Some(1.0),
            ridge1: Some(1e-9),
            ridge2: Some(0.5),
        };
        let kiv = kerneliv_fit(&b, &x, &y, &cfg).unwrap();
        let grid = Tensor::column(vec![-1.5, -0.5, 0.0, 0.7, 1.9]);
        let p = kiv.predict(&grid, &Tensor::empty_cols(5)).unwrap();
        let q = kernel_ridge_predict(&x, &y, 1.0, 0.5, &grid).unwrap();
        for (u, v) in p.data().iter().zip(q.data()) {
            assert!((u - v).abs() < 1e-3, "{u} vs {v}");
        }
    }

    #[test]
    fn huge_stage_two_ridge_predicts_the_mean() {
        let n = 30;
        let z = Tensor::column((0..n).map(|i| (i as f64 * 0.3).sin()).collect());
        let x = Tensor::column((0..n).map(|i| z.get(i, 0) + (i as f64 * 0.7).cos()).collect());
        let y = x.map(|v| v * v + 1.0);
        let b = InstrumentBundle::new(z, Tensor::empty_cols(n)).unwrap();
        let cfg = KernelIvConfig {
            ridge2: Some(1e12),
            ..KernelIvConfig::default()
        };
        let kiv = kerneliv_fit(&b, &x, &y, &cfg).unwrap();
        let p = kiv.predict(&x, &Tensor::empty_cols(n)).unwrap();
        assert!(p.data().iter().all(|v| (v - y.mean()).abs() < 1e-6));
    }
}
