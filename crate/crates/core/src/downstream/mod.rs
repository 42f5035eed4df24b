//! IV-based counterfactual estimators and the summary-instrument baselines.
//!
//! Every estimator consumes an [`InstrumentBundle`] plus the treatment and
//! outcome columns, and predicts the structural response at `(x, exogenous)`.
//! Exogenous covariates enter both stages.

mod kernel;
mod linear;
mod nn;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::datagen::{ColumnStats, Response};
use crate::error::{ensure, Error, Result};
use crate::numcore::Tensor;

pub use kernel::{kernel_ridge_predict, kerneliv_fit, median_heuristic, rbf_gram, KernelIv, KernelIvConfig};
pub use linear::{ols_fit, twosls_poly_fit, twosls_van_fit, PolyFeatures, RidgeFit, TwoSlsPoly, TwoSlsVan};
pub use nn::{direct_nn_fit, twosls_nn_fit, DirectNn, MlpRegressor, NnRegConfig, TwoSlsNn};

/// Instrument columns plus the covariates that enter both stages directly.
#[derive(Clone, Debug, PartialEq)]
pub struct InstrumentBundle {
    pub instrument: Tensor,
    pub exogenous: Tensor,
}

impl InstrumentBundle {
    pub fn new(instrument: Tensor, exogenous: Tensor) -> Result<Self> {
        ensure!(
            instrument.rows() == exogenous.rows(),
            "instrument has {} rows, exogenous {}",
            instrument.rows(),
            exogenous.rows()
        );
        Ok(InstrumentBundle { instrument, exogenous })
    }

    pub fn n(&self) -> usize {
        self.instrument.rows()
    }

    pub(crate) fn check(&self, x: &Tensor, y: &Tensor) -> Result<()> {
        ensure!(
            x.rows() == self.n() && y.rows() == self.n(),
            "bundle has {} rows, x {}, y {}",
            self.n(),
            x.rows(),
            y.rows()
        );
        ensure!(x.cols() == 1 && y.cols() == 1, "x and y must be single columns");
        Ok(())
    }
}

/// Row-wise mean of the candidates.
pub fn uas_summary(candidates: &Tensor) -> Result<Tensor> {
    let k = candidates.cols();
    ensure!(k >= 1, "UAS needs at least one candidate");
    Ok(Tensor::column(
        (0..candidates.rows())
            .map(|i| candidates.row(i).iter().sum::<f64>() / k as f64)
            .collect(),
    ))
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa <= 0.0 || sbb <= 0.0 {
        None
    } else {
        Some(sab / (saa * sbb).sqrt())
    }
}

/// Weights `|corr(candidate_j, x)|`, normalized to sum to one.
pub fn was_weights(candidates: &Tensor, x: &Tensor) -> Result<Vec<f64>> {
    let k = candidates.cols();
    ensure!(k >= 1, "WAS needs at least one candidate");
    ensure!(candidates.rows() == x.rows(), "candidates and x row counts differ");
    let xs = x.col(0);
    let mut w = Vec::with_capacity(k);
    for j in 0..k {
        match pearson(&candidates.col(j), &xs) {
            Some(r) => w.push(r.abs()),
            None => return Err(Error::Contract(format!("candidate {j} (or x) has zero variance"))),
        }
    }
    let total: f64 = w.iter().sum();
    ensure!(total > 0.0, "no candidate is correlated with x");
    Ok(w.into_iter().map(|v| v / total).collect())
}

/// `Σ_j w_j · candidate_j` with [`was_weights`].
pub fn was_summary(candidates: &Tensor, x: &Tensor) -> Result<Tensor> {
    let w = was_weights(candidates, x)?;
    apply_weights(candidates, &w)
}

pub fn apply_weights(candidates: &Tensor, w: &[f64]) -> Result<Tensor> {
    ensure!(w.len() == candidates.cols(), "one weight per candidate");
    candidates.matmul(&Tensor::column(w.to_vec()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Downstream {
    DirectNn,
    TwoslsVan,
    TwoslsPoly,
    TwoslsNn,
    Kerneliv,
}

impl Downstream {
    /// Table order.
    pub const ALL: &'static [Downstream] = &[
        Downstream::DirectNn,
        Downstream::TwoslsVan,
        Downstream::TwoslsPoly,
        Downstream::TwoslsNn,
        Downstream::Kerneliv,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Downstream::DirectNn => "direct_nn",
            Downstream::TwoslsVan => "twosls_van",
            Downstream::TwoslsPoly => "twosls_poly",
            Downstream::TwoslsNn => "twosls_nn",
            Downstream::Kerneliv => "kerneliv",
        }
    }

    /// Whether the method consumes instruments at all.
    pub fn uses_instrument(self) -> bool {
        self != Downstream::DirectNn
    }
}

impl fmt::Display for Downstream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Downstream {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Downstream::ALL
            .iter()
            .copied()
            .find(|d| d.name() == s)
            .ok_or_else(|| Error::Contract(format!("unknown downstream method {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DownstreamConfig {
    pub poly_degree: usize,
    pub poly_ridge: f64,
    pub nn: NnRegConfig,
    pub kernel: KernelIvConfig,
}

impl Default for DownstreamConfig {
    fn default() -> Self {
        DownstreamConfig {
            poly_degree: 3,
            poly_ridge: 1e-3,
            nn: NnRegConfig::default(),
            kernel: KernelIvConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum FittedModel {
    Van(TwoSlsVan),
    Poly(TwoSlsPoly),
    Nn(TwoSlsNn),
    Kernel(KernelIv),
    Direct(DirectNn),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FittedEstimator {
    pub method: Downstream,
    pub model: FittedModel,
}

impl FittedEstimator {
    /// Structural prediction `ĝ(x, exogenous)`.
    pub fn predict(&self, x: &Tensor, exogenous: &Tensor) -> Result<Tensor> {
        match &self.model {
            FittedModel::Van(m) => m.predict(x, exogenous),
            FittedModel::Poly(m) => m.predict(x, exogenous),
            FittedModel::Nn(m) => m.predict(x, exogenous),
            FittedModel::Kernel(m) => m.predict(x, exogenous),
            FittedModel::Direct(m) => m.predict(x, exogenous),
        }
    }
}

/// Fits `method`. `DirectNn` ignores the instrument columns.
pub fn fit(
    method: Downstream,
    bundle: &InstrumentBundle,
    x: &Tensor,
    y: &Tensor,
    cfg: &DownstreamConfig,
    seed: u64,
) -> Result<FittedEstimator> {
    let model = match method {
        Downstream::TwoslsVan => FittedModel::Van(twosls_van_fit(bundle, x, y)?),
        Downstream::TwoslsPoly => FittedModel::Poly(twosls_poly_fit(bundle, x, y, cfg.poly_degree, cfg.poly_ridge)?),
        Downstream::TwoslsNn => FittedModel::Nn(twosls_nn_fit(bundle, x, y, &cfg.nn, seed)?),
        Downstream::Kerneliv => FittedModel::Kernel(kerneliv_fit(bundle, x, y, &cfg.kernel)?),
        Downstream::DirectNn => FittedModel::Direct(direct_nn_fit(x, y, &bundle.exogenous, &cfg.nn, seed)?),
    };
    Ok(FittedEstimator { method, model })
}

/// The true response on the standardized scale, with covariates at their
/// (zero) means: `(g(μx + sx·x) - μy) / sy`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveTruth {
    pub response: Response,
    pub x_mean: f64,
    pub x_std: f64,
    pub y_mean: f64,
    pub y_std: f64,
}

impl CurveTruth {
    pub fn from_stats(response: Response, x: &ColumnStats, y: &ColumnStats) -> Self {
        CurveTruth {
            response,
            x_mean: x.mean[0],
            x_std: x.std[0],
            y_mean: y.mean[0],
            y_std: y.std[0],
        }
    }

    pub fn eval(&self, x_std: f64) -> f64 {
        (self.response.eval(self.x_mean + self.x_std * x_std) - self.y_mean) / self.y_std
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub x: f64,
    pub g_true: f64,
    pub g_hat: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: Downstream,
    pub mse_test: f64,
    pub curve: Vec<CurvePoint>,
}

/// Equispaced grid over `[lo, hi]`, `size ≥ 2`.
pub fn grid(lo: f64, hi: f64, size: usize) -> Vec<f64> {
    (0..size)
        .map(|i| lo + (hi - lo) * i as f64 / (size - 1) as f64)
        .collect()
}

/// Test MSE of the structural prediction against `y_structural`, plus a
/// response curve over the test-`x` range with the exogenous covariates held
/// at their test means.
pub fn evaluate(
    fitted: &FittedEstimator,
    x: &Tensor,
    exogenous: &Tensor,
    y_structural: &Tensor,
    truth: &CurveTruth,
    grid_size: usize,
) -> Result<EvalReport> {
    ensure!(grid_size >= 2, "grid_size must be at least 2");
    ensure!(
        x.rows() == y_structural.rows() && x.rows() == exogenous.rows() && x.rows() >= 1,
        "test inputs disagree on row counts"
    );
    let pred = fitted.predict(x, exogenous)?;
    let mse_test = mse(&pred, y_structural)?;

    let (lo, hi) = x
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    ensure!(hi > lo, "test treatment has no spread");
    let gx = grid(lo, hi, grid_size);
    let means = exogenous.column_means();
    let exo_grid = if means.is_empty() {
        Tensor::empty_cols(grid_size)
    } else {
        Tensor::matrix(grid_size, means.len(), means.iter().copied().cycle().take(grid_size * means.len()).collect())?
    };
    let ghat = fitted.predict(&Tensor::column(gx.clone()), &exo_grid)?;
    let curve = gx
        .iter()
        .zip(ghat.data())
        .map(|(&x, &g_hat)| CurvePoint {
            x,
            g_true: truth.eval(x),
            g_hat,
        })
        .collect();
    Ok(EvalReport {
        method: fitted.method,
        mse_test,
        curve,
    })
}

pub fn mse(pred: &Tensor, target: &Tensor) -> Result<f64> {
    ensure!(
        pred.len() == target.len() && !pred.is_empty(),
        "cannot compare {:?} with {:?}",
        pred.shape(),
        target.shape()
    );
    let v = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / pred.len() as f64;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Fit {
            stage: "evaluate".into(),
            detail: "non-finite predictions".into(),
        })
    }
}

/// Writes `x,g_true,g_hat` rows.
pub fn write_curve_csv(curve: &[CurvePoint], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["x", "g_true", "g_hat"])?;
    for p in curve {
        w.write_record([p.x.to_string(), p.g_true.to_string(), p.g_hat.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
