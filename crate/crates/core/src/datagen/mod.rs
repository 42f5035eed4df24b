//! Seeded structural-equation generators for the synthetic benchmarks.
//!
//! Every scenario draws all of its latent blocks for a split first, then
//! assembles the candidate matrix `V` according to the [`Regime`]. The same
//! seed therefore yields the same draws under both regimes; `without_z` only
//! drops the instrument columns.
//!
//! Splits are independent draws from separate ChaCha streams of the same
//! seed, so the test split does not move when `n_train` changes.

mod io;
mod standardize;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::numcore::Tensor;

pub use io::{export_dataset, import_dataset, DatasetSidecar, DATASET_FORMAT};
pub use standardize::{destandardize, standardize, standardize_splits, ColumnStats, StandardizationStats};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    BasicLowDim,
    ConfoundedLowDim,
    GaussianComposition,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Response {
    Step,
    Abs,
    Linear,
    Poly2d,
    Poly3d,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    WithZ,
    WithoutZ,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnRole {
    Iv,
    Confounder,
    Adjustment,
    Unconcerned,
    Noise,
}

macro_rules! names {
    ($ty:ident { $($variant:ident => $name:literal),+ $(,)? }) => {
        impl $ty {
            pub const ALL: &'static [$ty] = &[$($ty::$variant),+];

            pub fn name(self) -> &'static str {
                match self {
                    $($ty::$variant => $name),+
                }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($ty::$variant),)+
                    other => Err(Error::Contract(format!(
                        concat!("unknown ", stringify!($ty), " {:?}"),
                        other
                    ))),
                }
            }
        }
    };
}

names!(Scenario {
    BasicLowDim => "basic_low_dim",
    ConfoundedLowDim => "confounded_low_dim",
    GaussianComposition => "gaussian_composition",
});
names!(Response {
    Step => "step",
    Abs => "abs",
    Linear => "linear",
    Poly2d => "poly2d",
    Poly3d => "poly3d",
});
names!(Regime {
    WithZ => "with_z",
    WithoutZ => "without_z",
});

impl Response {
    pub fn eval(self, x: f64) -> f64 {
        match self {
            Response::Step => {
                if x >= 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Response::Abs => x.abs(),
            Response::Linear => -x,
            Response::Poly2d => -0.1 * x * x - 0.4 * x,
            Response::Poly3d => 0.05 * x * x * x + 0.1 * x * x - 0.8 * x,
        }
    }
}

/// `g(x)` looked up by name.
pub fn response_function(name: &str, x: f64) -> Result<f64> {
    Ok(name.parse::<Response>()?.eval(x))
}

/// Block widths for the Gaussian composition scenario.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CompositionDims {
    pub dz: usize,
    pub df: usize,
    pub da: usize,
    pub du: usize,
}

impl Default for CompositionDims {
    fn default() -> Self {
        CompositionDims {
            dz: 10,
            df: 10,
            da: 4,
            du: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    pub scenario: Scenario,
    pub response: Response,
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
    pub regime: Regime,
    #[serde(default)]
    pub dims: CompositionDims,
    /// Standard deviation of the shared endogenous error `e`.
    #[serde(default = "one")]
    pub e_std: f64,
    /// Variance of the treatment noise `γ` and outcome noise `σ`.
    #[serde(default = "default_noise_var")]
    pub noise_var: f64,
}

fn one() -> f64 {
    1.0
}

fn default_noise_var() -> f64 {
    0.1
}

impl DgpSpec {
    pub fn new(scenario: Scenario, response: Response, regime: Regime, n: usize) -> Self {
        DgpSpec {
            scenario,
            response,
            n_train: n,
            n_valid: n,
            n_test: n,
            regime,
            dims: CompositionDims::default(),
            e_std: 1.0,
            noise_var: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.n_train >= 1 && self.n_valid >= 1 && self.n_test >= 1,
            "sample counts must be at least 1, got {}/{}/{}",
            self.n_train,
            self.n_valid,
            self.n_test
        );
        ensure!(
            self.e_std >= 0.0 && self.e_std.is_finite(),
            "e_std must be finite and non-negative"
        );
        ensure!(
            self.noise_var >= 0.0 && self.noise_var.is_finite(),
            "noise_var must be finite and non-negative"
        );
        if self.scenario == Scenario::GaussianComposition {
            ensure!(self.dims.dz >= 1, "composition needs dZ >= 1");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDataset {
    /// IV candidates, `N × dV`.
    pub v: Tensor,
    pub x: Tensor,
    pub y: Tensor,
    /// Noiseless outcome: `g(X)` plus the structural covariate terms.
    pub y_structural: Tensor,
    /// `Y - y_structural` at generation time; scaled along with `Y`.
    pub outcome_noise: Tensor,
    /// Observed covariates handed straight to the downstream estimators.
    pub exogenous_extra: Option<Tensor>,
    pub true_iv: Tensor,
    /// Fresh draws from the instrument distribution, independent of everything.
    pub rand_iv: Tensor,
    /// One `(name, role)` pair per column of `v`.
    pub column_roles: Vec<(String, ColumnRole)>,
}

impl SyntheticDataset {
    pub fn n(&self) -> usize {
        self.x.rows()
    }

    pub fn exogenous_or_empty(&self) -> Tensor {
        self.exogenous_extra.clone().unwrap_or_else(|| Tensor::empty_cols(self.n()))
    }

    pub fn columns_with_role(&self, role: ColumnRole) -> Vec<usize> {
        self.column_roles
            .iter()
            .enumerate()
            .filter(|(_, (_, r))| *r == role)
            .map(|(i, _)| i)
            .collect()
    }

    fn check(&self) -> Result<()> {
        let n = self.n();
        let mut all = vec![&self.v, &self.y, &self.y_structural, &self.outcome_noise, &self.true_iv, &self.rand_iv];
        if let Some(e) = &self.exogenous_extra {
            all.push(e);
        }
        ensure!(all.iter().all(|t| t.rows() == n), "row counts disagree");
        ensure!(self.column_roles.len() == self.v.cols(), "one role per column of V");
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplits {
    pub train: SyntheticDataset,
    pub valid: SyntheticDataset,
    pub test: SyntheticDataset,
}

impl DatasetSplits {
    pub fn iter(&self) -> impl Iterator<Item = (&'static str, &SyntheticDataset)> {
        [("train", &self.train), ("valid", &self.valid), ("test", &self.test)].into_iter()
    }
}

fn split_rng(seed: u64, split: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(split);
    rng
}

/// Stream reserved for the RandIV draws of each split.
const RAND_IV_STREAM: u64 = 1 << 32;

fn uniform_block(rng: &mut impl Rng, n: usize, d: usize, half: f64) -> Vec<Vec<f64>> {
    let u = Uniform::new_inclusive(-half, half);
    (0..n).map(|_| (0..d).map(|_| u.sample(rng)).collect()).collect()
}

fn normal_vec(rng: &mut impl Rng, n: usize, std: f64) -> Vec<f64> {
    let dist = Normal::new(0.0, std).expect("std is validated non-negative");
    (0..n).map(|_| dist.sample(rng)).collect()
}

fn normal_block(rng: &mut impl Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    let dist = Normal::new(0.0, 1.0).expect("unit normal");
    (0..n).map(|_| (0..d).map(|_| dist.sample(rng)).collect()).collect()
}

fn row_mean(r: &[f64]) -> f64 {
    if r.is_empty() {
        0.0
    } else {
        r.iter().sum::<f64>() / r.len() as f64
    }
}

/// Concatenates per-row slices into an `N × d` tensor.
fn assemble(n: usize, parts: &[&dyn Fn(usize) -> Vec<f64>]) -> Tensor {
    let mut data = Vec::new();
    let mut d = 0;
    for i in 0..n {
        let mut row = Vec::new();
        for p in parts {
            row.extend(p(i));
        }
        d = row.len();
        data.extend(row);
    }
    if n == 0 {
        return Tensor::zeros(&[0, 0]);
    }
    Tensor::matrix(n, d, data).expect("rows have equal width")
}

fn named(prefix: &str, d: usize, role: ColumnRole) -> Vec<(String, ColumnRole)> {
    (1..=d).map(|i| (format!("{prefix}{i}"), role)).collect()
}

/// Instrument distribution of a scenario, used for both `true_iv` and RandIV.
fn draw_instrument(spec: &DgpSpec, rng: &mut impl Rng, n: usize) -> Vec<Vec<f64>> {
    match spec.scenario {
        Scenario::BasicLowDim => uniform_block(rng, n, 2, 3.0),
        Scenario::ConfoundedLowDim => uniform_block(rng, n, 2, 0.5),
        Scenario::GaussianComposition => normal_block(rng, n, spec.dims.dz),
    }
}

fn rand_iv(spec: &DgpSpec, seed: u64, split: u64, n: usize) -> Tensor {
    let mut rng = split_rng(seed, RAND_IV_STREAM + split);
    let rows = draw_instrument(spec, &mut rng, n);
    Tensor::from_rows(&rows).unwrap_or_else(|_| Tensor::empty_cols(n))
}

fn gen_split(spec: &DgpSpec, seed: u64, split: u64, n: usize) -> Result<SyntheticDataset> {
    let mut rng = split_rng(seed, split);
    let g = |x: f64| spec.response.eval(x);
    let noise_std = spec.noise_var.sqrt();
    let with_z = spec.regime == Regime::WithZ;

    let ds = match spec.scenario {
        Scenario::BasicLowDim => {
            let z = draw_instrument(spec, &mut rng, n);
            let e = normal_vec(&mut rng, n, spec.e_std);
            let gamma = normal_vec(&mut rng, n, noise_std);
            let sigma = normal_vec(&mut rng, n, noise_std);
            let x: Vec<f64> = (0..n).map(|i| z[i][0] + e[i] + gamma[i]).collect();
            let ys: Vec<f64> = x.iter().map(|&xi| g(xi)).collect();
            let noise: Vec<f64> = (0..n).map(|i| e[i] + sigma[i]).collect();
            let zp = |i: usize| if with_z { z[i].clone() } else { Vec::new() };
            let gs = |i: usize| vec![gamma[i], sigma[i]];
            let mut roles = if with_z { named("z", 2, ColumnRole::Iv) } else { Vec::new() };
            roles.push(("gamma".into(), ColumnRole::Noise));
            roles.push(("sigma".into(), ColumnRole::Noise));
            SyntheticDataset {
                v: assemble(n, &[&zp, &gs]),
                y: Tensor::column(ys.iter().zip(&noise).map(|(a, b)| a + b).collect()),
                x: Tensor::column(x),
                y_structural: Tensor::column(ys),
                outcome_noise: Tensor::column(noise),
                exogenous_extra: None,
                true_iv: Tensor::from_rows(&z)?,
                rand_iv: rand_iv(spec, seed, split, n),
                column_roles: roles,
            }
        }
        Scenario::ConfoundedLowDim => {
            let z = draw_instrument(spec, &mut rng, n);
            let c = uniform_block(&mut rng, n, 6, 0.5);
            let e = normal_vec(&mut rng, n, spec.e_std);
            let gamma = normal_vec(&mut rng, n, noise_std);
            let sigma = normal_vec(&mut rng, n, noise_std);
            let csum: Vec<f64> = c.iter().map(|r| r.iter().sum()).collect();
            let x: Vec<f64> = (0..n).map(|i| z[i][0] + z[i][1] + csum[i] + e[i] + gamma[i]).collect();
            let ys: Vec<f64> = (0..n).map(|i| g(x[i]) + csum[i]).collect();
            let noise: Vec<f64> = (0..n).map(|i| e[i] + sigma[i]).collect();
            let zp = |i: usize| if with_z { z[i].clone() } else { Vec::new() };
            let cp = |i: usize| c[i][..4].to_vec();
            let gs = |i: usize| vec![gamma[i], sigma[i]];
            let extra = |i: usize| c[i][4..].to_vec();
            let mut roles = if with_z { named("z", 2, ColumnRole::Iv) } else { Vec::new() };
            roles.extend(named("c", 4, ColumnRole::Confounder));
            roles.push(("gamma".into(), ColumnRole::Noise));
            roles.push(("sigma".into(), ColumnRole::Noise));
            SyntheticDataset {
                v: assemble(n, &[&zp, &cp, &gs]),
                y: Tensor::column(ys.iter().zip(&noise).map(|(a, b)| a + b).collect()),
                x: Tensor::column(x),
                y_structural: Tensor::column(ys),
                outcome_noise: Tensor::column(noise),
                exogenous_extra: Some(assemble(n, &[&extra])),
                true_iv: Tensor::from_rows(&z)?,
                rand_iv: rand_iv(spec, seed, split, n),
                column_roles: roles,
            }
        }
        Scenario::GaussianComposition => {
            let d = spec.dims;
            let z = draw_instrument(spec, &mut rng, n);
            let f = normal_block(&mut rng, n, d.df);
            let a = normal_block(&mut rng, n, d.da);
            let u = normal_block(&mut rng, n, d.du);
            let e = normal_vec(&mut rng, n, spec.e_std);
            let x: Vec<f64> = (0..n).map(|i| row_mean(&z[i]) + row_mean(&f[i]) + e[i]).collect();
            let ys: Vec<f64> = (0..n).map(|i| g(x[i]) + row_mean(&f[i]) + row_mean(&a[i])).collect();
            let zp = |i: usize| if with_z { z[i].clone() } else { Vec::new() };
            let fp = |i: usize| f[i].clone();
            let ap = |i: usize| a[i].clone();
            let up = |i: usize| u[i].clone();
            let mut roles = if with_z { named("z", d.dz, ColumnRole::Iv) } else { Vec::new() };
            roles.extend(named("f", d.df, ColumnRole::Confounder));
            roles.extend(named("a", d.da, ColumnRole::Adjustment));
            roles.extend(named("u", d.du, ColumnRole::Unconcerned));
            let width = roles.len();
            let v = assemble(n, &[&zp, &fp, &ap, &up]);
            SyntheticDataset {
                v: if width == 0 { Tensor::empty_cols(n) } else { v },
                y: Tensor::column(ys.iter().zip(&e).map(|(a, b)| a + b).collect()),
                x: Tensor::column(x),
                y_structural: Tensor::column(ys),
                outcome_noise: Tensor::column(e),
                exogenous_extra: None,
                true_iv: Tensor::from_rows(&z)?,
                rand_iv: rand_iv(spec, seed, split, n),
                column_roles: roles,
            }
        }
    };
    ds.check()?;
    Ok(ds)
}

fn gen_scenario(spec: &DgpSpec, seed: u64, expect: Scenario) -> Result<DatasetSplits> {
    spec.validate()?;
    ensure!(
        spec.scenario == expect,
        "generator for {expect} called with scenario {}",
        spec.scenario
    );
    Ok(DatasetSplits {
        train: gen_split(spec, seed, 0, spec.n_train)?,
        valid: gen_split(spec, seed, 1, spec.n_valid)?,
        test: gen_split(spec, seed, 2, spec.n_test)?,
    })
}

/// `X = Z₁ + e + γ`, `Y = g(X) + e + σ`, `Z ~ U[-3, 3]²`.
pub fn gen_basic(spec: &DgpSpec, seed: u64) -> Result<DatasetSplits> {
    gen_scenario(spec, seed, Scenario::BasicLowDim)
}

/// `X = Z₁ + Z₂ + ΣC + e + γ`, `Y = g(X) + ΣC + e + σ`, with `C₅, C₆` observed
/// directly rather than through `V`.
pub fn gen_confounded(spec: &DgpSpec, seed: u64) -> Result<DatasetSplits> {
    gen_scenario(spec, seed, Scenario::ConfoundedLowDim)
}

/// Standard-normal blocks aggregated by per-sample means.
pub fn gen_composition(spec: &DgpSpec, seed: u64) -> Result<DatasetSplits> {
    gen_scenario(spec, seed, Scenario::GaussianComposition)
}

/// Dispatches on `spec.scenario`.
pub fn generate(spec: &DgpSpec, seed: u64) -> Result<DatasetSplits> {
    gen_scenario(spec, seed, spec.scenario)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean_var(v: &[f64]) -> (f64, f64) {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        (m, v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n)
    }

    fn corr(a: &[f64], b: &[f64]) -> f64 {
        let (ma, va) = mean_var(a);
        let (mb, vb) = mean_var(b);
        let cov = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / a.len() as f64;
        cov / (va * vb).sqrt()
    }

    fn quiet(spec: DgpSpec) -> DgpSpec {
        DgpSpec {
            e_std: 0.0,
            noise_var: 0.0,
            ..spec
        }
    }

    #[test]
    fn response_examples() {
        assert_eq!(Response::Step.eval(0.5), -1.0);
        assert_eq!(Response::Step.eval(-0.1), 0.0);
        assert_eq!(Response::Step.eval(0.0), -1.0);
        assert_eq!(Response::Linear.eval(2.0), -2.0);
        assert_eq!(Response::Abs.eval(-3.0), 3.0);
        assert!((Response::Poly3d.eval(2.0) + 0.8).abs() < 1e-12);
        assert!((Response::Poly2d.eval(1.0) + 0.5).abs() < 1e-12);
        assert!(response_function("cubic", 1.0).is_err());
        assert_eq!(response_function("abs", -2.0).unwrap(), 2.0);
    }

    #[test]
    fn basic_noise_free_degenerate() {
        let spec = quiet(DgpSpec::new(Scenario::BasicLowDim, Response::Linear, Regime::WithZ, 50));
        let s = gen_basic(&spec, 3).unwrap();
        for i in 0..50 {
            assert_eq!(s.train.x.get(i, 0), s.train.true_iv.get(i, 0));
            assert_eq!(s.train.y.get(i, 0), -s.train.x.get(i, 0));
        }
    }

    #[test]
    fn basic_moments_and_endogeneity() {
        let spec = DgpSpec::new(Scenario::BasicLowDim, Response::Linear, Regime::WithZ, 100_000);
        let s = gen_basic(&spec, 7).unwrap();
        let (m, v) = mean_var(&s.train.true_iv.col(0));
        assert!(m.abs() < 0.02, "mean {m}");
        // 3 standard errors of the variance estimate: sqrt((µ4 - σ⁴)/n) with µ4 = 81/5
        assert!((v - 3.0).abs() < 3.0 * ((81.0 / 5.0 - 9.0) / 1e5f64).sqrt(), "var {v}");
        let (gm, gv) = mean_var(&s.train.v.col(2));
        assert!(gm.abs() < 3.0 * (0.1f64 / 1e5).sqrt());
        assert!((gv - 0.1).abs() < 3.0 * (2.0 * 0.01f64 / 1e5).sqrt(), "gamma var {gv}");
        let e: Vec<f64> = (0..100_000)
            .map(|i| s.train.outcome_noise.get(i, 0) - s.train.v.get(i, 3))
            .collect();
        assert!(corr(&s.train.x.data()[..10_000], &e[..10_000]) > 0.3);
    }

    #[test]
    fn structural_consistency_is_exact() {
        for scenario in Scenario::ALL {
            let spec = DgpSpec::new(*scenario, Response::Poly3d, Regime::WithZ, 200);
            let s = generate(&spec, 1).unwrap();
            for (_, d) in s.iter() {
                for i in 0..d.n() {
                    assert_eq!(d.y.get(i, 0), d.y_structural.get(i, 0) + d.outcome_noise.get(i, 0));
                }
            }
        }
    }

    #[test]
    fn confounded_widths_and_strength() {
        let with = DgpSpec::new(Scenario::ConfoundedLowDim, Response::Abs, Regime::WithZ, 10_000);
        let without = DgpSpec {
            regime: Regime::WithoutZ,
            ..with.clone()
        };
        let a = gen_confounded(&with, 5).unwrap();
        let b = gen_confounded(&without, 5).unwrap();
        assert_eq!(a.train.v.cols(), 8);
        assert_eq!(b.train.v.cols(), 6);
        assert_eq!(a.train.exogenous_extra.as_ref().unwrap().cols(), 2);
        // same draws, Z columns dropped
        assert_eq!(a.train.v.select_cols(&[2, 3, 4, 5, 6, 7]), b.train.v);
        assert_eq!(a.train.y, b.train.y);

        let d = &a.train;
        let csum: Vec<f64> = (0..d.n())
            .map(|i| d.v.row(i)[2..6].iter().sum::<f64>() + d.exogenous_extra.as_ref().unwrap().row(i).iter().sum::<f64>())
            .collect();
        let resid: Vec<f64> = (0..d.n()).map(|i| d.y.get(i, 0) - Response::Abs.eval(d.x.get(i, 0))).collect();
        let cx = corr(&csum, d.x.data());
        let cy = corr(&csum, &resid);
        // var X = 1/6 + 1/2 + 1 + 0.1, so corr(ΣC, X) ≈ sqrt(0.5 / 1.77) ≈ 0.53
        assert!(cx > 0.5, "corr(C, X) = {cx}");
        assert!(cy > 0.5, "corr(C, Y - g(X)) = {cy}");
    }

    #[test]
    fn confounded_noise_free_degenerate() {
        let spec = quiet(DgpSpec::new(Scenario::ConfoundedLowDim, Response::Linear, Regime::WithZ, 20));
        let d = gen_confounded(&spec, 2).unwrap().train;
        for i in 0..20 {
            let csum = d.v.row(i)[2..6].iter().sum::<f64>() + d.exogenous_extra.as_ref().unwrap().row(i).iter().sum::<f64>();
            assert!((d.y.get(i, 0) - (-d.x.get(i, 0) + csum)).abs() < 1e-12);
        }
    }

    #[test]
    fn without_z_has_no_iv_columns() {
        for scenario in Scenario::ALL {
            let spec = DgpSpec::new(*scenario, Response::Step, Regime::WithoutZ, 10);
            let d = generate(&spec, 0).unwrap().train;
            assert!(d.columns_with_role(ColumnRole::Iv).is_empty());
        }
    }

    #[test]
    fn composition_widths() {
        let mut spec = DgpSpec::new(Scenario::GaussianComposition, Response::Linear, Regime::WithZ, 30);
        assert_eq!(gen_composition(&spec, 1).unwrap().train.v.cols(), 25);
        spec.dims.du = 0;
        let d = gen_composition(&spec, 1).unwrap().train;
        assert_eq!(d.v.cols(), 24);
        assert!(d.columns_with_role(ColumnRole::Unconcerned).is_empty());
        spec.dims.dz = 0;
        assert!(gen_composition(&spec, 1).is_err());
    }

    #[test]
    fn composition_only_z_block() {
        let mut spec = quiet(DgpSpec::new(Scenario::GaussianComposition, Response::Poly2d, Regime::WithZ, 15));
        spec.dims = CompositionDims {
            dz: 3,
            df: 0,
            da: 0,
            du: 0,
        };
        let d = gen_composition(&spec, 9).unwrap().train;
        for i in 0..15 {
            let mz = d.true_iv.row(i).iter().sum::<f64>() / 3.0;
            assert!((d.x.get(i, 0) - mz).abs() < 1e-15);
            assert_eq!(d.y.get(i, 0), Response::Poly2d.eval(d.x.get(i, 0)));
        }
    }

    #[test]
    fn determinism_and_split_independence() {
        let spec = DgpSpec::new(Scenario::ConfoundedLowDim, Response::Step, Regime::WithZ, 40);
        assert_eq!(generate(&spec, 11).unwrap(), generate(&spec, 11).unwrap());
        assert_ne!(generate(&spec, 11).unwrap().train, generate(&spec, 12).unwrap().train);
        let bigger = DgpSpec {
            n_train: 80,
            ..spec.clone()
        };
        assert_eq!(generate(&spec, 11).unwrap().test, generate(&bigger, 11).unwrap().test);
        let s = generate(&spec, 11).unwrap();
        assert_ne!(s.train.x.row(0), s.valid.x.row(0));
    }

    #[test]
    fn rand_iv_independent_of_true_iv() {
        let spec = DgpSpec::new(Scenario::BasicLowDim, Response::Step, Regime::WithZ, 20_000);
        let d = generate(&spec, 4).unwrap().train;
        assert_eq!(d.rand_iv.cols(), 2);
        assert!(corr(&d.rand_iv.col(0), &d.x.col(0)).abs() < 0.03);
        assert!(d.rand_iv.data().iter().all(|v| v.abs() <= 3.0));
    }

    #[test]
    fn names_round_trip() {
        for s in Scenario::ALL {
            assert_eq!(s.name().parse::<Scenario>().unwrap(), *s);
        }
        for r in Response::ALL {
            assert_eq!(r.to_string().parse::<Response>().unwrap(), *r);
        }
        assert!("sometimes_z".parse::<Regime>().is_err());
    }
}
