use serde::{Deserialize, Serialize};

use super::{DatasetSplits, SyntheticDataset};
use crate::error::{ensure, Result};
use crate::numcore::Tensor;

/// Per-column mean and population standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ColumnStats {
    /// Fits on `t`; `label(j)` names column `j` in the error message.
    pub fn fit(t: &Tensor, label: impl Fn(usize) -> String) -> Result<Self> {
        let n = t.rows();
        ensure!(n >= 1, "cannot standardize an empty split");
        let mean = t.column_means();
        let mut std = Vec::with_capacity(t.cols());
        for (j, &m) in mean.iter().enumerate() {
            let var = (0..n).map(|i| (t.get(i, j) - m).powi(2)).sum::<f64>() / n as f64;
            let s = var.sqrt();
            ensure!(s > 0.0 && s.is_finite(), "column {} has zero variance", label(j));
            std.push(s);
        }
        Ok(ColumnStats { mean, std })
    }

    pub fn apply(&self, t: &Tensor) -> Tensor {
        self.transform(t, |v, m, s| (v - m) / s)
    }

    pub fn invert(&self, t: &Tensor) -> Tensor {
        self.transform(t, |v, m, s| v * s + m)
    }

    fn transform(&self, t: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Tensor {
        let mut out = t.clone();
        let cols = t.cols();
        for (k, v) in out.data_mut().iter_mut().enumerate() {
            let j = k % cols;
            *v = f(*v, self.mean[j], self.std[j]);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StandardizationStats {
    pub v: ColumnStats,
    pub x: ColumnStats,
    pub y: ColumnStats,
    pub true_iv: ColumnStats,
    pub rand_iv: ColumnStats,
    pub exogenous_extra: Option<ColumnStats>,
}

impl StandardizationStats {
    pub fn fit(d: &SyntheticDataset) -> Result<Self> {
        Ok(StandardizationStats {
            v: ColumnStats::fit(&d.v, |j| format!("V[{}] ({})", j, d.column_roles[j].0))?,
            x: ColumnStats::fit(&d.x, |_| "X".into())?,
            y: ColumnStats::fit(&d.y, |_| "Y".into())?,
            true_iv: ColumnStats::fit(&d.true_iv, |j| format!("true_iv[{j}]"))?,
            rand_iv: ColumnStats::fit(&d.rand_iv, |j| format!("rand_iv[{j}]"))?,
            exogenous_extra: d
                .exogenous_extra
                .as_ref()
                .map(|e| ColumnStats::fit(e, |j| format!("exogenous_extra[{j}]")))
                .transpose()?,
        })
    }

    pub fn apply(&self, d: &SyntheticDataset) -> Result<SyntheticDataset> {
        self.check_widths(d)?;
        let y_scale = ColumnStats {
            mean: vec![0.0],
            std: self.y.std.clone(),
        };
        Ok(SyntheticDataset {
            v: self.v.apply(&d.v),
            x: self.x.apply(&d.x),
            y: self.y.apply(&d.y),
            y_structural: self.y.apply(&d.y_structural),
            outcome_noise: y_scale.apply(&d.outcome_noise),
            exogenous_extra: match (&self.exogenous_extra, &d.exogenous_extra) {
                (Some(s), Some(e)) => Some(s.apply(e)),
                _ => None,
            },
            true_iv: self.true_iv.apply(&d.true_iv),
            rand_iv: self.rand_iv.apply(&d.rand_iv),
            column_roles: d.column_roles.clone(),
        })
    }

    pub fn invert(&self, d: &SyntheticDataset) -> Result<SyntheticDataset> {
        self.check_widths(d)?;
        let y_scale = ColumnStats {
            mean: vec![0.0],
            std: self.y.std.clone(),
        };
        Ok(SyntheticDataset {
            v: self.v.invert(&d.v),
            x: self.x.invert(&d.x),
            y: self.y.invert(&d.y),
            y_structural: self.y.invert(&d.y_structural),
            outcome_noise: y_scale.invert(&d.outcome_noise),
            exogenous_extra: match (&self.exogenous_extra, &d.exogenous_extra) {
                (Some(s), Some(e)) => Some(s.invert(e)),
                _ => None,
            },
            true_iv: self.true_iv.invert(&d.true_iv),
            rand_iv: self.rand_iv.invert(&d.rand_iv),
            column_roles: d.column_roles.clone(),
        })
    }

    fn check_widths(&self, d: &SyntheticDataset) -> Result<()> {
        ensure!(
            d.v.cols() == self.v.mean.len()
                && d.true_iv.cols() == self.true_iv.mean.len()
                && d.rand_iv.cols() == self.rand_iv.mean.len()
                && d.exogenous_extra.as_ref().map(Tensor::cols) == self.exogenous_extra.as_ref().map(|s| s.mean.len()),
            "dataset widths do not match the standardization statistics"
        );
        Ok(())
    }
}

/// Standardizes `d` with its own statistics.
pub fn standardize(d: &SyntheticDataset) -> Result<(SyntheticDataset, StandardizationStats)> {
    let stats = StandardizationStats::fit(d)?;
    Ok((stats.apply(d)?, stats))
}

pub fn destandardize(d: &SyntheticDataset, stats: &StandardizationStats) -> Result<SyntheticDataset> {
    stats.invert(d)
}

/// Fits on the training split and applies the same map to all three.
pub fn standardize_splits(s: &DatasetSplits) -> Result<(DatasetSplits, StandardizationStats)> {
    let stats = StandardizationStats::fit(&s.train)?;
    Ok((
        DatasetSplits {
            train: stats.apply(&s.train)?,
            valid: stats.apply(&s.valid)?,
            test: stats.apply(&s.test)?,
        },
        stats,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, DgpSpec, Regime, Response, Scenario};
    use crate::error::Error;

    fn close(a: &Tensor, b: &Tensor, tol: f64) -> bool {
        a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn hand_example() {
        let s = ColumnStats::fit(&Tensor::column(vec![0.0, 2.0]), |_| "c".into()).unwrap();
        assert_eq!(s.mean, vec![1.0]);
        assert_eq!(s.std, vec![1.0]);
        assert_eq!(s.apply(&Tensor::column(vec![0.0, 2.0])).data(), &[-1.0, 1.0]);
    }

    #[test]
    fn zero_variance_names_the_column() {
        let t = Tensor::matrix(2, 2, vec![1.0, 5.0, 2.0, 5.0]).unwrap();
        match ColumnStats::fit(&t, |j| format!("col{j}")) {
            Err(Error::Contract(msg)) => assert!(msg.contains("col1"), "{msg}"),
            other => panic!("expected contract error, got {other:?}"),
        }
    }

    #[test]
    fn round_trip_and_idempotence() {
        let spec = DgpSpec::new(Scenario::ConfoundedLowDim, Response::Poly3d, Regime::WithZ, 300);
        let d = generate(&spec, 8).unwrap().train;
        let (z, stats) = standardize(&d).unwrap();
        let back = destandardize(&z, &stats).unwrap();
        assert!(close(&back.v, &d.v, 1e-12));
        assert!(close(&back.y_structural, &d.y_structural, 1e-12));
        assert!(close(&back.outcome_noise, &d.outcome_noise, 1e-12));
        let (zz, _) = standardize(&z).unwrap();
        assert!(close(&zz.v, &z.v, 1e-12));
        assert!(close(&zz.y, &z.y, 1e-12));
        assert!(z.v.column_means().iter().all(|m| m.abs() < 1e-12));
    }

    #[test]
    fn splits_use_training_statistics() {
        let spec = DgpSpec::new(Scenario::BasicLowDim, Response::Abs, Regime::WithoutZ, 200);
        let raw = generate(&spec, 3).unwrap();
        let (s, stats) = standardize_splits(&raw).unwrap();
        assert!(s.train.x.mean().abs() < 1e-12);
        assert!(close(&s.test.x, &stats.x.apply(&raw.test.x), 0.0));
        // the structural identity survives, up to rounding
        for i in 0..200 {
            let lhs = s.test.y.get(i, 0);
            let rhs = s.test.y_structural.get(i, 0) + s.test.outcome_noise.get(i, 0);
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }
}
