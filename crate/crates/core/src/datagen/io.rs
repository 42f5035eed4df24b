//! Dataset CSV with a JSON sidecar next to it (`data.csv` + `data.json`).
//!
//! Floats are written in Rust's shortest round-trip form, so an export and
//! re-import reproduces every value bit for bit.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ColumnRole, DgpSpec, SyntheticDataset};
use crate::error::{Error, Result};
use crate::numcore::Tensor;

pub const DATASET_FORMAT: &str = "autoiv-dataset/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSidecar {
    pub format: String,
    pub seed: u64,
    pub split: String,
    pub spec: DgpSpec,
    pub column_roles: Vec<(String, ColumnRole)>,
    pub exogenous_cols: Option<usize>,
    pub true_iv_cols: usize,
    pub rand_iv_cols: usize,
}

fn sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("json")
}

fn header(d: &SyntheticDataset) -> Vec<String> {
    let mut h: Vec<String> = d.column_roles.iter().map(|(n, _)| n.clone()).collect();
    h.extend(["x", "y", "y_structural", "outcome_noise"].map(String::from));
    if let Some(e) = &d.exogenous_extra {
        h.extend((1..=e.cols()).map(|j| format!("exo{j}")));
    }
    h.extend((1..=d.true_iv.cols()).map(|j| format!("true_iv{j}")));
    h.extend((1..=d.rand_iv.cols()).map(|j| format!("rand_iv{j}")));
    h
}

/// Writes `csv_path` and its `.json` sidecar.
pub fn export_dataset(d: &SyntheticDataset, spec: &DgpSpec, seed: u64, split: &str, csv_path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(csv_path)?;
    w.write_record(header(d))?;
    let blocks: Vec<&Tensor> = [&d.v, &d.x, &d.y, &d.y_structural, &d.outcome_noise]
        .into_iter()
        .chain(d.exogenous_extra.as_ref())
        .chain([&d.true_iv, &d.rand_iv])
        .collect();
    for i in 0..d.n() {
        let row: Vec<String> = blocks
            .iter()
            .flat_map(|t| t.row(i).iter().map(|v| v.to_string()))
            .collect();
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(csv_path, e))?;
    let sidecar = DatasetSidecar {
        format: DATASET_FORMAT.to_string(),
        seed,
        split: split.to_string(),
        spec: spec.clone(),
        column_roles: d.column_roles.clone(),
        exogenous_cols: d.exogenous_extra.as_ref().map(Tensor::cols),
        true_iv_cols: d.true_iv.cols(),
        rand_iv_cols: d.rand_iv.cols(),
    };
    let path = sidecar_path(csv_path);
    fs::write(&path, serde_json::to_string_pretty(&sidecar)?).map_err(|e| Error::io(&path, e))?;
    Ok(())
}

pub fn import_dataset(csv_path: &Path) -> Result<(SyntheticDataset, DatasetSidecar)> {
    let path = sidecar_path(csv_path);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let side: DatasetSidecar = serde_json::from_str(&text)?;
    if side.format != DATASET_FORMAT {
        return Err(Error::Format(format!("unsupported dataset format {:?}", side.format)));
    }
    let dv = side.column_roles.len();
    let de = side.exogenous_cols.unwrap_or(0);
    let widths = [dv, 1, 1, 1, 1, de, side.true_iv_cols, side.rand_iv_cols];
    let total: usize = widths.iter().sum();

    let mut r = csv::Reader::from_path(csv_path)?;
    let mut cols: Vec<Vec<f64>> = vec![Vec::new(); widths.len()];
    let mut n = 0;
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != total {
            return Err(Error::Format(format!("row {} has {} fields, expected {total}", n + 1, rec.len())));
        }
        let mut k = 0;
        for (b, &w) in widths.iter().enumerate() {
            for _ in 0..w {
                let v: f64 = rec[k]
                    .parse()
                    .map_err(|_| Error::Format(format!("row {}: bad number {:?}", n + 1, &rec[k])))?;
                cols[b].push(v);
                k += 1;
            }
        }
        n += 1;
    }
    let block = |b: usize| -> Result<Tensor> {
        if widths[b] == 0 {
            Ok(Tensor::empty_cols(n))
        } else {
            Tensor::matrix(n, widths[b], cols[b].clone())
        }
    };
    let d = SyntheticDataset {
        v: block(0)?,
        x: block(1)?,
        y: block(2)?,
        y_structural: block(3)?,
        outcome_noise: block(4)?,
        exogenous_extra: side.exogenous_cols.map(|_| block(5)).transpose()?,
        true_iv: block(6)?,
        rand_iv: block(7)?,
        column_roles: side.column_roles.clone(),
    };
    d.check()?;
    Ok((d, side))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, Regime, Response, Scenario};

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        for scenario in Scenario::ALL {
            let spec = DgpSpec::new(*scenario, Response::Poly2d, Regime::WithZ, 25);
            let d = generate(&spec, 6).unwrap().valid;
            let path = dir.path().join(format!("{scenario}.csv"));
            export_dataset(&d, &spec, 6, "valid", &path).unwrap();
            let (back, side) = import_dataset(&path).unwrap();
            assert_eq!(back, d);
            assert_eq!(side.spec, spec);
            assert_eq!(side.split, "valid");
        }
    }

    #[test]
    fn header_carries_role_names() {
        let spec = DgpSpec::new(Scenario::ConfoundedLowDim, Response::Step, Regime::WithoutZ, 3);
        let d = generate(&spec, 1).unwrap().train;
        let h = header(&d);
        assert_eq!(&h[..7], &["c1", "c2", "c3", "c4", "gamma", "sigma", "x"]);
        assert!(h.contains(&"exo2".to_string()));
    }
}
