use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::plan::{downstream_rank, source_rank, Cell, ExperimentPlan, InstrumentSource, SourceKind};
use super::run::RunRecord;
use crate::datagen::{Regime, Response, Scenario};
use crate::downstream::Downstream;
use crate::error::{Error, Result};

pub const RESULTS_HEADER: [&str; 9] = [
    "run_id",
    "scenario",
    "response",
    "regime",
    "instrument",
    "downstream",
    "seed",
    "mse_test",
    "wall_ms",
];

/// A row of `results.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub run_id: String,
    pub scenario: Scenario,
    pub response: Response,
    pub regime: Regime,
    pub instrument: String,
    pub downstream: Downstream,
    pub seed: u64,
    pub mse_test: f64,
    pub wall_ms: u64,
}

impl ResultRow {
    fn from_record(r: &RunRecord) -> Option<Result<Self>> {
        let mse_test = r.mse_test.filter(|_| r.error.is_none())?;
        Some(r.downstream.parse().map(|downstream| ResultRow {
            run_id: r.run_id.clone(),
            scenario: r.scenario,
            response: r.response,
            regime: r.regime,
            instrument: r.instrument.clone(),
            downstream,
            seed: r.seed,
            mse_test,
            wall_ms: r.wall_ms,
        }))
    }
}

/// Row position of an `instrument`/`regime` pair in the paper's table;
/// ablated AutoIV variants sort after their full counterpart.
fn instrument_rank(instrument: &str, regime: Regime) -> (usize, String) {
    let (base, rest) = instrument.split_once('+').unwrap_or((instrument, ""));
    let kind = match base {
        "rand_iv" => Some(SourceKind::RandIv),
        "true_iv" => Some(SourceKind::TrueIv),
        "uas" => Some(SourceKind::Uas),
        "was" => Some(SourceKind::Was),
        "autoiv" => Some(SourceKind::AutoIv),
        _ => None,
    };
    let rank = kind.map_or(usize::MAX, |k| source_rank(InstrumentSource::new(k, regime)));
    (rank, rest.to_string())
}

type RowKey = (Scenario, usize, (usize, String), Response, u64);

fn row_key(r: &ResultRow) -> RowKey {
    (
        r.scenario,
        downstream_rank(r.downstream),
        instrument_rank(&r.instrument, r.regime),
        r.response,
        r.seed,
    )
}

/// Successful records as sorted result rows; table order, then seed.
pub fn result_rows(records: &[RunRecord]) -> Result<Vec<ResultRow>> {
    let mut rows = records
        .iter()
        .filter_map(ResultRow::from_record)
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| row_key(a).cmp(&row_key(b)).then_with(|| a.run_id.cmp(&b.run_id)));
    Ok(rows)
}

pub fn write_results_csv(rows: &[ResultRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(RESULTS_HEADER)?;
    for r in rows {
        w.write_record([
            r.run_id.clone(),
            r.scenario.to_string(),
            r.response.to_string(),
            r.regime.to_string(),
            r.instrument.clone(),
            r.downstream.to_string(),
            r.seed.to_string(),
            r.mse_test.to_string(),
            r.wall_ms.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_results_csv(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != RESULTS_HEADER {
        return Err(Error::Format(format!("{} has header {header:?}", path.display())));
    }
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub fn write_failures_csv(records: &[RunRecord], path: &Path) -> Result<usize> {
    let mut failed: Vec<&RunRecord> = records.iter().filter(|r| !r.succeeded()).collect();
    failed.sort_by(|a, b| a.run_id.cmp(&b.run_id));
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["run_id", "scenario", "response", "regime", "instrument", "downstream", "seed", "error"])?;
    for r in &failed {
        w.write_record([
            r.run_id.clone(),
            r.scenario.to_string(),
            r.response.to_string(),
            r.regime.to_string(),
            r.instrument.clone(),
            r.downstream.clone(),
            r.seed.to_string(),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(failed.len())
}

/// Mean and sample standard deviation of one table cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub scenario: Scenario,
    pub response: Response,
    pub downstream: Downstream,
    pub instrument: String,
    pub regime: Regime,
    pub n_seeds: usize,
    pub mean_mse: Option<f64>,
    pub std_mse: Option<f64>,
    /// Exactly one seed contributed, so the standard deviation is reported as 0.
    pub single_seed: bool,
    /// The cell was requested but has no successful run.
    pub missing: bool,
}

/// `(mean, sample std)`; the std of a single value is 0.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Some((mean, 0.0));
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    Some((mean, (ss / (n - 1.0)).sqrt()))
}

type CellKey = (Scenario, usize, (usize, String), Response);

/// Aggregates rows per cell in table order. Cells listed in `requested`
/// without any row are reported as missing. The result does not depend on
/// the order of `rows`.
pub fn aggregate(rows: &[ResultRow], requested: &[Cell]) -> Vec<SummaryRow> {
    struct Acc {
        downstream: Downstream,
        instrument: String,
        regime: Regime,
        values: Vec<(u64, f64)>,
    }
    let mut cells: BTreeMap<CellKey, Acc> = BTreeMap::new();
    for c in requested {
        let instrument = c.instrument_label();
        let key = (
            c.scenario,
            downstream_rank(c.downstream),
            instrument_rank(&instrument, c.regime()),
            c.response,
        );
        cells.entry(key).or_insert(Acc {
            downstream: c.downstream,
            instrument,
            regime: c.regime(),
            values: Vec::new(),
        });
    }
    for r in rows {
        let key = (
            r.scenario,
            downstream_rank(r.downstream),
            instrument_rank(&r.instrument, r.regime),
            r.response,
        );
        cells
            .entry(key)
            .or_insert_with(|| Acc {
                downstream: r.downstream,
                instrument: r.instrument.clone(),
                regime: r.regime,
                values: Vec::new(),
            })
            .values
            .push((r.seed, r.mse_test));
    }
    cells
        .into_iter()
        .map(|((scenario, _, _, response), mut acc)| {
            // summation order fixed by seed, so record order cannot move the bits
            acc.values.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
            let vals: Vec<f64> = acc.values.iter().map(|v| v.1).collect();
            let ms = mean_std(&vals);
            SummaryRow {
                scenario,
                response,
                downstream: acc.downstream,
                instrument: acc.instrument,
                regime: acc.regime,
                n_seeds: vals.len(),
                mean_mse: ms.map(|m| m.0),
                std_mse: ms.map(|m| m.1),
                single_seed: vals.len() == 1,
                missing: vals.is_empty(),
            }
        })
        .collect()
}

pub fn write_summary_csv(rows: &[SummaryRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "scenario",
        "response",
        "downstream",
        "instrument",
        "regime",
        "n_seeds",
        "mean_mse",
        "std_mse",
        "single_seed",
        "missing",
    ])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.scenario.to_string(),
            r.response.to_string(),
            r.downstream.to_string(),
            r.instrument.clone(),
            r.regime.to_string(),
            r.n_seeds.to_string(),
            opt(r.mean_mse),
            opt(r.std_mse),
            r.single_seed.to_string(),
            r.missing.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Text rendering in the paper's layout: one block per scenario, rows are
/// downstream × instrument, columns are responses, cells `mean±std`.
pub fn render_table(rows: &[SummaryRow]) -> String {
    let mut out = String::new();
    let mut by_scenario: BTreeMap<Scenario, Vec<&SummaryRow>> = BTreeMap::new();
    for r in rows {
        by_scenario.entry(r.scenario).or_default().push(r);
    }
    for (scenario, rs) in by_scenario {
        let mut responses: Vec<Response> = rs.iter().map(|r| r.response).collect();
        responses.sort();
        responses.dedup();
        let mut lines: Vec<(String, BTreeMap<Response, String>)> = Vec::new();
        for r in rs {
            let label = format!("{:<12} {:<24}", r.downstream, row_label(r));
            let cell = match (r.mean_mse, r.std_mse) {
                (Some(m), Some(s)) if r.single_seed => format!("{m:.2}±{s:.2}*"),
                (Some(m), Some(s)) => format!("{m:.2}±{s:.2}"),
                _ => "missing".to_string(),
            };
            match lines.iter_mut().find(|(l, _)| *l == label) {
                Some((_, cells)) => {
                    cells.insert(r.response, cell);
                }
                None => lines.push((label, BTreeMap::from([(r.response, cell)]))),
            }
        }
        let _ = writeln!(out, "{scenario}");
        let _ = write!(out, "{:<37}", "method / IV");
        for resp in &responses {
            let _ = write!(out, " {:>12}", resp.name());
        }
        out.push('\n');
        for (label, cells) in lines {
            let _ = write!(out, "{label:<37}");
            for resp in &responses {
                let _ = write!(out, " {:>12}", cells.get(resp).map(String::as_str).unwrap_or("-"));
            }
            out.push('\n');
        }
        out.push('\n');
    }
    out
}

fn row_label(r: &SummaryRow) -> String {
    let (base, rest) = r.instrument.split_once('+').unwrap_or((&r.instrument, ""));
    let mut s = match base {
        "none" => "-".to_string(),
        "rand_iv" => "RandIV".to_string(),
        "true_iv" => "TrueIV".to_string(),
        other => {
            let name = match other {
                "uas" => "UAS",
                "was" => "WAS",
                "autoiv" => "AutoIV",
                o => o,
            };
            let z = if r.regime == Regime::WithZ { "w/ Z" } else { "w/o Z" };
            format!("{name} ({z})")
        }
    };
    if !rest.is_empty() {
        s.push_str(" -");
        s.push_str(rest);
    }
    s
}

pub const MANIFEST_FORMAT: &str = "autoiv-manifest/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub crate_version: String,
    pub plan_hash: String,
    pub seeds: Vec<u64>,
    pub plan: ExperimentPlan,
    pub runs_total: usize,
    pub runs_failed: usize,
}

pub fn write_manifest(plan: &ExperimentPlan, records: &[RunRecord], path: &Path) -> Result<RunManifest> {
    let m = RunManifest {
        format: MANIFEST_FORMAT.to_string(),
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
        plan_hash: plan.settings_hash(),
        seeds: plan.seeds.clone(),
        plan: plan.clone(),
        runs_total: records.len(),
        runs_failed: records.iter().filter(|r| !r.succeeded()).count(),
    };
    fs::write(path, serde_json::to_string_pretty(&m)?).map_err(|e| Error::io(path, e))?;
    Ok(m)
}

pub fn read_manifest(path: &Path) -> Result<RunManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let m: RunManifest = serde_json::from_str(&text)?;
    if m.format != MANIFEST_FORMAT {
        return Err(Error::Format(format!("unsupported manifest format {:?}", m.format)));
    }
    Ok(m)
}

pub const SWEEP_HEADER: [&str; 9] = [
    "axis",
    "value",
    "scenario",
    "response",
    "regime",
    "instrument",
    "downstream",
    "seed",
    "mse_test",
];

/// Long-format sweep output: one row per (axis value, run).
pub fn write_sweep_csv(axis: &str, blocks: &[(f64, Vec<ResultRow>)], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(SWEEP_HEADER)?;
    for (value, rows) in blocks {
        for r in rows {
            w.write_record([
                axis.to_string(),
                value.to_string(),
                r.scenario.to_string(),
                r.response.to_string(),
                r.regime.to_string(),
                r.instrument.clone(),
                r.downstream.to_string(),
                r.seed.to_string(),
                r.mse_test.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}
