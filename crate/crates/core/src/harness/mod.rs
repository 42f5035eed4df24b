//! Seeded experiment runner: grid expansion, resumable execution across a
//! worker pool, and the CSV/JSON artifacts.
//!
//! An output directory holds `records.jsonl` (the append-only log that resume
//! reads), `results.csv`, `failures.csv`, `summary.csv`, `manifest.json` and
//! one `curves/<run_id>.csv` per successful run.

mod plan;
mod report;
mod run;

use std::path::{Path, PathBuf};

pub use plan::{derive_seed, Cell, ExperimentPlan, InstrumentSource, SourceKind, SweepAxis, SweepSpec};
pub use report::{
    aggregate, mean_std, read_manifest, read_results_csv, render_table, result_rows, write_failures_csv,
    write_manifest, write_results_csv, write_summary_csv, write_sweep_csv, ResultRow, RunManifest, SummaryRow,
    MANIFEST_FORMAT, RESULTS_HEADER, SWEEP_HEADER,
};
pub use run::{read_records, run_experiment, run_id, RunRecord, RECORDS_FILE};

use crate::error::{Error, Result};

/// Output directory used when neither the plan nor the command line names one.
pub const DEFAULT_OUT: &str = "autoiv-out";

#[derive(Clone, Debug)]
pub struct Outcome {
    pub out: PathBuf,
    pub records: Vec<RunRecord>,
    pub rows: Vec<ResultRow>,
    pub summary: Vec<SummaryRow>,
    pub failed: usize,
}

impl Outcome {
    pub fn all_succeeded(&self) -> bool {
        self.failed == 0
    }
}

pub fn out_dir(plan: &ExperimentPlan) -> PathBuf {
    plan.out.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

/// Runs the plan and writes every artifact. Only records whose identity is in
/// the current plan are reported, so an output directory can be reused.
pub fn execute(plan: &ExperimentPlan) -> Result<Outcome> {
    let out = out_dir(plan);
    let all = run_experiment(plan, &out)?;
    let hash = plan.settings_hash();
    let wanted: std::collections::HashSet<String> = plan
        .cells()
        .iter()
        .flat_map(|c| plan.seeds.iter().map(|s| run_id(&hash, c, *s)))
        .collect();
    let records: Vec<RunRecord> = all.into_iter().filter(|r| wanted.contains(&r.run_id)).collect();
    let rows = result_rows(&records)?;
    write_results_csv(&rows, &out.join("results.csv"))?;
    let failed = write_failures_csv(&records, &out.join("failures.csv"))?;
    let summary = aggregate(&rows, &plan.cells());
    write_summary_csv(&summary, &out.join("summary.csv"))?;
    write_manifest(plan, &records, &out.join("manifest.json"))?;
    Ok(Outcome {
        out,
        records,
        rows,
        summary,
        failed,
    })
}

/// Re-aggregates an existing output directory, rewriting its `summary.csv`.
pub fn table(dir: &Path) -> Result<Vec<SummaryRow>> {
    let rows = read_results_csv(&dir.join("results.csv"))?;
    let manifest = dir.join("manifest.json");
    let requested = if manifest.exists() {
        read_manifest(&manifest)?.plan.cells()
    } else {
        Vec::new()
    };
    let summary = aggregate(&rows, &requested);
    write_summary_csv(&summary, &dir.join("summary.csv"))?;
    Ok(summary)
}

/// Runs the plan once per axis value into `<out>/<axis>-<value>/` and writes
/// the combined long-format `<out>/sweep.csv`.
pub fn sweep(plan: &ExperimentPlan, spec: &SweepSpec) -> Result<(Vec<Outcome>, PathBuf)> {
    if spec.values.is_empty() {
        return Err(Error::Contract("sweep needs at least one value".into()));
    }
    let root = out_dir(plan);
    let mut outcomes = Vec::new();
    let mut blocks = Vec::new();
    for &v in &spec.values {
        let mut p = plan.with_axis(spec.axis, v)?;
        p.out = Some(root.join(format!("{}-{v}", spec.axis.name())));
        let o = execute(&p)?;
        blocks.push((v, o.rows.clone()));
        outcomes.push(o);
    }
    let path = root.join("sweep.csv");
    write_sweep_csv(spec.axis.name(), &blocks, &path)?;
    Ok((outcomes, path))
}
