use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::plan::{derive_seed, hex, Cell, ExperimentPlan, SourceKind};
use crate::datagen::{generate, standardize_splits, DatasetSplits, Regime, Response, Scenario, StandardizationStats};
use crate::downstream::{evaluate, fit, uas_summary, was_summary, write_curve_csv, CurveTruth, InstrumentBundle};
use crate::error::{Error, Result};
use crate::mi::Ablation;
use crate::numcore::Tensor;
use crate::trainer::{load_model, save_model, train_autoiv, AutoIvModel};

/// One finished (or failed) run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub plan_hash: String,
    pub scenario: Scenario,
    pub response: Response,
    pub regime: Regime,
    pub instrument: String,
    pub downstream: String,
    pub seed: u64,
    pub mse_test: Option<f64>,
    pub wall_ms: u64,
    pub model_path: Option<PathBuf>,
    pub curve_path: Option<PathBuf>,
    pub error: Option<String>,
}

impl RunRecord {
    pub fn succeeded(&self) -> bool {
        self.error.is_none() && self.mse_test.is_some()
    }
}

pub fn run_id(plan_hash: &str, cell: &Cell, seed: u64) -> String {
    let key = format!(
        "{plan_hash}|{}|{}|{}|{}|{}|{seed}",
        cell.scenario,
        cell.response,
        cell.regime(),
        cell.instrument_label(),
        cell.downstream
    );
    hex(&Sha256::digest(key.as_bytes()))[..16].to_string()
}

pub const RECORDS_FILE: &str = "records.jsonl";

/// Reads `records.jsonl`, keeping the last record per run id. A torn final
/// line from an interrupted write is skipped.
pub fn read_records(dir: &Path) -> Result<Vec<RunRecord>> {
    let path = dir.join(RECORDS_FILE);
    if !path.exists() {
        return Ok(Vec::new());
    }
    let f = File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut by_id: BTreeMap<String, RunRecord> = BTreeMap::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        if let Ok(r) = serde_json::from_str::<RunRecord>(&line) {
            by_id.insert(r.run_id.clone(), r);
        }
    }
    Ok(by_id.into_values().collect())
}

/// Serializes record writes from all workers.
struct Appender {
    file: Mutex<File>,
    path: PathBuf,
}

impl Appender {
    fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(RECORDS_FILE);
        drop_torn_tail(&path)?;
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(Appender {
            file: Mutex::new(file),
            path,
        })
    }

    fn push(&self, r: &RunRecord) -> Result<()> {
        let mut line = serde_json::to_string(r)?;
        line.push('\n');
        let mut f = self.file.lock().unwrap_or_else(|p| p.into_inner());
        f.write_all(line.as_bytes()).map_err(|e| Error::io(&self.path, e))?;
        f.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Cuts an unterminated last line left by an interrupted write, so the next
/// record starts on a fresh line.
fn drop_torn_tail(path: &Path) -> Result<()> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(Error::io(path, e)),
    };
    if bytes.is_empty() || bytes.ends_with(b"\n") {
        return Ok(());
    }
    let keep = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    let f = OpenOptions::new().write(true).open(path).map_err(|e| Error::io(path, e))?;
    f.set_len(keep as u64).map_err(|e| Error::io(path, e))
}

/// Everything that shares generated data: one scenario, response and seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
struct UnitKey {
    scenario: Scenario,
    response: Response,
    seed: u64,
}

struct PendingRun {
    cell: Cell,
    run_id: String,
}

/// Standardized splits plus the statistics needed for the truth curve.
struct RegimeData {
    splits: DatasetSplits,
    stats: StandardizationStats,
}

/// Generates, trains and fits every pending run of the plan, appending to
/// `out/records.jsonl`. Returns the complete record set, including records
/// kept from earlier invocations.
pub fn run_experiment(plan: &ExperimentPlan, out: &Path) -> Result<Vec<RunRecord>> {
    plan.validate()?;
    fs::create_dir_all(out.join("curves")).map_err(|e| Error::io(out, e))?;
    let plan_hash = plan.settings_hash();
    let done: HashSet<String> = read_records(out)?
        .into_iter()
        .filter(RunRecord::succeeded)
        .map(|r| r.run_id)
        .collect();

    let mut units: BTreeMap<UnitKey, Vec<PendingRun>> = BTreeMap::new();
    for cell in plan.cells() {
        for &seed in &plan.seeds {
            let id = run_id(&plan_hash, &cell, seed);
            if done.contains(&id) {
                continue;
            }
            let key = UnitKey {
                scenario: cell.scenario,
                response: cell.response,
                seed,
            };
            units.entry(key).or_default().push(PendingRun { cell, run_id: id });
        }
    }

    let appender = Appender::open(out)?;
    let work: Vec<(UnitKey, Vec<PendingRun>)> = units.into_iter().collect();
    let jobs = plan.jobs.unwrap_or(1).max(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Contract(format!("cannot build worker pool: {e}")))?;
    let sink_errors: Vec<Error> = pool.install(|| {
        work.par_iter()
            .flat_map_iter(|(key, runs)| {
                let mut errs = Vec::new();
                for r in run_unit(plan, &plan_hash, out, *key, runs) {
                    if let Err(e) = appender.push(&r) {
                        errs.push(e);
                    }
                }
                errs
            })
            .collect()
    });
    if let Some(e) = sink_errors.into_iter().next() {
        return Err(e);
    }
    read_records(out)
}

fn run_unit(plan: &ExperimentPlan, plan_hash: &str, out: &Path, key: UnitKey, runs: &[PendingRun]) -> Vec<RunRecord> {
    let mut data: BTreeMap<Regime, std::result::Result<RegimeData, String>> = BTreeMap::new();
    let mut models: BTreeMap<(Regime, String), std::result::Result<(AutoIvModel, Option<PathBuf>), String>> =
        BTreeMap::new();
    let mut records = Vec::with_capacity(runs.len());

    for run in runs {
        let cell = run.cell;
        let regime = cell.regime();
        let d = data.entry(regime).or_insert_with(|| {
            let spec = plan.dgp(key.scenario, key.response, regime);
            generate(&spec, key.seed)
                .and_then(|s| standardize_splits(&s))
                .map(|(splits, stats)| RegimeData { splits, stats })
                .map_err(|e| format!("data generation: {e}"))
        });
        let start = Instant::now();
        let mut model_path = None;
        let result = match d {
            Err(e) => Err(e.clone()),
            Ok(d) => {
                let model = if cell.source.kind == SourceKind::AutoIv {
                    let entry = models
                        .entry((regime, cell.ablation.label()))
                        .or_insert_with(|| autoiv_for(plan, out, key, regime, cell.ablation, &d.splits));
                    match entry {
                        Ok((m, p)) => {
                            model_path = p.clone();
                            Ok(Some(&*m))
                        }
                        Err(e) => Err(e.clone()),
                    }
                } else {
                    Ok(None)
                };
                model.and_then(|m| {
                    fit_and_evaluate(plan, out, &cell, key.seed, &run.run_id, d, m).map_err(|e| e.to_string())
                })
            }
        };
        let wall_ms = start.elapsed().as_millis() as u64;
        let (mse_test, curve_path, error) = match result {
            Ok((mse, path)) => (Some(mse), Some(path), None),
            Err(e) => (None, None, Some(e)),
        };
        records.push(RunRecord {
            run_id: run.run_id.clone(),
            plan_hash: plan_hash.to_string(),
            scenario: cell.scenario,
            response: cell.response,
            regime,
            instrument: cell.instrument_label(),
            downstream: cell.downstream.to_string(),
            seed: key.seed,
            mse_test,
            wall_ms,
            model_path,
            curve_path,
            error,
        });
    }
    records
}

fn autoiv_for(
    plan: &ExperimentPlan,
    out: &Path,
    key: UnitKey,
    regime: Regime,
    ablation: Ablation,
    splits: &DatasetSplits,
) -> std::result::Result<(AutoIvModel, Option<PathBuf>), String> {
    let mut cfg = plan.autoiv.clone();
    cfg.ablation = ablation;
    cfg.seed = derive_seed(
        key.seed,
        &["autoiv", key.scenario.name(), key.response.name(), regime.name()],
    );
    let dir = out.join("models").join(format!(
        "{}-{}-{}-{}-{}-{}",
        key.scenario,
        key.response,
        regime,
        ablation.label(),
        key.seed,
        plan.settings_hash()
    ));
    if plan.save_models {
        if let Ok(m) = load_model(&dir) {
            if m.config == cfg {
                return Ok((m, Some(dir)));
            }
        }
    }
    let model = train_autoiv(&splits.train, &splits.valid, &cfg).map_err(|e| format!("AutoIV training: {e}"))?;
    if plan.save_models {
        save_model(&model, &dir).map_err(|e| format!("saving AutoIV model: {e}"))?;
        Ok((model, Some(dir)))
    } else {
        Ok((model, None))
    }
}

/// Builds the training bundle and the test-time exogenous covariates for a
/// cell. Summary and learned instruments only enter stage 1, so the test
/// split needs nothing but the covariates.
fn bundles(cell: &Cell, splits: &DatasetSplits, model: Option<&AutoIvModel>) -> Result<(InstrumentBundle, Tensor)> {
    let train = &splits.train;
    let test = &splits.test;
    let extra_tr = train.exogenous_or_empty();
    let extra_te = test.exogenous_or_empty();
    match cell.source.kind {
        SourceKind::TrueIv => Ok((InstrumentBundle::new(train.true_iv.clone(), extra_tr)?, extra_te)),
        SourceKind::RandIv => Ok((InstrumentBundle::new(train.rand_iv.clone(), extra_tr)?, extra_te)),
        SourceKind::Uas => Ok((InstrumentBundle::new(uas_summary(&train.v)?, extra_tr)?, extra_te)),
        SourceKind::Was => Ok((InstrumentBundle::new(was_summary(&train.v, &train.x)?, extra_tr)?, extra_te)),
        SourceKind::None => Ok((InstrumentBundle::new(Tensor::empty_cols(train.n()), extra_tr)?, extra_te)),
        SourceKind::AutoIv => {
            let m = model.ok_or_else(|| Error::Contract("AutoIV cell without a model".into()))?;
            let rtr = m.representations(&train.v)?;
            let rte = m.representations(&test.v)?;
            Ok((
                InstrumentBundle::new(rtr.z, Tensor::concat_cols(&[&rtr.c, &extra_tr])?)?,
                Tensor::concat_cols(&[&rte.c, &extra_te])?,
            ))
        }
    }
}

fn fit_and_evaluate(
    plan: &ExperimentPlan,
    out: &Path,
    cell: &Cell,
    seed: u64,
    run_id: &str,
    d: &RegimeData,
    model: Option<&AutoIvModel>,
) -> Result<(f64, PathBuf)> {
    let (bundle, test_exo) = bundles(cell, &d.splits, model)?;
    let label = cell.instrument_label();
    let fit_seed = derive_seed(
        seed,
        &[
            cell.scenario.name(),
            cell.response.name(),
            cell.regime().name(),
            &label,
            cell.downstream.name(),
        ],
    );
    let train = &d.splits.train;
    let fitted = fit(cell.downstream, &bundle, &train.x, &train.y, &plan.estimators, fit_seed)?;
    let truth = CurveTruth::from_stats(cell.response, &d.stats.x, &d.stats.y);
    let test = &d.splits.test;
    let report = evaluate(&fitted, &test.x, &test_exo, &test.y_structural, &truth, plan.grid_size)?;
    let rel = PathBuf::from("curves").join(format!("{run_id}.csv"));
    write_curve_csv(&report.curve, &out.join(&rel))?;
    Ok((report.mse_test, rel))
}
