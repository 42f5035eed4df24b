use std::collections::HashSet;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::{CompositionDims, DgpSpec, Regime, Response, Scenario};
use crate::downstream::{Downstream, DownstreamConfig};
use crate::error::{ensure, Error, Result};
use crate::mi::Ablation;
use crate::trainer::AutoIvConfig;

/// Where a run's instrument columns come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SourceKind {
    RandIv,
    TrueIv,
    Uas,
    Was,
    AutoIv,
    /// No instrument; used by `direct_nn`.
    None,
}

/// A Table-1 row: the instrument source together with the candidate regime
/// it sees. `rand_iv`, `true_iv` and `none` do not read the candidates and
/// always run under `with_z`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct InstrumentSource {
    pub kind: SourceKind,
    pub regime: Regime,
}

impl InstrumentSource {
    /// Table-1 row order.
    pub const TABLE: [InstrumentSource; 8] = [
        InstrumentSource::new(SourceKind::RandIv, Regime::WithZ),
        InstrumentSource::new(SourceKind::TrueIv, Regime::WithZ),
        InstrumentSource::new(SourceKind::Uas, Regime::WithoutZ),
        InstrumentSource::new(SourceKind::Uas, Regime::WithZ),
        InstrumentSource::new(SourceKind::Was, Regime::WithoutZ),
        InstrumentSource::new(SourceKind::Was, Regime::WithZ),
        InstrumentSource::new(SourceKind::AutoIv, Regime::WithoutZ),
        InstrumentSource::new(SourceKind::AutoIv, Regime::WithZ),
    ];

    pub const NONE: InstrumentSource = InstrumentSource::new(SourceKind::None, Regime::WithZ);

    pub const fn new(kind: SourceKind, regime: Regime) -> Self {
        InstrumentSource { kind, regime }
    }

    pub fn kind_name(self) -> &'static str {
        match self.kind {
            SourceKind::RandIv => "rand_iv",
            SourceKind::TrueIv => "true_iv",
            SourceKind::Uas => "uas",
            SourceKind::Was => "was",
            SourceKind::AutoIv => "autoiv",
            SourceKind::None => "none",
        }
    }

    pub fn reads_candidates(self) -> bool {
        matches!(self.kind, SourceKind::Uas | SourceKind::Was | SourceKind::AutoIv)
    }
}

impl fmt::Display for InstrumentSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.reads_candidates() {
            let suffix = match self.regime {
                Regime::WithZ => "w_z",
                Regime::WithoutZ => "wo_z",
            };
            write!(f, "{}_{suffix}", self.kind_name())
        } else {
            f.write_str(self.kind_name())
        }
    }
}

impl FromStr for InstrumentSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let all = InstrumentSource::TABLE.iter().chain([&InstrumentSource::NONE]);
        all.copied()
            .find(|src| src.to_string() == s)
            .ok_or_else(|| Error::Contract(format!("unknown instrument source {s:?}")))
    }
}

impl Serialize for InstrumentSource {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for InstrumentSource {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Hyperparameter axes that `sweep` can vary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    RepDim,
    NTrain,
    Alpha,
    Eta,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::RepDim => "rep_dim",
            SweepAxis::NTrain => "n_train",
            SweepAxis::Alpha => "alpha",
            SweepAxis::Eta => "eta",
        }
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [SweepAxis::RepDim, SweepAxis::NTrain, SweepAxis::Alpha, SweepAxis::Eta]
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Contract(format!("unknown sweep axis {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
}

fn default_n() -> usize {
    500
}

fn default_grid() -> usize {
    100
}

fn default_e_std() -> f64 {
    1.0
}

fn default_noise_var() -> f64 {
    0.1
}

/// Everything a batch of experiments needs; the JSON plan file mirrors it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPlan {
    pub scenarios: Vec<Scenario>,
    pub responses: Vec<Response>,
    #[serde(default = "default_n")]
    pub n_train: usize,
    #[serde(default = "default_n")]
    pub n_valid: usize,
    #[serde(default = "default_n")]
    pub n_test: usize,
    #[serde(default = "default_e_std")]
    pub e_std: f64,
    #[serde(default = "default_noise_var")]
    pub noise_var: f64,
    #[serde(default)]
    pub dims: CompositionDims,
    pub instruments: Vec<InstrumentSource>,
    pub downstream: Vec<Downstream>,
    /// AutoIV variants; the full method when empty.
    #[serde(default)]
    pub ablations: Vec<Ablation>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub autoiv: AutoIvConfig,
    #[serde(default)]
    pub estimators: DownstreamConfig,
    #[serde(default = "default_grid")]
    pub grid_size: usize,
    #[serde(default)]
    pub save_models: bool,
    #[serde(default)]
    pub sweep: Option<SweepSpec>,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub jobs: Option<usize>,
}

impl ExperimentPlan {
    /// A plan with every optional field at its default.
    pub fn new(
        scenarios: Vec<Scenario>,
        responses: Vec<Response>,
        instruments: Vec<InstrumentSource>,
        downstream: Vec<Downstream>,
        seeds: Vec<u64>,
    ) -> Self {
        ExperimentPlan {
            scenarios,
            responses,
            n_train: default_n(),
            n_valid: default_n(),
            n_test: default_n(),
            e_std: default_e_std(),
            noise_var: default_noise_var(),
            dims: CompositionDims::default(),
            instruments,
            downstream,
            ablations: Vec::new(),
            seeds,
            autoiv: AutoIvConfig::default(),
            estimators: DownstreamConfig::default(),
            grid_size: default_grid(),
            save_models: false,
            sweep: None,
            out: None,
            jobs: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let plan: ExperimentPlan = serde_json::from_str(text)?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(!self.scenarios.is_empty(), "plan lists no scenarios");
        ensure!(!self.responses.is_empty(), "plan lists no responses");
        ensure!(!self.instruments.is_empty(), "plan lists no instrument sources");
        ensure!(!self.downstream.is_empty(), "plan lists no downstream methods");
        ensure!(!self.seeds.is_empty(), "plan lists no seeds");
        let unique: HashSet<_> = self.seeds.iter().collect();
        ensure!(unique.len() == self.seeds.len(), "plan seeds must be unique");
        ensure!(self.grid_size >= 2, "grid_size must be at least 2");
        ensure!(self.jobs != Some(0), "jobs must be at least 1");
        self.autoiv.validate()?;
        for s in &self.scenarios {
            self.dgp(*s, self.responses[0], Regime::WithZ).validate()?;
        }
        Ok(())
    }

    pub fn ablation_variants(&self) -> Vec<Ablation> {
        if self.ablations.is_empty() {
            vec![Ablation::none()]
        } else {
            self.ablations.clone()
        }
    }

    pub fn dgp(&self, scenario: Scenario, response: Response, regime: Regime) -> DgpSpec {
        DgpSpec {
            scenario,
            response,
            n_train: self.n_train,
            n_valid: self.n_valid,
            n_test: self.n_test,
            regime,
            dims: self.dims,
            e_std: self.e_std,
            noise_var: self.noise_var,
        }
    }

    /// Hash of the settings that influence a run's result. Grids, seeds and
    /// execution options are left out so that extending a grid keeps the
    /// identities of finished runs.
    pub fn settings_hash(&self) -> String {
        #[derive(Serialize)]
        struct Settings<'a> {
            n: [usize; 3],
            e_std: f64,
            noise_var: f64,
            dims: &'a CompositionDims,
            autoiv: &'a AutoIvConfig,
            estimators: &'a DownstreamConfig,
            grid_size: usize,
        }
        let s = Settings {
            n: [self.n_train, self.n_valid, self.n_test],
            e_std: self.e_std,
            noise_var: self.noise_var,
            dims: &self.dims,
            autoiv: &self.autoiv,
            estimators: &self.estimators,
            grid_size: self.grid_size,
        };
        let json = serde_json::to_string(&s).expect("plain data serializes");
        hex(&Sha256::digest(json.as_bytes()))[..16].to_string()
    }

    /// Every requested cell, in table order. `direct_nn` ignores the
    /// instrument grid and gets a single `none` row.
    pub fn cells(&self) -> Vec<Cell> {
        let mut rows: Vec<(InstrumentSource, Ablation)> = Vec::new();
        for src in &self.instruments {
            if src.kind == SourceKind::AutoIv {
                rows.extend(self.ablation_variants().into_iter().map(|a| (*src, a)));
            } else {
                rows.push((*src, Ablation::none()));
            }
        }
        let mut out = Vec::new();
        for &scenario in &self.scenarios {
            for &response in &self.responses {
                for &downstream in &self.downstream {
                    if downstream.uses_instrument() {
                        for &(source, ablation) in &rows {
                            if source.kind != SourceKind::None {
                                out.push(Cell::new(scenario, response, source, ablation, downstream));
                            }
                        }
                    } else {
                        out.push(Cell::new(scenario, response, InstrumentSource::NONE, Ablation::none(), downstream));
                    }
                }
            }
        }
        out.sort_by_key(Cell::order_key);
        out.dedup();
        out
    }

    /// Copy of the plan with one sweep coordinate applied.
    pub fn with_axis(&self, axis: SweepAxis, value: f64) -> Result<Self> {
        let mut p = self.clone();
        let as_count = |v: f64| -> Result<usize> {
            ensure!(v >= 1.0 && v.fract() == 0.0, "{} needs a positive integer, got {v}", axis.name());
            Ok(v as usize)
        };
        match axis {
            SweepAxis::RepDim => p.autoiv.rep_dim = as_count(value)?,
            SweepAxis::NTrain => p.n_train = as_count(value)?,
            SweepAxis::Alpha => p.autoiv.alpha = value,
            SweepAxis::Eta => p.autoiv.eta = value,
        }
        p.sweep = None;
        p.validate()?;
        Ok(p)
    }
}

/// One summary-table cell; a run is a cell plus a seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Cell {
    pub scenario: Scenario,
    pub response: Response,
    pub source: InstrumentSource,
    pub ablation: Ablation,
    pub downstream: Downstream,
}

impl Cell {
    pub fn new(
        scenario: Scenario,
        response: Response,
        source: InstrumentSource,
        ablation: Ablation,
        downstream: Downstream,
    ) -> Self {
        Cell {
            scenario,
            response,
            source,
            ablation,
            downstream,
        }
    }

    /// Value of the `instrument` column: the source kind, with the ablation
    /// label appended for ablated AutoIV.
    pub fn instrument_label(&self) -> String {
        if self.ablation.is_full() {
            self.source.kind_name().to_string()
        } else {
            format!("{}+{}", self.source.kind_name(), self.ablation.label())
        }
    }

    pub fn regime(&self) -> Regime {
        self.source.regime
    }

    /// Scenario, then downstream block, then instrument row, then response
    /// column, as in the paper's table.
    pub fn order_key(&self) -> (Scenario, usize, usize, String, Response) {
        (
            self.scenario,
            downstream_rank(self.downstream),
            source_rank(self.source),
            self.ablation_key(),
            self.response,
        )
    }

    fn ablation_key(&self) -> String {
        if self.ablation.is_full() {
            String::new()
        } else {
            self.ablation.label()
        }
    }
}

pub(crate) fn downstream_rank(d: Downstream) -> usize {
    Downstream::ALL.iter().position(|x| *x == d).unwrap_or(usize::MAX)
}

pub(crate) fn source_rank(s: InstrumentSource) -> usize {
    InstrumentSource::TABLE
        .iter()
        .position(|x| *x == s)
        .unwrap_or(InstrumentSource::TABLE.len())
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Seed for one stream of a run, from the master seed and the run's grid
/// coordinates.
pub fn derive_seed(master: u64, coords: &[&str]) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    for c in coords {
        h.update([0u8]);
        h.update(c.as_bytes());
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest is 32 bytes"))
}
