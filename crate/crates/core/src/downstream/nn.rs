//! Neural regressions: two-stage (treatment then outcome) and direct.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::InstrumentBundle;
use crate::error::{ensure, Error, Result};
use crate::nets::{Activation, Mlp, MlpSpec};
use crate::numcore::{backward, AdamState, Graph, ParamStore, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NnRegConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for NnRegConfig {
    fn default() -> Self {
        NnRegConfig {
            hidden: vec![64, 64],
            activation: Activation::Elu,
            steps: 1500,
            batch_size: 128,
            lr: 1e-3,
        }
    }
}

/// Squared-error MLP regression trained with Adam on shuffled minibatches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpRegressor {
    pub net: Mlp,
    pub store: ParamStore,
    pub final_loss: f64,
}

impl MlpRegressor {
    pub fn fit(input: &Tensor, target: &Tensor, cfg: &NnRegConfig, seed: u64, stage: &str) -> Result<Self> {
        ensure!(input.rows() == target.rows(), "input and target row counts differ");
        ensure!(input.rows() >= 1, "cannot regress on zero rows");
        ensure!(input.cols() >= 1, "regression needs at least one input column");
        ensure!(cfg.steps >= 1 && cfg.batch_size >= 1, "steps and batch_size must be positive");
        let mut store = ParamStore::new();
        let spec = MlpSpec::new(input.cols(), cfg.hidden.clone(), target.cols(), cfg.activation);
        let net = Mlp::init(spec, seed, &mut store, stage)?;
        let mut adam = AdamState::new(cfg.lr);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let n = input.rows();
        let b = cfg.batch_size.min(n);
        let mut order: Vec<usize> = (0..n).collect();
        let mut pos = n;
        let mut final_loss = f64::NAN;
        for _ in 0..cfg.steps {
            if pos + b > n {
                order.shuffle(&mut rng);
                pos = 0;
            }
            let idx = &order[pos..pos + b];
            pos += b;
            let mut g = Graph::with_trainable(net.param_ids());
            let xin = g.constant(input.select_rows(idx));
            let yt = g.constant(target.select_rows(idx));
            let pred = net.forward(&mut g, &store, xin)?;
            let d = g.sub(yt, pred)?;
            let sq = g.square(d);
            let loss = g.mean(sq);
            final_loss = g.scalar(loss);
            if !final_loss.is_finite() {
                return Err(Error::Fit {
                    stage: stage.to_string(),
                    detail: format!("non-finite loss {final_loss}"),
                });
            }
            let grads = backward(&g, loss)?;
            adam.step(&mut store, &grads)?;
        }
        Ok(MlpRegressor { net, store, final_loss })
    }

    pub fn predict(&self, input: &Tensor) -> Result<Tensor> {
        self.net.predict(&self.store, input)
    }
}

/// Stage 1: `x ~ MLP(instrument, exogenous)`. Stage 2: `y ~ MLP(x̂, exogenous)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoSlsNn {
    pub stage1: MlpRegressor,
    pub stage2: MlpRegressor,
}

impl TwoSlsNn {
    pub fn predict(&self, x: &Tensor, exogenous: &Tensor) -> Result<Tensor> {
        self.stage2.predict(&Tensor::concat_cols(&[x, exogenous])?)
    }
}

pub fn twosls_nn_fit(bundle: &InstrumentBundle, x: &Tensor, y: &Tensor, cfg: &NnRegConfig, seed: u64) -> Result<TwoSlsNn> {
    bundle.check(x, y)?;
    let z = Tensor::concat_cols(&[&bundle.instrument, &bundle.exogenous])?;
    let stage1 = MlpRegressor::fit(&z, x, cfg, seed, "stage 1")?;
    let xhat = stage1.predict(&z)?;
    let stage2 = MlpRegressor::fit(
        &Tensor::concat_cols(&[&xhat, &bundle.exogenous])?,
        y,
        cfg,
        seed.wrapping_add(1),
        "stage 2",
    )?;
    Ok(TwoSlsNn { stage1, stage2 })
}

/// `y ~ MLP(x, exogenous)`, with no correction for confounding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectNn {
    pub model: MlpRegressor,
}

impl DirectNn {
    pub fn predict(&self, x: &Tensor, exogenous: &Tensor) -> Result<Tensor> {
        self.model.predict(&Tensor::concat_cols(&[x, exogenous])?)
    }
}

pub fn direct_nn_fit(x: &Tensor, y: &Tensor, exogenous: &Tensor, cfg: &NnRegConfig, seed: u64) -> Result<DirectNn> {
    ensure!(x.rows() == y.rows() && x.rows() == exogenous.rows(), "row counts differ");
    Ok(DirectNn {
        model: MlpRegressor::fit(&Tensor::concat_cols(&[x, exogenous])?, y, cfg, seed, "direct")?,
    })
}
