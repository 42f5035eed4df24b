//! Alternating optimization of the AutoIV networks.
//!
//! One epoch is four optimizer steps on the same minibatch, in order:
//!
//! 1. the five variational heads fit their log-likelihood losses, with the
//!    representations detached;
//! 2. both representation networks minimize the combined MI objective, with
//!    the heads frozen;
//! 3. the representations and `f^X` fit the treatment;
//! 4. the representations, `f^emb` and `f^Y` fit the outcome from the
//!    *estimated* treatment. `f^X` is frozen here but gradients still pass
//!    through it to reach `φ^Z`.
//!
//! Each step runs on a freshly built [`Graph`] whose trainable set is exactly
//! that step's parameter group, so the other groups cannot move.

mod persist;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::SyntheticDataset;
use crate::error::{ensure, Error, Result};
use crate::mi::{
    gap_statistic, lld_loss, lld_total, mi_max_loss, mi_min_conditional_loss, mi_min_loss, mi_total,
    rbf_pair_weights, weighted_gap_statistic, Ablation, TermNodes,
};
use crate::nets::{Activation, GaussianHead, Mlp, MlpSpec};
use crate::numcore::{backward, AdamState, Graph, NodeId, ParamId, ParamStore, Tensor};

pub use persist::{load_model, save_model, ModelManifest, MODEL_FORMAT};

/// Hidden layout shared by a family of networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetShape {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl NetShape {
    pub fn new(hidden: Vec<usize>, activation: Activation) -> Self {
        NetShape { hidden, activation }
    }

    pub fn spec(&self, input: usize, output: usize) -> MlpSpec {
        MlpSpec::new(input, self.hidden.clone(), output, self.activation)
    }
}

impl Default for NetShape {
    fn default() -> Self {
        NetShape::new(vec![128, 128], Activation::Elu)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseRates {
    pub heads: f64,
    pub mi: f64,
    pub treatment: f64,
    pub outcome: f64,
}

impl PhaseRates {
    pub fn uniform(lr: f64) -> Self {
        PhaseRates {
            heads: lr,
            mi: lr,
            treatment: lr,
            outcome: lr,
        }
    }
}

impl Default for PhaseRates {
    fn default() -> Self {
        PhaseRates::uniform(1e-3)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AutoIvConfig {
    pub rep_dim: usize,
    pub alpha: f64,
    pub eta: f64,
    /// Bandwidth of the RBF pair weights.
    pub sigma: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: PhaseRates,
    pub seed: u64,
    pub ablation: Ablation,
    pub rep_net: NetShape,
    pub head_net: NetShape,
    pub treatment_net: NetShape,
    pub emb_net: NetShape,
    pub emb_dim: usize,
    pub outcome_net: NetShape,
    /// Validation outcome loss is evaluated every this many epochs.
    pub validate_every: usize,
}

impl Default for AutoIvConfig {
    fn default() -> Self {
        AutoIvConfig {
            rep_dim: 2,
            alpha: 1.0,
            eta: 1.0,
            sigma: 0.5,
            epochs: 3000,
            batch_size: 256,
            lr: PhaseRates::default(),
            seed: 0,
            ablation: Ablation::none(),
            rep_net: NetShape::default(),
            head_net: NetShape::default(),
            treatment_net: NetShape::default(),
            emb_net: NetShape::new(vec![32], Activation::Elu),
            emb_dim: 8,
            outcome_net: NetShape::default(),
            validate_every: 1,
        }
    }
}

impl AutoIvConfig {
    /// Replaces every network's hidden layout with `shape`, keeping `f^emb`.
    pub fn with_uniform_nets(mut self, shape: NetShape) -> Self {
        self.rep_net = shape.clone();
        self.head_net = shape.clone();
        self.treatment_net = shape.clone();
        self.outcome_net = shape;
        self
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.rep_dim >= 1, "rep_dim must be at least 1");
        ensure!(self.epochs >= 1, "epochs must be at least 1");
        ensure!(self.batch_size >= 1, "batch_size must be at least 1");
        ensure!(self.emb_dim >= 1, "emb_dim must be at least 1");
        ensure!(self.validate_every >= 1, "validate_every must be at least 1");
        ensure!(
            self.alpha >= 0.0 && self.eta >= 0.0,
            "alpha and eta must be non-negative"
        );
        ensure!(self.sigma > 0.0, "sigma must be positive");
        let PhaseRates {
            heads,
            mi,
            treatment,
            outcome,
        } = self.lr;
        ensure!(
            [heads, mi, treatment, outcome].iter().all(|r| *r > 0.0 && r.is_finite()),
            "learning rates must be positive"
        );
        for shape in [&self.rep_net, &self.head_net, &self.treatment_net, &self.emb_net, &self.outcome_net] {
            ensure!(shape.hidden.iter().all(|&w| w >= 1), "hidden widths must be at least 1");
        }
        Ok(())
    }
}

/// Every network of a model; parameters live in the model's store.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AutoIvNets {
    pub phi_z: Mlp,
    pub phi_c: Mlp,
    pub head_zx: GaussianHead,
    pub head_zy: GaussianHead,
    pub head_cx: GaussianHead,
    pub head_cy: GaussianHead,
    pub head_zc: GaussianHead,
    pub f_x: Mlp,
    pub f_emb: Mlp,
    pub f_y: Mlp,
}

impl AutoIvNets {
    pub fn init(cfg: &AutoIvConfig, v_dim: usize, store: &mut ParamStore) -> Result<Self> {
        ensure!(v_dim >= 1, "need at least one IV candidate column");
        let mut seeds = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut next = || seeds.gen::<u64>();
        let r = cfg.rep_dim;
        let h = &cfg.head_net;
        Ok(AutoIvNets {
            phi_z: Mlp::init(cfg.rep_net.spec(v_dim, r), next(), store, "phi_z")?,
            phi_c: Mlp::init(cfg.rep_net.spec(v_dim, r), next(), store, "phi_c")?,
            head_zx: GaussianHead::init(h.spec(r, 1), next(), store, "head_zx")?,
            head_zy: GaussianHead::init(h.spec(r, 1), next(), store, "head_zy")?,
            head_cx: GaussianHead::init(h.spec(r, 1), next(), store, "head_cx")?,
            head_cy: GaussianHead::init(h.spec(r, 1), next(), store, "head_cy")?,
            head_zc: GaussianHead::init(h.spec(r, r), next(), store, "head_zc")?,
            f_x: Mlp::init(cfg.treatment_net.spec(2 * r, 1), next(), store, "f_x")?,
            f_emb: Mlp::init(cfg.emb_net.spec(1, cfg.emb_dim), next(), store, "f_emb")?,
            f_y: Mlp::init(cfg.outcome_net.spec(r + cfg.emb_dim, 1), next(), store, "f_y")?,
        })
    }

    pub fn heads(&self) -> [&GaussianHead; 5] {
        [&self.head_zx, &self.head_zy, &self.head_cx, &self.head_cy, &self.head_zc]
    }

    pub fn head_params(&self) -> Vec<ParamId> {
        self.heads().iter().flat_map(|h| h.param_ids()).collect()
    }

    pub fn rep_params(&self) -> Vec<ParamId> {
        let mut ids = self.phi_z.param_ids();
        ids.extend(self.phi_c.param_ids());
        ids
    }

    pub fn treatment_params(&self) -> Vec<ParamId> {
        let mut ids = self.rep_params();
        ids.extend(self.f_x.param_ids());
        ids
    }

    pub fn outcome_params(&self) -> Vec<ParamId> {
        let mut ids = self.rep_params();
        ids.extend(self.f_emb.param_ids());
        ids.extend(self.f_y.param_ids());
        ids
    }

    pub fn v_dim(&self) -> usize {
        self.phi_z.spec.input_dim
    }
}

/// Losses recorded for one epoch. The treatment and outcome entries are
/// absent when the calibration stage is ablated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lld: f64,
    pub mi: f64,
    pub l_x: Option<f64>,
    pub l_y: Option<f64>,
    /// Unweighted positive-minus-negative gap of the `Z → X` matrix.
    pub gap_zx: f64,
    /// Treatment-weighted gap of the `Z → Y` matrix.
    pub gap_zy: f64,
    pub gap_cx: f64,
    pub gap_cy: f64,
    pub gap_zc: f64,
    pub valid_l_y: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AutoIvModel {
    pub config: AutoIvConfig,
    pub nets: AutoIvNets,
    pub store: ParamStore,
    pub history: Vec<EpochRecord>,
    /// Epoch whose parameters were retained (1-based).
    pub best_epoch: usize,
}

/// Representations produced by a trained model.
#[derive(Clone, Debug, PartialEq)]
pub struct Representations {
    pub z: Tensor,
    pub c: Tensor,
}

impl AutoIvModel {
    pub fn v_dim(&self) -> usize {
        self.nets.v_dim()
    }

    pub fn representations(&self, v: &Tensor) -> Result<Representations> {
        extract_representations(self, v)
    }

    /// `f^X([φ^Z(v), φ^C(v)])`.
    pub fn predict_treatment(&self, v: &Tensor) -> Result<Tensor> {
        let r = self.representations(v)?;
        self.nets.f_x.predict(&self.store, &Tensor::concat_cols(&[&r.z, &r.c])?)
    }

    /// `f^Y([φ^C(v), f^emb(x̂)])` with `x̂` the estimated treatment.
    pub fn predict_outcome(&self, v: &Tensor) -> Result<Tensor> {
        let r = self.representations(v)?;
        let xhat = self.nets.f_x.predict(&self.store, &Tensor::concat_cols(&[&r.z, &r.c])?)?;
        let emb = self.nets.f_emb.predict(&self.store, &xhat)?;
        self.nets.f_y.predict(&self.store, &Tensor::concat_cols(&[&r.c, &emb])?)
    }
}

fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    ensure!(a.len() == b.len(), "mse over {:?} and {:?}", a.shape(), b.shape());
    let n = a.len().max(1) as f64;
    Ok(a.data().iter().zip(b.data()).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / n)
}

/// `(1/N) Σ (x_i - f^X([φ^Z(v_i), φ^C(v_i)]))²`.
pub fn treatment_loss(model: &AutoIvModel, v: &Tensor, x: &Tensor) -> Result<f64> {
    mse(x, &model.predict_treatment(v)?)
}

/// `(1/N) Σ (y_i - f^Y([φ^C(v_i), f^emb(x̂_i)]))²`.
pub fn outcome_loss(model: &AutoIvModel, v: &Tensor, y: &Tensor) -> Result<f64> {
    mse(y, &model.predict_outcome(v)?)
}

pub fn extract_representations(model: &AutoIvModel, v: &Tensor) -> Result<Representations> {
    ensure!(
        v.cols() == model.v_dim(),
        "model was trained on {} candidate columns, got {}",
        model.v_dim(),
        v.cols()
    );
    Ok(Representations {
        z: model.nets.phi_z.predict(&model.store, v)?,
        c: model.nets.phi_c.predict(&model.store, v)?,
    })
}

fn squared_error(g: &mut Graph, target: NodeId, pred: NodeId) -> Result<NodeId> {
    let d = g.sub(target, pred)?;
    let sq = g.square(d);
    Ok(g.mean(sq))
}

/// Records the treatment loss on `g` and returns its node.
pub fn treatment_loss_graph(
    g: &mut Graph,
    nets: &AutoIvNets,
    store: &ParamStore,
    v: &Tensor,
    x: &Tensor,
) -> Result<NodeId> {
    let vn = g.constant(v.clone());
    let xn = g.constant(x.clone());
    let z = nets.phi_z.forward(g, store, vn)?;
    let c = nets.phi_c.forward(g, store, vn)?;
    let zc = g.concat_cols(&[z, c])?;
    let xhat = nets.f_x.forward(g, store, zc)?;
    squared_error(g, xn, xhat)
}

pub fn outcome_loss_graph(g: &mut Graph, nets: &AutoIvNets, store: &ParamStore, v: &Tensor, y: &Tensor) -> Result<NodeId> {
    let vn = g.constant(v.clone());
    let yn = g.constant(y.clone());
    let z = nets.phi_z.forward(g, store, vn)?;
    let c = nets.phi_c.forward(g, store, vn)?;
    let zc = g.concat_cols(&[z, c])?;
    let xhat = nets.f_x.forward(g, store, zc)?;
    let emb = nets.f_emb.forward(g, store, xhat)?;
    let inp = g.concat_cols(&[c, emb])?;
    let yhat = nets.f_y.forward(g, store, inp)?;
    squared_error(g, yn, yhat)
}

struct Batch {
    v: Tensor,
    x: Tensor,
    y: Tensor,
}

/// Without-replacement sampling; the order is reshuffled each time the pool
/// runs dry.
struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        BatchSampler { order, pos: 0, rng }
    }

    fn next(&mut self, b: usize) -> Vec<usize> {
        if self.pos + b > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let idx = self.order[self.pos..self.pos + b].to_vec();
        self.pos += b;
        idx
    }
}

fn check_finite(phase: u8, epoch: usize, value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFiniteLoss { phase, epoch, value })
    }
}

/// Per-phase optimizer state.
struct Optimizers {
    heads: AdamState,
    mi: AdamState,
    treatment: AdamState,
    outcome: AdamState,
}

struct Gaps {
    zx: f64,
    zy: f64,
    cx: f64,
    cy: f64,
    zc: f64,
}

fn heads_step(nets: &AutoIvNets, store: &mut ParamStore, opt: &mut AdamState, b: &Batch, epoch: usize) -> Result<f64> {
    let mut g = Graph::with_trainable(nets.head_params());
    let vn = g.constant(b.v.clone());
    let x = g.constant(b.x.clone());
    let y = g.constant(b.y.clone());
    let z = nets.phi_z.forward(&mut g, store, vn)?;
    let c = nets.phi_c.forward(&mut g, store, vn)?;
    let terms = TermNodes {
        zx: lld_loss(&mut g, &nets.head_zx, store, z, x)?,
        zy: lld_loss(&mut g, &nets.head_zy, store, z, y)?,
        cx: lld_loss(&mut g, &nets.head_cx, store, c, x)?,
        cy: lld_loss(&mut g, &nets.head_cy, store, c, y)?,
        zc: lld_loss(&mut g, &nets.head_zc, store, z, c)?,
    };
    let total = lld_total(&mut g, &terms)?;
    let value = check_finite(4, epoch, g.scalar(total))?;
    let grads = backward(&g, total)?;
    opt.step(store, &grads)?;
    for h in nets.heads() {
        h.clamp_log_var(store);
    }
    Ok(value)
}

fn mi_step(
    nets: &AutoIvNets,
    store: &mut ParamStore,
    opt: &mut AdamState,
    cfg: &AutoIvConfig,
    b: &Batch,
    epoch: usize,
) -> Result<(f64, Gaps)> {
    let weights = rbf_pair_weights(&b.x, cfg.sigma)?;
    let mut g = Graph::with_trainable(nets.rep_params());
    let vn = g.constant(b.v.clone());
    let x = g.constant(b.x.clone());
    let y = g.constant(b.y.clone());
    let z = nets.phi_z.forward(&mut g, store, vn)?;
    let c = nets.phi_c.forward(&mut g, store, vn)?;
    let l_zx = nets.head_zx.cross_log_lik(&mut g, store, z, x)?;
    let l_zy = nets.head_zy.cross_log_lik(&mut g, store, z, y)?;
    let l_cx = nets.head_cx.cross_log_lik(&mut g, store, c, x)?;
    let l_cy = nets.head_cy.cross_log_lik(&mut g, store, c, y)?;
    let l_zc = nets.head_zc.cross_log_lik(&mut g, store, z, c)?;
    let gaps = Gaps {
        zx: gap_statistic(g.value(l_zx)),
        zy: weighted_gap_statistic(g.value(l_zy), &weights),
        cx: gap_statistic(g.value(l_cx)),
        cy: gap_statistic(g.value(l_cy)),
        zc: gap_statistic(g.value(l_zc)),
    };
    let terms = TermNodes {
        zx: mi_max_loss(&mut g, l_zx)?,
        zy: mi_min_conditional_loss(&mut g, l_zy, &weights)?,
        cx: mi_max_loss(&mut g, l_cx)?,
        cy: mi_max_loss(&mut g, l_cy)?,
        zc: mi_min_loss(&mut g, l_zc)?,
    };
    let total = mi_total(&mut g, &terms, cfg.alpha, cfg.eta, &cfg.ablation)?;
    let value = check_finite(5, epoch, g.scalar(total))?;
    let grads = backward(&g, total)?;
    opt.step(store, &grads)?;
    Ok((value, gaps))
}

fn regression_step(
    store: &mut ParamStore,
    opt: &mut AdamState,
    trainable: Vec<ParamId>,
    phase: u8,
    epoch: usize,
    build: impl FnOnce(&mut Graph, &ParamStore) -> Result<NodeId>,
) -> Result<f64> {
    let mut g = Graph::with_trainable(trainable);
    let loss = build(&mut g, store)?;
    let value = check_finite(phase, epoch, g.scalar(loss))?;
    let grads = backward(&g, loss)?;
    opt.step(store, &grads)?;
    Ok(value)
}

fn check_data(d: &SyntheticDataset, what: &str) -> Result<()> {
    ensure!(d.n() >= 1, "{what} split is empty");
    ensure!(d.v.cols() >= 1, "{what} split has no IV candidate columns");
    ensure!(
        d.v.all_finite() && d.x.all_finite() && d.y.all_finite(),
        "{what} split contains non-finite values"
    );
    ensure!(d.x.cols() == 1 && d.y.cols() == 1, "treatment and outcome must be single columns");
    Ok(())
}

/// Runs the alternating schedule and keeps the parameters with the lowest
/// validation outcome loss. With the calibration stage ablated the final
/// parameters are kept instead, since the outcome loss is then untrained.
pub fn train_autoiv(train: &SyntheticDataset, valid: &SyntheticDataset, cfg: &AutoIvConfig) -> Result<AutoIvModel> {
    cfg.validate()?;
    check_data(train, "training")?;
    check_data(valid, "validation")?;
    ensure!(
        cfg.batch_size <= train.n(),
        "batch_size {} exceeds the {} training samples",
        cfg.batch_size,
        train.n()
    );
    ensure!(valid.v.cols() == train.v.cols(), "train and validation widths differ");

    let mut store = ParamStore::new();
    let nets = AutoIvNets::init(cfg, train.v.cols(), &mut store)?;
    let mut opt = Optimizers {
        heads: AdamState::new(cfg.lr.heads),
        mi: AdamState::new(cfg.lr.mi),
        treatment: AdamState::new(cfg.lr.treatment),
        outcome: AdamState::new(cfg.lr.outcome),
    };
    let mut sampler = BatchSampler::new(train.n(), cfg.seed);
    let two_stage = !cfg.ablation.disable_two_stage;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ParamStore)> = None;

    for epoch in 1..=cfg.epochs {
        let idx = sampler.next(cfg.batch_size);
        let b = Batch {
            v: train.v.select_rows(&idx),
            x: train.x.select_rows(&idx),
            y: train.y.select_rows(&idx),
        };
        let lld = heads_step(&nets, &mut store, &mut opt.heads, &b, epoch)?;
        let (mi, gaps) = mi_step(&nets, &mut store, &mut opt.mi, cfg, &b, epoch)?;
        let (mut l_x, mut l_y, mut valid_l_y) = (None, None, None);
        if two_stage {
            l_x = Some(regression_step(
                &mut store,
                &mut opt.treatment,
                nets.treatment_params(),
                6,
                epoch,
                |g, s| treatment_loss_graph(g, &nets, s, &b.v, &b.x),
            )?);
            l_y = Some(regression_step(
                &mut store,
                &mut opt.outcome,
                nets.outcome_params(),
                7,
                epoch,
                |g, s| outcome_loss_graph(g, &nets, s, &b.v, &b.y),
            )?);
            if epoch % cfg.validate_every == 0 || epoch == cfg.epochs {
                let probe = AutoIvModelRef {
                    nets: &nets,
                    store: &store,
                };
                let vl = probe.outcome_loss(&valid.v, &valid.y)?;
                valid_l_y = Some(vl);
                if vl.is_finite() && best.as_ref().is_none_or(|(b, _, _)| vl < *b) {
                    best = Some((vl, epoch, store.clone()));
                }
            }
        }
        history.push(EpochRecord {
            epoch,
            lld,
            mi,
            l_x,
            l_y,
            gap_zx: gaps.zx,
            gap_zy: gaps.zy,
            gap_cx: gaps.cx,
            gap_cy: gaps.cy,
            gap_zc: gaps.zc,
            valid_l_y,
        });
    }

    let (store, best_epoch) = match best {
        Some((_, epoch, snapshot)) => (snapshot, epoch),
        None => (store, cfg.epochs),
    };
    ensure!(store.all_finite(), "training produced non-finite parameters");
    Ok(AutoIvModel {
        config: cfg.clone(),
        nets,
        store,
        history,
        best_epoch,
    })
}

/// Borrowed view used for validation without cloning the store.
struct AutoIvModelRef<'a> {
    nets: &'a AutoIvNets,
    store: &'a ParamStore,
}

impl AutoIvModelRef<'_> {
    fn outcome_loss(&self, v: &Tensor, y: &Tensor) -> Result<f64> {
        let (n, s) = (self.nets, self.store);
        let z = n.phi_z.predict(s, v)?;
        let c = n.phi_c.predict(s, v)?;
        let xhat = n.f_x.predict(s, &Tensor::concat_cols(&[&z, &c])?)?;
        let emb = n.f_emb.predict(s, &xhat)?;
        let yhat = n.f_y.predict(s, &Tensor::concat_cols(&[&c, &emb])?)?;
        mse(y, &yhat)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, standardize_splits, DgpSpec, Regime, Response, Scenario};

    fn small_cfg(epochs: usize) -> AutoIvConfig {
        AutoIvConfig {
            epochs,
            batch_size: 32,
            seed: 5,
            ..AutoIvConfig::default()
        }
        .with_uniform_nets(NetShape::new(vec![8], Activation::Elu))
    }

    fn small_data() -> (SyntheticDataset, SyntheticDataset) {
        let spec = DgpSpec::new(Scenario::BasicLowDim, Response::Linear, Regime::WithZ, 64);
        let (s, _) = standardize_splits(&generate(&spec, 2).unwrap()).unwrap();
        (s.train, s.valid)
    }

    fn snapshot(store: &ParamStore, ids: &[ParamId]) -> Vec<Tensor> {
        ids.iter().map(|&i| store.get(i).clone()).collect()
    }

    #[test]
    fn config_rejections() {
        let (t, v) = small_data();
        let mut cfg = small_cfg(0);
        assert!(train_autoiv(&t, &v, &cfg).is_err());
        cfg.epochs = 1;
        cfg.batch_size = 65;
        assert!(train_autoiv(&t, &v, &cfg).is_err());
        cfg.batch_size = 8;
        cfg.alpha = -1.0;
        assert!(train_autoiv(&t, &v, &cfg).is_err());
    }

    #[test]
    fn phase_isolation() {
        let (t, _) = small_data();
        let cfg = small_cfg(1);
        let mut store = ParamStore::new();
        let nets = AutoIvNets::init(&cfg, t.v.cols(), &mut store).unwrap();
        let idx: Vec<usize> = (0..32).collect();
        let b = Batch {
            v: t.v.select_rows(&idx),
            x: t.x.select_rows(&idx),
            y: t.y.select_rows(&idx),
        };
        let mut opt = AdamState::new(1e-2);

        let reps = snapshot(&store, &nets.rep_params());
        let heads = snapshot(&store, &nets.head_params());
        heads_step(&nets, &mut store, &mut opt, &b, 1).unwrap();
        assert_eq!(snapshot(&store, &nets.rep_params()), reps);
        assert_ne!(snapshot(&store, &nets.head_params()), heads);

        let heads = snapshot(&store, &nets.head_params());
        let mut opt = AdamState::new(1e-2);
        mi_step(&nets, &mut store, &mut opt, &cfg, &b, 1).unwrap();
        assert_eq!(snapshot(&store, &nets.head_params()), heads);
        assert_ne!(snapshot(&store, &nets.rep_params()), reps);

        let mut opt = AdamState::new(1e-2);
        regression_step(&mut store, &mut opt, nets.treatment_params(), 6, 1, |g, s| {
            treatment_loss_graph(g, &nets, s, &b.v, &b.x)
        })
        .unwrap();
        let fx = snapshot(&store, &nets.f_x.param_ids());
        let emb = snapshot(&store, &nets.f_emb.param_ids());
        let mut opt = AdamState::new(1e-2);
        regression_step(&mut store, &mut opt, nets.outcome_params(), 7, 1, |g, s| {
            outcome_loss_graph(g, &nets, s, &b.v, &b.y)
        })
        .unwrap();
        assert_eq!(snapshot(&store, &nets.f_x.param_ids()), fx);
        assert_ne!(snapshot(&store, &nets.f_emb.param_ids()), emb);
    }

    #[test]
    fn outcome_gradient_reaches_phi_z_through_frozen_f_x() {
        let (t, _) = small_data();
        let cfg = small_cfg(1);
        let mut store = ParamStore::new();
        let nets = AutoIvNets::init(&cfg, t.v.cols(), &mut store).unwrap();
        let idx: Vec<usize> = (0..16).collect();
        let (v, y) = (t.v.select_rows(&idx), t.y.select_rows(&idx));

        let mut g = Graph::with_trainable(nets.outcome_params());
        let loss = outcome_loss_graph(&mut g, &nets, &store, &v, &y).unwrap();
        let grads = backward(&g, loss).unwrap();
        for id in nets.f_x.param_ids() {
            assert!(grads.param(id).is_none(), "f_x must not receive gradients");
        }
        let w = nets.phi_z.layers[0].weight;
        let analytic = grads.param(w).unwrap().clone();
        assert!(analytic.max_abs() > 0.0);

        let eval = |s: &ParamStore| {
            let mut g = Graph::new();
            let l = outcome_loss_graph(&mut g, &nets, s, &v, &y).unwrap();
            g.scalar(l)
        };
        let h = 1e-6;
        for k in 0..analytic.len() {
            let mut plus = store.clone();
            plus.get_mut(w).data_mut()[k] += h;
            let mut minus = store.clone();
            minus.get_mut(w).data_mut()[k] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            assert!((fd - analytic.data()[k]).abs() < 1e-4, "k={k}: fd {fd} vs {}", analytic.data()[k]);
        }
    }

    #[test]
    fn treatment_loss_examples() {
        let (t, v) = small_data();
        let mut model = train_autoiv(&t, &v, &small_cfg(1)).unwrap();
        // constant predictor: zero every f_x weight, set the output bias to ĉ
        let c_hat = 0.3;
        for l in &model.nets.f_x.layers.clone() {
            model.store.get_mut(l.weight).data_mut().iter_mut().for_each(|w| *w = 0.0);
            model.store.get_mut(l.bias).data_mut().iter_mut().for_each(|w| *w = 0.0);
        }
        let last = model.nets.f_x.layers.last().unwrap().bias;
        model.store.get_mut(last).data_mut()[0] = c_hat;
        let loss = treatment_loss(&model, &t.v, &t.x).unwrap();
        // x is standardized on this split: mean 0, population variance 1
        assert!((loss - (1.0 + c_hat * c_hat)).abs() < 1e-12);
        let vv = Tensor::concat_cols(&[&t.v.transpose(), &t.v.transpose()]).unwrap().transpose();
        let xx = Tensor::concat_cols(&[&t.x.transpose(), &t.x.transpose()]).unwrap().transpose();
        assert!((treatment_loss(&model, &vv, &xx).unwrap() - loss).abs() < 1e-12);
    }

    #[test]
    fn deterministic_histories() {
        let (t, v) = small_data();
        let cfg = small_cfg(5);
        let a = train_autoiv(&t, &v, &cfg).unwrap();
        let b = train_autoiv(&t, &v, &cfg).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.store, b.store);
        assert_eq!(a.history.len(), 5);
    }

    #[test]
    fn representations_are_row_equivariant() {
        let (t, v) = small_data();
        let model = train_autoiv(&t, &v, &small_cfg(2)).unwrap();
        let r = extract_representations(&model, &t.v).unwrap();
        assert_eq!(r, extract_representations(&model, &t.v).unwrap());
        let perm: Vec<usize> = (0..t.n()).rev().collect();
        let rp = extract_representations(&model, &t.v.select_rows(&perm)).unwrap();
        assert_eq!(rp.z, r.z.select_rows(&perm));
        assert_eq!(rp.c, r.c.select_rows(&perm));
        assert!(extract_representations(&model, &t.v.select_cols(&[0])).is_err());
    }

    #[test]
    fn two_stage_ablation_keeps_final_parameters() {
        let (t, v) = small_data();
        let mut cfg = small_cfg(3);
        cfg.ablation.disable_two_stage = true;
        let m = train_autoiv(&t, &v, &cfg).unwrap();
        assert_eq!(m.best_epoch, 3);
        assert!(m.history.iter().all(|r| r.l_x.is_none() && r.valid_l_y.is_none()));
    }

    #[test]
    fn sampler_covers_every_index_per_cycle() {
        let mut s = BatchSampler::new(10, 1);
        let mut seen: Vec<usize> = (0..5).flat_map(|_| s.next(2)).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }
}
