//! Multilayer perceptrons and conditional Gaussian heads.

mod serialize;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::numcore::{cross_log_density, Graph, NodeId, ParamId, ParamStore, Tensor};

pub use crate::numcore::Activation;
pub use serialize::{load_params, save_params, ParamManifest, PARAM_FORMAT};

/// Clamp range for the log-variances of every [`GaussianHead`].
pub const LOG_VAR_MIN: f64 = -6.0;
pub const LOG_VAR_MAX: f64 = 6.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden: Vec<usize>, output_dim: usize, activation: Activation) -> Self {
        MlpSpec {
            input_dim,
            output_dim,
            hidden,
            activation,
        }
    }

    /// Two hidden layers of 128 elu units.
    pub fn default_for(input_dim: usize, output_dim: usize) -> Self {
        Self::new(input_dim, vec![128, 128], output_dim, Activation::Elu)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.input_dim >= 1 && self.output_dim >= 1 && self.hidden.iter().all(|&w| w >= 1),
            "every layer width must be >= 1: {:?}",
            self
        );
        Ok(())
    }

    /// Layer widths from input to output.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden.len() + 2);
        w.push(self.input_dim);
        w.extend(&self.hidden);
        w.push(self.output_dim);
        w
    }

    pub fn num_params(&self) -> usize {
        self.widths().windows(2).map(|p| p[0] * p[1] + p[1]).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// An MLP whose weights live in a [`ParamStore`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub layers: Vec<Layer>,
}

impl Mlp {
    /// Glorot-uniform weights, zero biases. Deterministic in `seed`.
    pub fn init(spec: MlpSpec, seed: u64, store: &mut ParamStore, name: &str) -> Result<Mlp> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let widths = spec.widths();
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, pair)| {
                let (fan_in, fan_out) = (pair[0], pair[1]);
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let w: Vec<f64> = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..=bound)).collect();
                let weight = store.add(
                    format!("{name}.{i}.weight"),
                    Tensor::matrix(fan_in, fan_out, w).expect("sized above"),
                );
                let bias = store.add(format!("{name}.{i}.bias"), Tensor::zeros(&[fan_out]));
                Layer { weight, bias }
            })
            .collect();
        Ok(Mlp { spec, layers })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| [l.weight, l.bias]).collect()
    }

    fn check_input(&self, width: usize) -> Result<()> {
        ensure!(
            width == self.spec.input_dim,
            "network expects {} input columns, got {}",
            self.spec.input_dim,
            width
        );
        Ok(())
    }

    /// Records the forward pass on `g`. Hidden layers use the spec's
    /// activation; the output layer is linear.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, input: NodeId) -> Result<NodeId> {
        self.check_input(g.value(input).cols())?;
        let last = self.layers.len() - 1;
        let mut h = input;
        for (i, layer) in self.layers.iter().enumerate() {
            let w = g.param(store, layer.weight);
            let b = g.param(store, layer.bias);
            let z = g.matmul(h, w)?;
            h = g.add_row(z, b)?;
            if i < last {
                h = g.activation(h, self.spec.activation);
            }
        }
        Ok(h)
    }

    /// Forward pass without recording anything.
    pub fn predict(&self, store: &ParamStore, input: &Tensor) -> Result<Tensor> {
        self.check_input(input.cols())?;
        let last = self.layers.len() - 1;
        let mut h = input.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = h.matmul(store.get(layer.weight))?.add_row(store.get(layer.bias))?;
            if i < last {
                h = h.map(|v| self.spec.activation.apply(v));
            }
        }
        Ok(h)
    }
}

/// Conditional density `q(b | a) = N(mean_net(a), diag(exp(log_var)))` with a
/// learned variance shared across inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianHead {
    pub mean_net: Mlp,
    pub log_var: ParamId,
}

impl GaussianHead {
    pub fn init(spec: MlpSpec, seed: u64, store: &mut ParamStore, name: &str) -> Result<GaussianHead> {
        let out = spec.output_dim;
        let mean_net = Mlp::init(spec, seed, store, &format!("{name}.mean"))?;
        let log_var = store.add(format!("{name}.log_var"), Tensor::zeros(&[out]));
        Ok(GaussianHead { mean_net, log_var })
    }

    pub fn input_dim(&self) -> usize {
        self.mean_net.spec.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.mean_net.spec.output_dim
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.mean_net.param_ids();
        ids.push(self.log_var);
        ids
    }

    /// Pulls every log-variance back into `[LOG_VAR_MIN, LOG_VAR_MAX]`.
    pub fn clamp_log_var(&self, store: &mut ParamStore) {
        for v in store.get_mut(self.log_var).data_mut() {
            *v = v.clamp(LOG_VAR_MIN, LOG_VAR_MAX);
        }
    }

    fn check(&self, g: &Graph, a: NodeId, b: NodeId) -> Result<()> {
        let (va, vb) = (g.value(a), g.value(b));
        ensure!(
            va.cols() == self.input_dim() && vb.cols() == self.output_dim(),
            "head maps {} -> {}, got inputs of width {} and {}",
            self.input_dim(),
            self.output_dim(),
            va.cols(),
            vb.cols()
        );
        ensure!(va.rows() == vb.rows(), "a has {} rows, b has {}", va.rows(), vb.rows());
        Ok(())
    }

    /// `N × N` matrix with `log q(b_j | a_i)` at `(i, j)`. The diagonal holds
    /// the positive pairs.
    pub fn cross_log_lik(&self, g: &mut Graph, store: &ParamStore, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(g, a, b)?;
        let mean = self.mean_net.forward(g, store, a)?;
        let lv = g.param(store, self.log_var);
        g.cross_log_lik(mean, b, lv)
    }

    /// Length-`N` vector of positive-pair log densities `log q(b_i | a_i)`.
    pub fn row_log_lik(&self, g: &mut Graph, store: &ParamStore, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(g, a, b)?;
        let mean = self.mean_net.forward(g, store, a)?;
        let lv = g.param(store, self.log_var);
        g.row_log_lik(mean, b, lv)
    }
}

/// Cross log-likelihood matrix evaluated outside any graph.
pub fn cross_loglik_matrix(head: &GaussianHead, store: &ParamStore, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    ensure!(
        a.cols() == head.input_dim() && b.cols() == head.output_dim(),
        "head maps {} -> {}, got widths {} and {}",
        head.input_dim(),
        head.output_dim(),
        a.cols(),
        b.cols()
    );
    ensure!(a.rows() == b.rows(), "a has {} rows, b has {}", a.rows(), b.rows());
    let mean = head.mean_net.predict(store, a)?;
    cross_log_density(b, &mean, store.get(head.log_var))
}
