//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] is rebuilt for every optimization step. Each builder method
//! evaluates its operation eagerly, appends a node holding the output, and
//! returns the node's [`NodeId`]. Parents always have smaller ids than their
//! children, so [`backward`] is a single sweep over decreasing ids.
//!
//! Freezing works on two levels:
//!
//! - the graph carries a trainable-parameter filter; parameters outside it are
//!   inserted as constants, but gradients still flow *through* them to
//!   whatever produced their inputs;
//! - [`Graph::stop_gradient`] cuts the flow entirely.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::{ParamId, ParamStore, Tensor};
use crate::error::{ensure, Error, Result};

pub const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Elu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
        }
    }

    /// Derivative expressed through the input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    y + 1.0
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Param,
    MatMul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Act(NodeId, Activation),
    Square(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    ConcatCols(Vec<NodeId>),
    StopGradient,
    Diag(NodeId),
    WeightedSum(NodeId, Tensor),
    CrossLogLik {
        mean: NodeId,
        target: NodeId,
        log_var: NodeId,
    },
    RowLogLik {
        mean: NodeId,
        target: NodeId,
        log_var: NodeId,
    },
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Append-only computation trace.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    trainable: BTreeSet<ParamId>,
    param_nodes: HashMap<ParamId, NodeId>,
}

impl Graph {
    /// A graph in which no parameter is trainable.
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph that reports gradients for exactly `trainable`.
    pub fn with_trainable(trainable: impl IntoIterator<Item = ParamId>) -> Self {
        Graph {
            trainable: trainable.into_iter().collect(),
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.item()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable.contains(&id)
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn any_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant, value, false)
    }

    /// Inserts a parameter once per graph; later calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(&node) = self.param_nodes.get(&id) {
            return node;
        }
        let trainable = self.trainable.contains(&id);
        let node = self.push(Op::Param, store.get(id).clone(), trainable);
        self.param_nodes.insert(id, node);
        node
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), value, rg))
    }

    /// Adds a bias vector to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let value = self.value(a).add_row(self.value(bias))?;
        let rg = self.any_grad(&[a, bias]);
        Ok(self.push(Op::AddRow(a, bias), value, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.binary(a, b, |x, y| x + y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Op::Add(a, b), value, rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.binary(a, b, |x, y| x - y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Op::Sub(a, b), value, rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.binary(a, b, |x, y| x * y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Op::Mul(a, b), value, rg))
    }

    fn binary(&self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (va, vb) = (self.value(a), self.value(b));
        ensure!(
            va.len() == vb.len(),
            "elementwise op on {:?} and {:?}",
            va.shape(),
            vb.shape()
        );
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let value = self.value(a).map(|v| v * factor);
        let rg = self.any_grad(&[a]);
        self.push(Op::Scale(a, factor), value, rg)
    }

    pub fn activation(&mut self, a: NodeId, act: Activation) -> NodeId {
        let value = self.value(a).map(|v| act.apply(v));
        let rg = self.any_grad(&[a]);
        self.push(Op::Act(a, act), value, rg)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|v| v * v);
        let rg = self.any_grad(&[a]);
        self.push(Op::Square(a), value, rg)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.any_grad(&[a]);
        self.push(Op::Sum(a), value, rg)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(a).mean());
        let rg = self.any_grad(&[a]);
        self.push(Op::Mean(a), value, rg)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let refs: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::concat_cols(&refs)?;
        let rg = self.any_grad(parts);
        Ok(self.push(Op::ConcatCols(parts.to_vec()), value, rg))
    }

    /// Same value, no gradient flows back through this node.
    pub fn stop_gradient(&mut self, a: NodeId) -> NodeId {
        if !self.requires_grad(a) {
            return a;
        }
        let value = self.value(a).clone();
        self.push(Op::StopGradient, value, false)
    }

    /// Diagonal of a square matrix as a vector.
    pub fn diag(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        ensure!(
            v.shape().len() == 2 && v.rows() == v.cols(),
            "diag of non-square {:?}",
            v.shape()
        );
        let n = v.rows();
        let value = Tensor::vector((0..n).map(|i| v.get(i, i)).collect());
        let rg = self.any_grad(&[a]);
        Ok(self.push(Op::Diag(a), value, rg))
    }

    /// `Σ w ∘ a` for a constant weight tensor `w`.
    pub fn weighted_sum(&mut self, a: NodeId, weights: Tensor) -> Result<NodeId> {
        let v = self.value(a);
        ensure!(
            v.len() == weights.len(),
            "weighted_sum weights {:?} vs values {:?}",
            weights.shape(),
            v.shape()
        );
        let s = v.data().iter().zip(weights.data()).map(|(x, w)| x * w).sum();
        let rg = self.any_grad(&[a]);
        Ok(self.push(Op::WeightedSum(a, weights), Tensor::scalar(s), rg))
    }

    /// Matrix of diagonal-Gaussian log densities:
    /// entry `(i, j)` is `log N(target_j; mean_i, diag(exp(log_var)))`.
    pub fn cross_log_lik(&mut self, mean: NodeId, target: NodeId, log_var: NodeId) -> Result<NodeId> {
        let value = cross_log_density(self.value(target), self.value(mean), self.value(log_var))?;
        let rg = self.any_grad(&[mean, target, log_var]);
        Ok(self.push(
            Op::CrossLogLik {
                mean,
                target,
                log_var,
            },
            value,
            rg,
        ))
    }

    /// Row-wise diagonal-Gaussian log densities `log N(target_i; mean_i, ·)`.
    pub fn row_log_lik(&mut self, mean: NodeId, target: NodeId, log_var: NodeId) -> Result<NodeId> {
        let value = gaussian_log_density(self.value(target), self.value(mean), self.value(log_var))?;
        let rg = self.any_grad(&[mean, target, log_var]);
        Ok(self.push(
            Op::RowLogLik {
                mean,
                target,
                log_var,
            },
            value,
            rg,
        ))
    }

    /// Node ids of the trainable parameters present in this graph.
    pub fn trainable_nodes(&self) -> impl Iterator<Item = (ParamId, NodeId)> + '_ {
        self.param_nodes
            .iter()
            .filter(|(p, _)| self.trainable.contains(p))
            .map(|(&p, &n)| (p, n))
    }
}

/// Gradients of a scalar loss with respect to trainable parameters.
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    by_node: BTreeMap<NodeId, Tensor>,
    by_param: BTreeMap<ParamId, NodeId>,
}

impl Gradients {
    pub fn get(&self, node: NodeId) -> Option<&Tensor> {
        self.by_node.get(&node)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.by_param.get(&id).and_then(|n| self.by_node.get(n))
    }

    /// `(parameter, gradient)` pairs in parameter order.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.by_param.iter().map(|(&p, n)| (p, &self.by_node[n]))
    }

    pub fn len(&self) -> usize {
        self.by_param.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }
}

/// Reverse sweep from a scalar `loss` node.
///
/// Every trainable parameter inserted into the graph gets an entry; those the
/// loss does not depend on get zeros.
pub fn backward(graph: &Graph, loss: NodeId) -> Result<Gradients> {
    let loss_value = graph.value(loss);
    ensure!(
        loss_value.is_scalar(),
        "backward needs a scalar loss, node {} has shape {:?}",
        loss.0,
        loss_value.shape()
    );

    let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
    grads[loss.0] = Some(Tensor::full(loss_value.shape(), 1.0));

    for k in (0..=loss.0).rev() {
        let node = &graph.nodes[k];
        if !node.requires_grad {
            continue;
        }
        let Some(upstream) = grads[k].take() else {
            continue;
        };
        if !upstream.all_finite() {
            return Err(Error::Numeric {
                node: k,
                detail: "gradient contains NaN or infinity".into(),
            });
        }
        if matches!(node.op, Op::Param) {
            grads[k] = Some(upstream);
            continue;
        }
        let mut emit = |id: NodeId, g: Tensor| {
            if !graph.nodes[id.0].requires_grad {
                return;
            }
            match &mut grads[id.0] {
                Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        };
        let val = |id: NodeId| &graph.nodes[id.0].value;
        match &node.op {
            Op::Constant | Op::StopGradient | Op::Param => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (m, kk, n) = (va.rows(), va.cols(), vb.cols());
                if graph.requires_grad(*a) {
                    let mut ga = vec![0.0; m * kk];
                    super::tensor::gemm(false, true, m, n, kk, upstream.data(), vb.data(), &mut ga, 0.0);
                    emit(*a, Tensor::new(va.shape().to_vec(), ga)?);
                }
                if graph.requires_grad(*b) {
                    let mut gb = vec![0.0; kk * n];
                    super::tensor::gemm(true, false, kk, m, n, va.data(), upstream.data(), &mut gb, 0.0);
                    emit(*b, Tensor::new(vb.shape().to_vec(), gb)?);
                }
            }
            Op::AddRow(a, bias) => {
                if graph.requires_grad(*bias) {
                    let c = upstream.cols();
                    let mut gb = vec![0.0; c];
                    for row in upstream.data().chunks(c) {
                        gb.iter_mut().zip(row).for_each(|(s, v)| *s += v);
                    }
                    emit(*bias, Tensor::new(val(*bias).shape().to_vec(), gb)?);
                }
                emit(*a, upstream);
            }
            Op::Add(a, b) => {
                emit(*a, reshape_like(&upstream, val(*a)));
                emit(*b, reshape_like(&upstream, val(*b)));
            }
            Op::Sub(a, b) => {
                emit(*b, reshape_like(&upstream.map(|v| -v), val(*b)));
                emit(*a, reshape_like(&upstream, val(*a)));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let ga: Vec<f64> = upstream.data().iter().zip(vb.data()).map(|(g, y)| g * y).collect();
                let gb: Vec<f64> = upstream.data().iter().zip(va.data()).map(|(g, x)| g * x).collect();
                emit(*a, Tensor::new(va.shape().to_vec(), ga)?);
                emit(*b, Tensor::new(vb.shape().to_vec(), gb)?);
            }
            Op::Scale(a, f) => emit(*a, upstream.map(|g| g * f)),
            Op::Act(a, act) => {
                let x = val(*a);
                let data = upstream
                    .data()
                    .iter()
                    .zip(x.data().iter().zip(node.value.data()))
                    .map(|(g, (&xi, &yi))| g * act.derivative(xi, yi))
                    .collect();
                emit(*a, Tensor::new(x.shape().to_vec(), data)?);
            }
            Op::Square(a) => {
                let x = val(*a);
                emit(*a, upstream.zip_map(x, |g, xi| 2.0 * g * xi)?);
            }
            Op::Sum(a) => {
                let g = upstream.item();
                emit(*a, Tensor::full(val(*a).shape(), g));
            }
            Op::Mean(a) => {
                let x = val(*a);
                emit(*a, Tensor::full(x.shape(), upstream.item() / x.len() as f64));
            }
            Op::ConcatCols(parts) => {
                let n = upstream.rows();
                let width = upstream.cols();
                let mut offset = 0;
                for p in parts {
                    let pc = val(*p).cols();
                    if graph.requires_grad(*p) {
                        let mut data = Vec::with_capacity(n * pc);
                        for r in 0..n {
                            let row = &upstream.data()[r * width..(r + 1) * width];
                            data.extend_from_slice(&row[offset..offset + pc]);
                        }
                        emit(*p, Tensor::new(val(*p).shape().to_vec(), data)?);
                    }
                    offset += pc;
                }
            }
            Op::Diag(a) => {
                let n = upstream.len();
                let mut g = Tensor::zeros(val(*a).shape());
                for i in 0..n {
                    g.set(i, i, upstream.data()[i]);
                }
                emit(*a, g);
            }
            Op::WeightedSum(a, w) => {
                let g = upstream.item();
                emit(*a, Tensor::new(val(*a).shape().to_vec(), w.data().iter().map(|v| v * g).collect())?);
            }
            Op::CrossLogLik {
                mean,
                target,
                log_var,
            } => {
                let (gm, gt, glv) = cross_log_density_backward(&upstream, val(*target), val(*mean), val(*log_var));
                emit(*mean, gm);
                emit(*target, gt);
                emit(*log_var, glv);
            }
            Op::RowLogLik {
                mean,
                target,
                log_var,
            } => {
                let (m, t, lv) = (val(*mean), val(*target), val(*log_var));
                let d = m.cols();
                let prec: Vec<f64> = lv.data().iter().map(|v| (-v).exp()).collect();
                let mut gm = Tensor::zeros(m.shape());
                let mut glv = vec![0.0; d];
                for (i, &g) in upstream.data().iter().enumerate() {
                    for c in 0..d {
                        let diff = t.get(i, c) - m.get(i, c);
                        gm.set(i, c, g * diff * prec[c]);
                        glv[c] += g * 0.5 * (diff * diff * prec[c] - 1.0);
                    }
                }
                let gt = gm.map(|v| -v);
                emit(*mean, gm);
                emit(*target, gt);
                emit(*log_var, Tensor::new(lv.shape().to_vec(), glv)?);
            }
        }
    }

    let mut out = Gradients::default();
    for (pid, node) in graph.trainable_nodes() {
        let g = match grads.get_mut(node.0).and_then(Option::take) {
            Some(g) => g,
            None => Tensor::zeros(graph.value(node).shape()),
        };
        out.by_node.insert(node, g);
        out.by_param.insert(pid, node);
    }
    Ok(out)
}

fn reshape_like(g: &Tensor, like: &Tensor) -> Tensor {
    if g.shape() == like.shape() {
        g.clone()
    } else {
        Tensor::new(like.shape().to_vec(), g.data().to_vec()).expect("equal element counts")
    }
}

fn check_density_shapes(b: &Tensor, mean: &Tensor, log_var: &Tensor) -> Result<()> {
    ensure!(
        b.shape().len() == 2 && mean.shape().len() == 2,
        "density inputs must be matrices, got {:?} and {:?}",
        b.shape(),
        mean.shape()
    );
    ensure!(
        b.cols() == mean.cols() && log_var.len() == b.cols(),
        "density dims: target {:?}, mean {:?}, log_var {:?}",
        b.shape(),
        mean.shape(),
        log_var.shape()
    );
    Ok(())
}

/// Row-wise log density of a diagonal Gaussian with shared log-variances.
///
/// `out[i] = -½ Σ_d [(b_id - mean_id)² exp(-log_var_d) + log_var_d + log 2π]`
pub fn gaussian_log_density(b: &Tensor, mean: &Tensor, log_var: &Tensor) -> Result<Tensor> {
    check_density_shapes(b, mean, log_var)?;
    ensure!(b.rows() == mean.rows(), "row counts differ: {} vs {}", b.rows(), mean.rows());
    let d = b.cols();
    let prec: Vec<f64> = log_var.data().iter().map(|v| (-v).exp()).collect();
    let constant: f64 = log_var.data().iter().sum::<f64>() + d as f64 * LN_2PI;
    let out = (0..b.rows())
        .map(|i| {
            let quad: f64 = (0..d)
                .map(|c| {
                    let diff = b.get(i, c) - mean.get(i, c);
                    diff * diff * prec[c]
                })
                .sum();
            -0.5 * (quad + constant)
        })
        .collect();
    Ok(Tensor::vector(out))
}

/// Matrix form of [`gaussian_log_density`]: entry `(i, j)` scores target row `j`
/// under the Gaussian centred at mean row `i`.
pub fn cross_log_density(b: &Tensor, mean: &Tensor, log_var: &Tensor) -> Result<Tensor> {
    check_density_shapes(b, mean, log_var)?;
    let (n, m, d) = (mean.rows(), b.rows(), b.cols());
    let prec: Vec<f64> = log_var.data().iter().map(|v| (-v).exp()).collect();
    let constant: f64 = log_var.data().iter().sum::<f64>() + d as f64 * LN_2PI;
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let mi = mean.row(i);
        let row = &mut out[i * m..(i + 1) * m];
        for (j, slot) in row.iter_mut().enumerate() {
            let bj = b.row(j);
            let mut quad = 0.0;
            for c in 0..d {
                let diff = bj[c] - mi[c];
                quad += diff * diff * prec[c];
            }
            *slot = -0.5 * (quad + constant);
        }
    }
    Tensor::matrix(n, m, out)
}

/// Expands `Σ_j g_ij (b_j - m_i)` and its squared-difference analogue into
/// products with `G` and its transpose, so the cost is two `N × N × d` GEMMs.
fn cross_log_density_backward(
    upstream: &Tensor,
    b: &Tensor,
    mean: &Tensor,
    log_var: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (n, m, d) = (mean.rows(), b.rows(), b.cols());
    let prec: Vec<f64> = log_var.data().iter().map(|v| (-v).exp()).collect();
    let g = upstream.data();
    let row_sum: Vec<f64> = g.chunks(m.max(1)).map(|r| r.iter().sum()).collect();
    let mut col_sum = vec![0.0; m];
    for r in g.chunks(m.max(1)) {
        col_sum.iter_mut().zip(r).for_each(|(s, v)| *s += v);
    }
    let total: f64 = row_sum.iter().sum();
    // gb_mat = G b (n × d), gm_mat = Gᵀ mean (m × d)
    let mut g_b = vec![0.0; n * d];
    super::tensor::gemm(false, false, n, m, d, g, b.data(), &mut g_b, 0.0);
    let mut gt_m = vec![0.0; m * d];
    super::tensor::gemm(true, false, m, n, d, g, mean.data(), &mut gt_m, 0.0);

    let mut gm = vec![0.0; n * d];
    let mut glv = vec![0.0; d];
    for i in 0..n {
        let mi = mean.row(i);
        for c in 0..d {
            let k = i * d + c;
            gm[k] = prec[c] * (g_b[k] - row_sum[i] * mi[c]);
            glv[c] += row_sum[i] * mi[c] * mi[c] - 2.0 * mi[c] * g_b[k];
        }
    }
    let mut gb = vec![0.0; m * d];
    for j in 0..m {
        let bj = b.row(j);
        for c in 0..d {
            let k = j * d + c;
            gb[k] = -prec[c] * (col_sum[j] * bj[c] - gt_m[k]);
            glv[c] += col_sum[j] * bj[c] * bj[c];
        }
    }
    for c in 0..d {
        glv[c] = 0.5 * prec[c] * glv[c] - 0.5 * total;
    }
    (
        Tensor::new(mean.shape().to_vec(), gm).expect("mean shape"),
        Tensor::new(b.shape().to_vec(), gb).expect("target shape"),
        Tensor::new(log_var.shape().to_vec(), glv).expect("log_var shape"),
    )
}
