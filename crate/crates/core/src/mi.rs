//! Variational log-likelihood and contrastive mutual-information losses.
//!
//! Every MI term works on a cross log-likelihood matrix `L` produced by a
//! [`GaussianHead`]: `L[i][j] = log q(b_j | a_i)`. The diagonal scores the
//! positive pairs, everything else scores negatives. Maximizing MI widens
//! the gap between the two; minimizing it closes the gap.
//!
//! The conditional version weights each pair by how close the two anchors'
//! treatments are, so independence is only enforced among samples that share
//! (roughly) the same treatment value.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::nets::GaussianHead;
use crate::numcore::{Graph, NodeId, ParamStore, Tensor};

/// Row-stochastic pair weights from an RBF kernel over treatments.
#[derive(Clone, Debug, PartialEq)]
pub struct PairWeights {
    pub weights: Tensor,
    pub sigma: f64,
}

impl PairWeights {
    pub fn n(&self) -> usize {
        self.weights.rows()
    }
}

/// `ω_ij = softmax_j(exp(-‖x_i - x_j‖² / 2σ²))`, normalized per row.
pub fn rbf_pair_weights(x: &Tensor, sigma: f64) -> Result<PairWeights> {
    ensure!(sigma > 0.0 && sigma.is_finite(), "sigma must be positive, got {sigma}");
    let n = x.rows();
    ensure!(n >= 1, "need at least one sample");
    let two_s2 = 2.0 * sigma * sigma;
    let mut w = vec![0.0; n * n];
    for i in 0..n {
        let xi = x.row(i);
        let row = &mut w[i * n..(i + 1) * n];
        for (j, slot) in row.iter_mut().enumerate() {
            let d2: f64 = xi.iter().zip(x.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            *slot = (-d2 / two_s2).exp();
        }
        // kernel values lie in (0, 1], so exp never overflows; no max shift
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = v.exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    Ok(PairWeights {
        weights: Tensor::matrix(n, n, w)?,
        sigma,
    })
}

/// `-(1/N) Σ log q(b_i | a_i)`. Both inputs are detached, so only the head's
/// own parameters receive gradient.
pub fn lld_loss(g: &mut Graph, head: &GaussianHead, store: &ParamStore, a: NodeId, b: NodeId) -> Result<NodeId> {
    let a = g.stop_gradient(a);
    let b = g.stop_gradient(b);
    let rows = head.row_log_lik(g, store, a, b)?;
    let mean = g.mean(rows);
    Ok(g.scale(mean, -1.0))
}

fn check_square(g: &Graph, loglik: NodeId) -> Result<usize> {
    let v = g.value(loglik);
    ensure!(
        v.shape().len() == 2 && v.rows() == v.cols() && v.rows() >= 1,
        "expected a non-empty square log-likelihood matrix, got {:?}",
        v.shape()
    );
    Ok(v.rows())
}

/// `-(1/N²) Σ_ij (L_ii - L_ij)`, i.e. mean of all entries minus mean of the
/// diagonal.
pub fn mi_max_loss(g: &mut Graph, loglik: NodeId) -> Result<NodeId> {
    let gap = unweighted_gap(g, loglik)?;
    Ok(g.scale(gap, -1.0))
}

/// `+(1/N²) Σ_ij (L_ii - L_ij)`.
pub fn mi_min_loss(g: &mut Graph, loglik: NodeId) -> Result<NodeId> {
    unweighted_gap(g, loglik)
}

fn unweighted_gap(g: &mut Graph, loglik: NodeId) -> Result<NodeId> {
    let n = check_square(g, loglik)?;
    let d = g.diag(loglik)?;
    let pos = g.mean(d);
    let all = g.mean(loglik);
    let gap = g.sub(pos, all)?;
    // mean(diag) - mean(all) = (1/N²) Σ_ij (L_ii - L_ij) because Σ_j L_ii = N·L_ii
    debug_assert!(n >= 1);
    Ok(gap)
}

/// `+(1/N²) Σ_ij ω_ij (L_ii - L_ij)`.
pub fn mi_min_conditional_loss(g: &mut Graph, loglik: NodeId, weights: &PairWeights) -> Result<NodeId> {
    let n = check_square(g, loglik)?;
    ensure!(
        weights.n() == n,
        "pair weights are {}x{}, log-likelihoods {}x{}",
        weights.n(),
        weights.n(),
        n,
        n
    );
    let w = &weights.weights;
    let row_sums: Vec<f64> = (0..n).map(|i| w.row(i).iter().sum()).collect();
    let d = g.diag(loglik)?;
    let pos = g.weighted_sum(d, Tensor::vector(row_sums))?;
    let neg = g.weighted_sum(loglik, w.clone())?;
    let diff = g.sub(pos, neg)?;
    Ok(g.scale(diff, 1.0 / (n * n) as f64))
}

/// Mean diagonal minus mean off-diagonal entry. Zero for `N = 1`.
pub fn gap_statistic(loglik: &Tensor) -> f64 {
    let n = loglik.rows();
    if n < 2 {
        return 0.0;
    }
    let diag: f64 = (0..n).map(|i| loglik.get(i, i)).sum();
    let off = loglik.sum() - diag;
    diag / n as f64 - off / (n * (n - 1)) as f64
}

/// `(1/N) Σ_ij ω_ij (L_ii - L_ij)`: the per-anchor weighted gap.
pub fn weighted_gap_statistic(loglik: &Tensor, weights: &PairWeights) -> f64 {
    let n = loglik.rows();
    let w = &weights.weights;
    let mut total = 0.0;
    for i in 0..n {
        let lii = loglik.get(i, i);
        for j in 0..n {
            total += w.get(i, j) * (lii - loglik.get(i, j));
        }
    }
    total / n as f64
}

/// Switches that remove whole term groups from the objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    /// Drop the relevance and exclusion terms of the instrument representation.
    pub disable_z_mi: bool,
    /// Drop both relevance terms of the confounder representation.
    pub disable_c_mi: bool,
    /// Drop the instrument/confounder decomposition regularizer.
    pub disable_zc_reg: bool,
    /// Skip the two calibration regressions.
    pub disable_two_stage: bool,
}

impl Ablation {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn is_full(&self) -> bool {
        *self == Self::default()
    }

    /// Short label used in reports.
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.disable_z_mi {
            parts.push("no_z_mi");
        }
        if self.disable_c_mi {
            parts.push("no_c_mi");
        }
        if self.disable_zc_reg {
            parts.push("no_zc_reg");
        }
        if self.disable_two_stage {
            parts.push("no_two_stage");
        }
        if parts.is_empty() {
            "full".to_string()
        } else {
            parts.join("+")
        }
    }
}

/// One scalar node per variational pair.
#[derive(Clone, Copy, Debug)]
pub struct TermNodes {
    pub zx: NodeId,
    pub zy: NodeId,
    pub cx: NodeId,
    pub cy: NodeId,
    pub zc: NodeId,
}

impl TermNodes {
    fn named(&self) -> [(&'static str, NodeId); 5] {
        [
            ("zx", self.zx),
            ("zy", self.zy),
            ("cx", self.cx),
            ("cy", self.cy),
            ("zc", self.zc),
        ]
    }
}

/// Coefficients applied to each MI term after ablation.
pub fn mi_coefficients(alpha: f64, eta: f64, ablation: &Ablation) -> [f64; 5] {
    let z = if ablation.disable_z_mi { 0.0 } else { 1.0 };
    let c = if ablation.disable_c_mi { 0.0 } else { alpha };
    let r = if ablation.disable_zc_reg { 0.0 } else { eta };
    [z, z, c, c, r]
}

fn weighted_total(g: &mut Graph, terms: &[(NodeId, f64)]) -> Result<NodeId> {
    let mut total: Option<NodeId> = None;
    for &(node, coef) in terms {
        if coef == 0.0 {
            continue;
        }
        let scaled = if coef == 1.0 { node } else { g.scale(node, coef) };
        total = Some(match total {
            None => scaled,
            Some(t) => g.add(t, scaled)?,
        });
    }
    Ok(match total {
        Some(t) => t,
        None => g.constant(Tensor::scalar(0.0)),
    })
}

/// Sum of the five variational log-likelihood losses.
pub fn lld_total(g: &mut Graph, lld: &TermNodes) -> Result<NodeId> {
    let terms: Vec<_> = lld.named().iter().map(|&(_, n)| (n, 1.0)).collect();
    weighted_total(g, &terms)
}

/// `zx + zy + α(cx + cy) + η·zc`, with ablated groups removed.
pub fn mi_total(g: &mut Graph, mi: &TermNodes, alpha: f64, eta: f64, ablation: &Ablation) -> Result<NodeId> {
    ensure!(
        alpha >= 0.0 && eta >= 0.0,
        "alpha and eta must be non-negative, got {alpha} and {eta}"
    );
    let coefs = mi_coefficients(alpha, eta, ablation);
    let terms: Vec<_> = mi.named().iter().zip(coefs).map(|(&(_, n), c)| (n, c)).collect();
    weighted_total(g, &terms)
}

/// Both combined objectives plus a per-term breakdown of their values.
#[derive(Clone, Debug)]
pub struct LossBundle {
    pub lld_total: NodeId,
    pub mi_total: NodeId,
    pub breakdown: BTreeMap<String, f64>,
}

pub fn combine_objectives(
    g: &mut Graph,
    lld: &TermNodes,
    mi: &TermNodes,
    alpha: f64,
    eta: f64,
    ablation: &Ablation,
) -> Result<LossBundle> {
    let mi_node = mi_total(g, mi, alpha, eta, ablation)?;
    let lld_node = lld_total(g, lld)?;
    let mut breakdown = BTreeMap::new();
    for (name, node) in lld.named() {
        breakdown.insert(format!("lld_{name}"), g.scalar(node));
    }
    for (name, node) in mi.named() {
        breakdown.insert(format!("mi_{name}"), g.scalar(node));
    }
    breakdown.insert("lld_total".into(), g.scalar(lld_node));
    breakdown.insert("mi_total".into(), g.scalar(mi_node));
    Ok(LossBundle {
        lld_total: lld_node,
        mi_total: mi_node,
        breakdown,
    })
}
