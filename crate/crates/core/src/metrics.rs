//! Routing and clustering diagnostics.
//!
//! All distances are Euclidean. Nearest-neighbour and cluster ties go to the
//! lower index so every metric is deterministic.

use std::collections::BTreeMap;

use crate::error::{LabError, Result};
use crate::losses::{variance_loss, LossBreakdown};
use crate::math::Matrix;
use crate::moe::RoutingState;

/// Neighbour count used by `expert_overlap` when none is given.
pub const DEFAULT_OVERLAP_K: usize = 10;

/// One row of a training log.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub step: usize,
    pub loss_h: f64,
    pub loss_aux: f64,
    pub loss_o: f64,
    pub loss_v: f64,
    pub total: f64,
    pub maxvio: f64,
    pub expert_overlap: f64,
    /// Spread of the pre-top-k gate probabilities.
    pub routing_variance: f64,
    /// Spread of the post-top-k scores, `−L_v`.
    pub score_variance: f64,
    pub silhouette: f64,
    /// Only filled in for curve comparisons.
    pub rmse: Option<f64>,
}

/// Column order of training logs.
pub const LOG_COLUMNS: [&str; 11] = [
    "step",
    "loss_h",
    "loss_aux",
    "loss_o",
    "loss_v",
    "total",
    "maxvio",
    "expert_overlap",
    "routing_variance",
    "score_variance",
    "silhouette",
];

impl MetricsRecord {
    /// Real-valued log column by name; `None` for `step` and unknown names.
    pub fn value(&self, column: &str) -> Option<f64> {
        Some(match column {
            "loss_h" => self.loss_h,
            "loss_aux" => self.loss_aux,
            "loss_o" => self.loss_o,
            "loss_v" => self.loss_v,
            "total" => self.total,
            "maxvio" => self.maxvio,
            "expert_overlap" => self.expert_overlap,
            "routing_variance" => self.routing_variance,
            "score_variance" => self.score_variance,
            "silhouette" => self.silhouette,
            _ => return None,
        })
    }

    pub fn with_losses(step: usize, losses: &LossBreakdown) -> Self {
        Self {
            step,
            loss_h: losses.l_h,
            loss_aux: losses.l_aux,
            loss_o: losses.l_o,
            loss_v: losses.l_v,
            total: losses.total,
            maxvio: 0.0,
            expert_overlap: 0.0,
            routing_variance: 0.0,
            score_variance: 0.0,
            silhouette: 0.0,
            rmse: None,
        }
    }
}

/// `(max load − mean load) / mean load`.
pub fn maxvio(loads: &[f64]) -> Result<f64> {
    if loads.is_empty() {
        return Err(LabError::Empty("maxvio needs at least one load".into()));
    }
    if loads.iter().any(|l| !l.is_finite() || *l < 0.0) {
        return Err(LabError::InvalidArgument(
            "loads must be finite and nonnegative".into(),
        ));
    }
    let mean = loads.iter().sum::<f64>() / loads.len() as f64;
    if mean <= 0.0 {
        return Err(LabError::InvalidArgument(
            "maxvio is undefined for all-zero loads".into(),
        ));
    }
    let max = loads.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok((max - mean) / mean)
}

pub fn accuracy<T: PartialEq>(pred: &[T], truth: &[T]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(LabError::Shape(format!(
            "accuracy: {} predictions vs {} labels",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(LabError::Empty("accuracy of zero predictions".into()));
    }
    let correct = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(correct as f64 / pred.len() as f64)
}

pub fn rmse(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(LabError::Shape(format!(
            "rmse: lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(LabError::Empty("rmse of empty vectors".into()));
    }
    let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok((sq / a.len() as f64).sqrt())
}

/// `(1/N_E)·Σ_j (mean_i g_ij − 1/N_E)²` over gate probabilities.
pub fn routing_variance(gates: &Matrix) -> Result<f64> {
    let (rows, cols) = gates.shape();
    if rows == 0 || cols == 0 {
        return Err(LabError::Empty(
            "routing_variance of an empty gate matrix".into(),
        ));
    }
    let uniform = 1.0 / cols as f64;
    let means = gates.as_array().sum_axis(ndarray::Axis(0)) / rows as f64;
    Ok(means
        .iter()
        .map(|m| (m - uniform) * (m - uniform))
        .sum::<f64>()
        / cols as f64)
}

/// Column spread of the post-top-k score matrix, the negation of `L_v`.
pub fn score_variance(state: &RoutingState) -> f64 {
    -variance_loss(state)
}

fn distance(points: &Matrix, a: usize, b: usize) -> f64 {
    points
        .row(a)
        .iter()
        .zip(points.row(b).iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn check_labels(points: &Matrix, labels: &[usize]) -> Result<()> {
    if points.rows() != labels.len() {
        return Err(LabError::Shape(format!(
            "{} points but {} labels",
            points.rows(),
            labels.len()
        )));
    }
    Ok(())
}

/// Mean silhouette coefficient. Points alone in their cluster score 0.
pub fn silhouette(points: &Matrix, labels: &[usize]) -> Result<f64> {
    check_labels(points, labels)?;
    let n = points.rows();
    let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        members.entry(l).or_default().push(i);
    }
    if n < 2 || members.len() < 2 {
        return Err(LabError::InvalidArgument(format!(
            "silhouette needs at least 2 clusters, got {}",
            members.len()
        )));
    }
    let mut total = 0.0;
    for i in 0..n {
        let own = &members[&labels[i]];
        if own.len() == 1 {
            continue;
        }
        let a = own
            .iter()
            .filter(|&&j| j != i)
            .map(|&j| distance(points, i, j))
            .sum::<f64>()
            / (own.len() - 1) as f64;
        let b = members
            .iter()
            .filter(|(l, _)| **l != labels[i])
            .map(|(_, m)| m.iter().map(|&j| distance(points, i, j)).sum::<f64>() / m.len() as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / n as f64)
}

/// Mean fraction of each point's `k'` nearest neighbours (self excluded)
/// carrying a different label, with `k' = min(k_param, N − 1)`.
pub fn expert_overlap(embeddings: &Matrix, labels: &[usize], k_param: usize) -> Result<f64> {
    check_labels(embeddings, labels)?;
    let n = embeddings.rows();
    if n < 2 {
        return Err(LabError::InvalidArgument(
            "expert_overlap needs at least 2 points".into(),
        ));
    }
    if k_param == 0 {
        return Err(LabError::InvalidArgument(
            "expert_overlap needs k_param >= 1".into(),
        ));
    }
    let k = k_param.min(n - 1);
    let mut total = 0.0;
    let mut dists: Vec<(f64, usize)> = Vec::with_capacity(n - 1);
    for i in 0..n {
        dists.clear();
        dists.extend(
            (0..n)
                .filter(|&j| j != i)
                .map(|j| (distance(embeddings, i, j), j)),
        );
        // stable sort keeps lower indices first among equal distances
        dists.sort_by(|a, b| a.0.total_cmp(&b.0));
        let different = dists[..k]
            .iter()
            .filter(|(_, j)| labels[*j] != labels[i])
            .count();
        total += different as f64 / k as f64;
    }
    Ok(total / n as f64)
}
