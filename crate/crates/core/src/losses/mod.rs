//! Task, auxiliary, orthogonality and variance losses, and their weighted
//! combination `L = L_h + α·L_aux + β·c_o·L_o + γ·c_v·L_v`.
//!
//! `c_o` and `c_v` are the dynamic scale factors: when enabled they rescale
//! `L_o` and `L_v` to the magnitude of `L_aux`, are smoothed with an EMA
//! across steps, and are constants as far as differentiation is concerned.
//!
//! Each loss is also exposed as a [`LossTerm`] strategy (see [`terms`]) that
//! knows its own partial derivatives with respect to the routing scores and
//! the active expert outputs. The gradient module chains those partials back
//! to the parameters.

pub mod terms;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::math::Matrix;
use crate::moe::{ExpertOutputs, RoutingState};

pub use terms::{LossInputs, LossTerm, Partials, TermKind, TermRegistry};

/// Guard added to denominators of the dynamic scale ratios.
pub const SCALE_EPS: f64 = 1e-12;
/// EMA momentum applied to the dynamic scale factors.
pub const SCALE_MOMENTUM: f64 = 0.9;

/// How `Σ f_j·p_j` is normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AuxNormalization {
    /// Unnormalized `Σ_j f_j·p_j`; grows linearly with the batch size.
    Paper,
    /// `(n/k)·Σ_j f_j·p_j/N`; equals 1 under perfect balance.
    Switch,
}

impl AuxNormalization {
    pub fn term_name(self) -> &'static str {
        match self {
            Self::Paper => "aux_paper",
            Self::Switch => "aux_switch",
        }
    }
}

impl std::str::FromStr for AuxNormalization {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "paper" => Ok(Self::Paper),
            "switch" => Ok(Self::Switch),
            _ => Err(LabError::Unknown {
                kind: "aux normalization",
                name: s.to_string(),
            }),
        }
    }
}

impl std::fmt::Display for AuxNormalization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Paper => "paper",
            Self::Switch => "switch",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// ε in the orthogonality projection denominators.
    pub eps_norm: f64,
    /// Experts whose score does not exceed this are treated as inactive.
    pub tau_gate: f64,
    pub aux_normalization: AuxNormalization,
    pub dynamic_scaling: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1e-3,
            beta: 1e-3,
            gamma: 1e-3,
            eps_norm: 1e-8,
            tau_gate: 0.0,
            aux_normalization: AuxNormalization::Switch,
            dynamic_scaling: true,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(LabError::InvalidArgument(format!(
                    "{name} must be finite and >= 0"
                )));
            }
        }
        if !(self.eps_norm.is_finite() && self.eps_norm > 0.0) {
            return Err(LabError::InvalidArgument("eps_norm must be > 0".into()));
        }
        if !(self.tau_gate.is_finite() && self.tau_gate >= 0.0) {
            return Err(LabError::InvalidArgument("tau_gate must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_h: f64,
    pub l_aux: f64,
    pub l_o: f64,
    pub l_v: f64,
    pub scale_o: f64,
    pub scale_v: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn scales(&self) -> (f64, f64) {
        (self.scale_o, self.scale_v)
    }
}

/// Mean squared error over all `N · d_out` entries.
pub fn task_loss(y: &Matrix, targets: &Matrix) -> Result<f64> {
    if y.shape() != targets.shape() {
        return Err(LabError::Shape(format!(
            "prediction {:?} vs target {:?}",
            y.shape(),
            targets.shape()
        )));
    }
    let count = (y.rows() * y.cols()).max(1) as f64;
    let sse: f64 = y
        .as_array()
        .iter()
        .zip(targets.as_array().iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sse / count)
}

/// Load-balancing loss built from `f_j` (token fractions) and `p_j` (score
/// column sums).
pub fn aux_loss(state: &RoutingState, mode: AuxNormalization) -> f64 {
    let raw: f64 = state
        .loads_f
        .iter()
        .zip(&state.loads_p)
        .map(|(f, p)| f * p)
        .sum();
    match mode {
        AuxNormalization::Paper => raw,
        AuxNormalization::Switch => {
            let n = state.num_experts() as f64;
            let k = state.k() as f64;
            let tokens = state.num_tokens() as f64;
            (n / k) * raw / tokens
        }
    }
}

/// Squared length of the projection of `a` onto `b`, with `ε` guarding the
/// denominator: `⟨a,b⟩²·‖b‖² / (‖b‖² + ε)²`.
pub(crate) fn projection_sq(a: &[f64], b: &[f64], eps: f64) -> f64 {
    let ab: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let bb: f64 = b.iter().map(|y| y * y).sum();
    let denom = bb + eps;
    ab * ab * bb / (denom * denom)
}

/// Number of ordered (token, j, k≠j) pairs among active experts.
pub(crate) fn ortho_pair_count(outputs: &ExpertOutputs) -> usize {
    outputs
        .active
        .iter()
        .map(|a| a.len() * a.len().saturating_sub(1))
        .sum()
}

/// Mean squared projection norm between distinct active experts of the same
/// token. Zero when every such pair is orthogonal (or there are no pairs).
pub fn ortho_loss(outputs: &ExpertOutputs, eps_norm: f64) -> f64 {
    let pairs = ortho_pair_count(outputs);
    if pairs == 0 {
        return 0.0;
    }
    let mut sum = 0.0;
    for token in &outputs.active {
        for (a_idx, (_, a)) in token.iter().enumerate() {
            for (b_idx, (_, b)) in token.iter().enumerate() {
                if a_idx != b_idx {
                    sum += projection_sq(
                        a.as_slice().expect("contiguous"),
                        b.as_slice().expect("contiguous"),
                        eps_norm,
                    );
                }
            }
        }
    }
    sum / pairs as f64
}

/// Per-expert column means of the score matrix.
pub(crate) fn score_column_means(scores: &Matrix) -> Vec<f64> {
    let tokens = scores.rows().max(1) as f64;
    scores
        .as_array()
        .sum_axis(ndarray::Axis(0))
        .iter()
        .map(|s| s / tokens)
        .collect()
}

/// `−(1/n)·Σ_i Σ_j (s_ij − s̄_j)²`. Not divided by N, so it scales with the
/// batch size.
pub fn variance_loss(state: &RoutingState) -> f64 {
    let means = score_column_means(&state.scores);
    let n = state.num_experts() as f64;
    let mut sum = 0.0;
    for row in state.scores.as_array().rows() {
        for (s, m) in row.iter().zip(&means) {
            sum += (s - m) * (s - m);
        }
    }
    -sum / n
}

/// Computes the dynamic scales (if enabled) and the weighted total.
///
/// `prev_scales` carries the previous step's scales for EMA smoothing; `None`
/// means this is the first step and the raw ratios are used as-is.
pub fn combine(
    l_h: f64,
    l_aux: f64,
    l_o: f64,
    l_v: f64,
    weights: &LossWeights,
    prev_scales: Option<(f64, f64)>,
) -> Result<LossBreakdown> {
    if ![l_h, l_aux, l_o, l_v].iter().all(|v| v.is_finite()) {
        return Err(LabError::NonFinite("loss terms".into()));
    }
    let (scale_o, scale_v) = if weights.dynamic_scaling {
        let raw_o = l_aux.abs() / (l_o.abs() + SCALE_EPS);
        let raw_v = l_aux.abs() / (l_v.abs() + SCALE_EPS);
        match prev_scales {
            Some((po, pv)) => (
                SCALE_MOMENTUM * po + (1.0 - SCALE_MOMENTUM) * raw_o,
                SCALE_MOMENTUM * pv + (1.0 - SCALE_MOMENTUM) * raw_v,
            ),
            None => (raw_o, raw_v),
        }
    } else {
        (1.0, 1.0)
    };
    let total =
        l_h + weights.alpha * l_aux + weights.beta * scale_o * l_o + weights.gamma * scale_v * l_v;
    if !total.is_finite() {
        return Err(LabError::NonFinite("total loss".into()));
    }
    Ok(LossBreakdown {
        l_h,
        l_aux,
        l_o,
        l_v,
        scale_o,
        scale_v,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{gaussian_sample, Rng};
    use crate::moe::{forward, route, MoeParams, Support};
    use ndarray::{arr1, Array1};
    use proptest::prelude::*;

    /// Routing state whose score matrix is given directly (selection = nonzeros).
    fn state_from_scores(rows: &[&[f64]]) -> RoutingState {
        let scores = Matrix::from_rows(rows).unwrap();
        let (tokens, n) = scores.shape();
        let selected: Vec<Vec<usize>> = (0..tokens)
            .map(|i| (0..n).filter(|&j| scores.get(i, j) != 0.0).collect())
            .collect();
        let support = Support {
            selected,
            num_experts: n,
        };
        let loads_f = support
            .counts()
            .iter()
            .map(|&c| c as f64 / tokens as f64)
            .collect();
        let loads_p = scores.as_array().sum_axis(ndarray::Axis(0)).to_vec();
        RoutingState {
            logits: scores.clone(),
            probs: scores.clone(),
            support,
            scores,
            loads_f,
            loads_p,
        }
    }

    fn outputs_of(tokens: Vec<Vec<Array1<f64>>>) -> ExpertOutputs {
        let d_out = tokens[0][0].len();
        let active = tokens
            .into_iter()
            .map(|v| v.into_iter().enumerate().collect())
            .collect::<Vec<Vec<(usize, Array1<f64>)>>>();
        ExpertOutputs {
            combined: Matrix::zeros(active.len(), d_out),
            active,
        }
    }

    #[test]
    fn task_loss_examples() {
        let y = Matrix::from_rows(&[&[0.0, 0.0]]).unwrap();
        let t = Matrix::from_rows(&[&[3.0, 4.0]]).unwrap();
        assert_eq!(task_loss(&t, &t).unwrap(), 0.0);
        assert_eq!(task_loss(&y, &t).unwrap(), 12.5);
        let t2 = Matrix::from_rows(&[&[6.0, 8.0]]).unwrap();
        assert_eq!(task_loss(&y, &t2).unwrap(), 4.0 * 12.5);
        assert!(task_loss(&y, &Matrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn aux_loss_perfect_balance_and_collapse() {
        // N=4, n=4, k=2, each expert gets two tokens with score 0.5
        let balanced = state_from_scores(&[
            &[0.5, 0.5, 0.0, 0.0],
            &[0.0, 0.5, 0.5, 0.0],
            &[0.0, 0.0, 0.5, 0.5],
            &[0.5, 0.0, 0.0, 0.5],
        ]);
        assert!((aux_loss(&balanced, AuxNormalization::Switch) - 1.0).abs() < 1e-15);
        // kN/n = 2·4/4
        assert!((aux_loss(&balanced, AuxNormalization::Paper) - 2.0).abs() < 1e-15);

        let collapsed = state_from_scores(&[&[1.0, 0.0, 0.0], &[1.0, 0.0, 0.0]]);
        assert!((aux_loss(&collapsed, AuxNormalization::Switch) - 3.0).abs() < 1e-15);
    }

    #[test]
    fn aux_switch_bounded_below_by_one_brute_force() {
        // Every support pattern for N=4, n=2, k=1 (scores are then 0/1).
        for mask in 0u32..16 {
            let rows: Vec<Vec<f64>> = (0..4)
                .map(|i| {
                    if mask >> i & 1 == 1 {
                        vec![0.0, 1.0]
                    } else {
                        vec![1.0, 0.0]
                    }
                })
                .collect();
            let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
            let st = state_from_scores(&refs);
            let v = aux_loss(&st, AuxNormalization::Switch);
            let ones = mask.count_ones();
            assert!(v >= 1.0 - 1e-15);
            assert_eq!((v - 1.0).abs() < 1e-15, ones == 2, "mask {mask:04b} -> {v}");
        }
    }

    #[test]
    fn ortho_loss_examples() {
        let orth = outputs_of(vec![vec![arr1(&[1.0, 0.0]), arr1(&[0.0, 1.0])]]);
        assert_eq!(ortho_loss(&orth, 1e-8), 0.0);

        let eps = 1e-8;
        let same = outputs_of(vec![vec![arr1(&[1.0, 0.0]), arr1(&[1.0, 0.0])]]);
        let expected = (1.0f64 / (1.0 + eps)).powi(2);
        assert!((ortho_loss(&same, eps) - expected).abs() < 1e-15);

        let zero = outputs_of(vec![vec![arr1(&[0.0, 0.0]), arr1(&[2.0, 1.0])]]);
        assert_eq!(ortho_loss(&zero, eps), 0.0);
    }

    #[test]
    fn ortho_loss_without_pairs_is_zero() {
        let single = outputs_of(vec![vec![arr1(&[1.0, 2.0])]]);
        assert_eq!(ortho_loss(&single, 1e-8), 0.0);
    }

    #[test]
    fn variance_loss_examples() {
        let constant = state_from_scores(&[&[0.25, 0.75], &[0.25, 0.75], &[0.25, 0.75]]);
        assert_eq!(variance_loss(&constant), 0.0);

        let diag = state_from_scores(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert!((variance_loss(&diag) + 0.5).abs() < 1e-15);

        let doubled = state_from_scores(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 0.0], &[0.0, 1.0]]);
        assert!((variance_loss(&doubled) + 1.0).abs() < 1e-15);
    }

    #[test]
    fn combine_examples() {
        let zero = LossWeights {
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
            ..Default::default()
        };
        assert_eq!(
            combine(1.5, 2.0, 3.0, -1.0, &zero, None).unwrap().total,
            1.5
        );

        let unit = LossWeights {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            dynamic_scaling: false,
            ..Default::default()
        };
        assert_eq!(
            combine(1.0, 2.0, 3.0, -1.0, &unit, None).unwrap().total,
            5.0
        );

        let dynamic = LossWeights {
            beta: 0.5,
            ..Default::default()
        };
        let b = combine(0.0, 1.0, 0.01, -1.0, &dynamic, None).unwrap();
        assert!((b.scale_o - 100.0).abs() < 1e-6);
        assert!((dynamic.beta * b.scale_o * b.l_o - 0.5).abs() < 1e-9);
    }

    #[test]
    fn combine_smooths_scales() {
        let w = LossWeights::default();
        let b = combine(0.0, 2.0, 1.0, -4.0, &w, Some((10.0, 10.0))).unwrap();
        let raw_o = 2.0 / (1.0 + SCALE_EPS);
        let raw_v = 2.0 / (4.0 + SCALE_EPS);
        assert!((b.scale_o - (9.0 + 0.1 * raw_o)).abs() < 1e-12);
        assert!((b.scale_v - (9.0 + 0.1 * raw_v)).abs() < 1e-12);
    }

    #[test]
    fn combine_rejects_non_finite() {
        let w = LossWeights::default();
        assert!(combine(f64::NAN, 0.0, 0.0, 0.0, &w, None).is_err());
        assert!(combine(0.0, f64::INFINITY, 0.0, 0.0, &w, None).is_err());
    }

    #[test]
    fn variance_loss_negative_unless_columns_constant() {
        let mut rng = Rng::new(17);
        for _ in 0..20 {
            let router = gaussian_sample(&mut rng, 3, 4, 0.0, 1.0);
            let experts = (0..4)
                .map(|_| gaussian_sample(&mut rng, 3, 2, 0.0, 1.0))
                .collect();
            let p = MoeParams::new(router, experts, 2).unwrap();
            let x = gaussian_sample(&mut rng, 5, 3, 0.0, 1.0);
            let st = route(&p, &x).unwrap();
            assert!(variance_loss(&st) < 0.0);
        }
    }

    fn rotate(v: &Array1<f64>, c: f64, s: f64) -> Array1<f64> {
        arr1(&[c * v[0] - s * v[1], s * v[0] + c * v[1]])
    }

    proptest! {
        #[test]
        fn ortho_loss_rotation_invariant(seed in any::<u64>(), angle in 0.0f64..std::f64::consts::TAU) {
            let mut rng = Rng::new(seed);
            let router = gaussian_sample(&mut rng, 3, 4, 0.0, 1.0);
            let experts = (0..4).map(|_| gaussian_sample(&mut rng, 3, 2, 0.0, 1.0)).collect();
            let p = MoeParams::new(router, experts, 3).unwrap();
            let x = gaussian_sample(&mut rng, 6, 3, 0.0, 1.0);
            let st = route(&p, &x).unwrap();
            let out = forward(&p, &x, &st, 0.0).unwrap();
            let (c, s) = (angle.cos(), angle.sin());
            let rotated = ExpertOutputs {
                active: out.active.iter().map(|t| t.iter().map(|(j, v)| (*j, rotate(v, c, s))).collect()).collect(),
                combined: out.combined.clone(),
            };
            let a = ortho_loss(&out, 1e-8);
            let b = ortho_loss(&rotated, 1e-8);
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }

        #[test]
        fn ortho_zero_iff_pairwise_orthogonal(seed in any::<u64>(), make_orth in any::<bool>()) {
            let mut rng = Rng::new(seed);
            let a = arr1(&[rng.normal(0.0, 1.0), rng.normal(0.0, 1.0)]);
            let b = if make_orth { arr1(&[-a[1], a[0]]) } else { arr1(&[rng.normal(0.0, 1.0), rng.normal(0.0, 1.0)]) };
            let dot = a.dot(&b);
            let out = outputs_of(vec![vec![a, b]]);
            let v = ortho_loss(&out, 1e-8);
            prop_assert_eq!(v == 0.0 || v < 1e-18, dot.abs() <= 1e-9);
        }

        #[test]
        fn combine_linear_in_terms(
            l_h in -5.0f64..5.0, l_aux in -5.0f64..5.0, l_o in 0.0f64..5.0, l_v in -5.0f64..0.0,
            t in -3.0f64..3.0,
        ) {
            let w = LossWeights { alpha: 0.7, beta: 0.3, gamma: 0.2, dynamic_scaling: false, ..Default::default() };
            let base = combine(l_h, l_aux, l_o, l_v, &w, None).unwrap();
            let bumped = combine(l_h, l_aux, l_o + t.abs(), l_v, &w, None).unwrap();
            prop_assert!((bumped.total - base.total - w.beta * t.abs()).abs() < 1e-12);
            let recomposed = base.l_h + w.alpha * base.l_aux + w.beta * base.scale_o * base.l_o + w.gamma * base.scale_v * base.l_v;
            prop_assert!((recomposed - base.total).abs() < 1e-12);
        }
    }
}
