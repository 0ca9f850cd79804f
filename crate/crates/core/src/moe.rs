//! Mixture-of-Experts forward pass.
//!
//! `route` turns a token batch into router logits, gate probabilities, the
//! top-k selection per token and the renormalized score matrix S. `forward`
//! evaluates only the selected experts and combines their outputs with S.
//! Experts are single linear maps, `E_j(x) = x · θ_Ej`.

use ndarray::{Array1, Array2};

use crate::error::{LabError, Result};
use crate::math::{matmul, softmax_rows, Matrix};

/// Router and expert parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MoeParams {
    /// d × n router matrix.
    pub router: Matrix,
    /// n matrices of shape d × d_out.
    pub experts: Vec<Matrix>,
    /// Experts selected per token.
    pub k: usize,
}

impl MoeParams {
    pub fn new(router: Matrix, experts: Vec<Matrix>, k: usize) -> Result<Self> {
        let params = Self { router, experts, k };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_experts();
        if n == 0 {
            return Err(LabError::InvalidArgument(
                "at least one expert required".into(),
            ));
        }
        if self.experts.len() != n {
            return Err(LabError::Shape(format!(
                "router has {n} columns but {} experts were given",
                self.experts.len()
            )));
        }
        if self.k == 0 || self.k > n {
            return Err(LabError::InvalidArgument(format!(
                "k = {} must satisfy 1 <= k <= n = {n}",
                self.k
            )));
        }
        let (d, d_out) = self.experts[0].shape();
        if d != self.input_dim() {
            return Err(LabError::Shape(format!(
                "router expects d = {} but experts take d = {d}",
                self.input_dim()
            )));
        }
        if let Some(j) = self.experts.iter().position(|e| e.shape() != (d, d_out)) {
            return Err(LabError::Shape(format!("expert {j} has a different shape")));
        }
        Ok(())
    }

    pub fn num_experts(&self) -> usize {
        self.router.cols()
    }

    pub fn input_dim(&self) -> usize {
        self.router.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.experts[0].cols()
    }

    /// Total count of scalar parameters.
    pub fn len(&self) -> usize {
        self.router.rows() * self.router.cols()
            + self
                .experts
                .iter()
                .map(|e| e.rows() * e.cols())
                .sum::<usize>()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-token expert choice: `selected[i]` lists the top-k experts of token i,
/// highest probability first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Support {
    pub selected: Vec<Vec<usize>>,
    pub num_experts: usize,
}

impl Support {
    pub fn contains(&self, token: usize, expert: usize) -> bool {
        self.selected[token].contains(&expert)
    }

    /// Tokens per expert, i.e. `N · f_j`.
    pub fn counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_experts];
        for row in &self.selected {
            for &j in row {
                counts[j] += 1;
            }
        }
        counts
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoutingState {
    /// N × n router logits `X · θ_R`.
    pub logits: Matrix,
    /// N × n gate probabilities (pre top-k).
    pub probs: Matrix,
    pub support: Support,
    /// N × n renormalized routing scores; exactly k nonzeros per row.
    pub scores: Matrix,
    /// Fraction of tokens routed to each expert.
    pub loads_f: Vec<f64>,
    /// Column sums of `scores`.
    pub loads_p: Vec<f64>,
}

impl RoutingState {
    pub fn num_tokens(&self) -> usize {
        self.scores.rows()
    }

    pub fn num_experts(&self) -> usize {
        self.scores.cols()
    }

    pub fn k(&self) -> usize {
        self.support.selected.first().map_or(0, |s| s.len())
    }

    /// Top-1 expert for every token.
    pub fn top1(&self) -> Vec<usize> {
        self.support.selected.iter().map(|s| s[0]).collect()
    }
}

/// Indices of the `k` largest entries; ties go to the lower index.
pub fn top_k_indices(row: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    // stable sort keeps lower indices first among equal values
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
    order.truncate(k);
    order
}

fn check_input(params: &MoeParams, x: &Matrix) -> Result<()> {
    params.validate()?;
    if x.cols() != params.input_dim() {
        return Err(LabError::Shape(format!(
            "tokens have {} features, router expects {}",
            x.cols(),
            params.input_dim()
        )));
    }
    Ok(())
}

/// Router logits → softmax → top-k → renormalized scores and loads.
pub fn route(params: &MoeParams, x: &Matrix) -> Result<RoutingState> {
    check_input(params, x)?;
    let logits = matmul(x, &params.router)?;
    let probs = softmax_rows(&logits)?;
    let selected = probs
        .as_array()
        .rows()
        .into_iter()
        .map(|r| top_k_indices(r.as_slice().expect("standard layout"), params.k))
        .collect();
    let support = Support {
        selected,
        num_experts: params.num_experts(),
    };
    assemble_state(logits, probs, support)
}

/// Same as [`route`] but with the top-k selection supplied instead of
/// recomputed. Used to differentiate with the support held fixed.
pub fn route_with_support(
    params: &MoeParams,
    x: &Matrix,
    support: &Support,
) -> Result<RoutingState> {
    check_input(params, x)?;
    if support.selected.len() != x.rows() || support.num_experts != params.num_experts() {
        return Err(LabError::Shape("support does not match the batch".into()));
    }
    let logits = matmul(x, &params.router)?;
    let probs = softmax_rows(&logits)?;
    assemble_state(logits, probs, support.clone())
}

fn assemble_state(logits: Matrix, probs: Matrix, support: Support) -> Result<RoutingState> {
    let (n_tokens, n) = probs.shape();
    let mut scores = Array2::<f64>::zeros((n_tokens, n));
    for (i, sel) in support.selected.iter().enumerate() {
        let z: f64 = sel.iter().map(|&j| probs.get(i, j)).sum();
        for &j in sel {
            scores[[i, j]] = probs.get(i, j) / z;
        }
    }
    let loads_f = support
        .counts()
        .into_iter()
        .map(|c| c as f64 / n_tokens as f64)
        .collect();
    let loads_p = scores.sum_axis(ndarray::Axis(0)).to_vec();
    Ok(RoutingState {
        logits,
        probs,
        support,
        scores: Matrix::from_array(scores)?,
        loads_f,
        loads_p,
    })
}

/// Selected-expert outputs and their score-weighted combination.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertOutputs {
    /// `active[i]` holds `(j, x̃_ij)` for every expert of token i whose score
    /// exceeds the gate threshold, in the support's order.
    pub active: Vec<Vec<(usize, Array1<f64>)>>,
    /// N × d_out combined output.
    pub combined: Matrix,
}

impl ExpertOutputs {
    pub fn output(&self, token: usize, expert: usize) -> Option<&Array1<f64>> {
        self.active[token]
            .iter()
            .find(|(j, _)| *j == expert)
            .map(|(_, v)| v)
    }
}

/// Evaluates the selected experts and combines them: `y_i = Σ s_ij · x̃_ij`.
/// Experts whose score does not exceed `tau_gate` are not evaluated.
pub fn forward(
    params: &MoeParams,
    x: &Matrix,
    state: &RoutingState,
    tau_gate: f64,
) -> Result<ExpertOutputs> {
    check_input(params, x)?;
    if state.num_tokens() != x.rows() || state.num_experts() != params.num_experts() {
        return Err(LabError::Shape(
            "routing state does not match the batch".into(),
        ));
    }
    let d_out = params.output_dim();
    let mut combined = Array2::<f64>::zeros((x.rows(), d_out));
    let mut active = Vec::with_capacity(x.rows());
    for (i, sel) in state.support.selected.iter().enumerate() {
        let token = x.row(i);
        let mut outs = Vec::with_capacity(sel.len());
        for &j in sel {
            let s = state.scores.get(i, j);
            if s <= tau_gate {
                continue;
            }
            let out = token.dot(params.experts[j].as_array());
            combined.row_mut(i).scaled_add(s, &out);
            outs.push((j, out));
        }
        active.push(outs);
    }
    Ok(ExpertOutputs {
        active,
        combined: Matrix::from_array(combined)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{gaussian_sample, Rng};
    use proptest::prelude::*;

    fn random_params(rng: &mut Rng, d: usize, d_out: usize, n: usize, k: usize) -> MoeParams {
        let router = gaussian_sample(rng, d, n, 0.0, 1.0);
        let experts = (0..n)
            .map(|_| gaussian_sample(rng, d, d_out, 0.0, 1.0))
            .collect();
        MoeParams::new(router, experts, k).unwrap()
    }

    /// Router logits equal to ln(probs) reproduce an exact probability row
    /// when the token is the unit vector e_0.
    fn params_for_probs(probs: &[f64], k: usize) -> (MoeParams, Matrix) {
        let n = probs.len();
        let logits: Vec<f64> = probs.iter().map(|p| p.ln()).collect();
        let router = Matrix::from_vec(1, n, logits).unwrap();
        let experts = (0..n).map(|_| Matrix::filled(1, 1, 1.0).unwrap()).collect();
        (
            MoeParams::new(router, experts, k).unwrap(),
            Matrix::filled(1, 1, 1.0).unwrap(),
        )
    }

    #[test]
    fn renormalizes_top_two() {
        let (p, x) = params_for_probs(&[0.5, 0.3, 0.2], 2);
        let st = route(&p, &x).unwrap();
        assert_eq!(st.support.selected[0], vec![0, 1]);
        assert!((st.scores.get(0, 0) - 0.625).abs() < 1e-12);
        assert!((st.scores.get(0, 1) - 0.375).abs() < 1e-12);
        assert_eq!(st.scores.get(0, 2), 0.0);
    }

    #[test]
    fn tie_breaks_toward_lower_index() {
        let (p, x) = params_for_probs(&[0.4, 0.4, 0.2], 1);
        let st = route(&p, &x).unwrap();
        assert_eq!(st.support.selected[0], vec![0]);
        assert_eq!(top_k_indices(&[1.0, 3.0, 3.0, 3.0], 2), vec![1, 2]);
    }

    #[test]
    fn full_selection_keeps_probs() {
        let mut rng = Rng::new(5);
        let p = random_params(&mut rng, 4, 3, 5, 5);
        let x = gaussian_sample(&mut rng, 6, 4, 0.0, 1.0);
        let st = route(&p, &x).unwrap();
        for (a, b) in st.scores.as_array().iter().zip(st.probs.as_array().iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn route_errors() {
        let mut rng = Rng::new(1);
        let p = random_params(&mut rng, 4, 2, 3, 2);
        let bad_x = Matrix::zeros(2, 5);
        assert!(matches!(route(&p, &bad_x), Err(LabError::Shape(_))));
        let mut too_many = p.clone();
        too_many.k = 4;
        assert!(matches!(
            route(&too_many, &Matrix::zeros(2, 4)),
            Err(LabError::InvalidArgument(_))
        ));
    }

    #[test]
    fn single_expert_is_plain_linear_map() {
        let mut rng = Rng::new(2);
        let p = random_params(&mut rng, 3, 2, 1, 1);
        let x = gaussian_sample(&mut rng, 4, 3, 0.0, 1.0);
        let st = route(&p, &x).unwrap();
        let out = forward(&p, &x, &st, 0.0).unwrap();
        let direct = matmul(&x, &p.experts[0]).unwrap();
        for (a, b) in out.combined.as_array().iter().zip(direct.as_array().iter()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn two_scalar_experts_hand_value() {
        // equal logits give scores [0.5, 0.5]
        let router = Matrix::from_rows(&[&[0.0, 0.0]]).unwrap();
        let experts = vec![
            Matrix::filled(1, 1, 3.0).unwrap(),
            Matrix::filled(1, 1, 5.0).unwrap(),
        ];
        let p = MoeParams::new(router, experts, 2).unwrap();
        let x = Matrix::filled(1, 1, 2.0).unwrap();
        let st = route(&p, &x).unwrap();
        let out = forward(&p, &x, &st, 0.0).unwrap();
        assert_eq!(out.combined.get(0, 0), 8.0);
    }

    #[test]
    fn zero_token_gives_zero_output() {
        let mut rng = Rng::new(3);
        let p = random_params(&mut rng, 3, 2, 4, 2);
        let x = Matrix::zeros(1, 3);
        let st = route(&p, &x).unwrap();
        let out = forward(&p, &x, &st, 0.0).unwrap();
        assert!(out.combined.as_array().iter().all(|&v| v == 0.0));
        assert!(out.active[0]
            .iter()
            .all(|(_, v)| v.iter().all(|&e| e == 0.0)));
    }

    #[test]
    fn gate_threshold_skips_low_scores() {
        let (p, x) = params_for_probs(&[0.5, 0.3, 0.2], 2);
        let st = route(&p, &x).unwrap();
        let out = forward(&p, &x, &st, 0.5).unwrap();
        assert_eq!(out.active[0].len(), 1);
        assert_eq!(out.active[0][0].0, 0);
    }

    proptest! {
        #[test]
        fn routing_invariants(seed in any::<u64>(), n in 1usize..7, kk in 1usize..7, tokens in 1usize..20) {
            let k = kk.min(n);
            let mut rng = Rng::new(seed);
            let p = random_params(&mut rng, 3, 2, n, k);
            let x = gaussian_sample(&mut rng, tokens, 3, 0.0, 2.0);
            let st = route(&p, &x).unwrap();
            for i in 0..tokens {
                let prow: f64 = st.probs.row(i).sum();
                prop_assert!((prow - 1.0).abs() < 1e-12);
                let srow = st.scores.row(i);
                prop_assert!((srow.sum() - 1.0).abs() < 1e-12);
                prop_assert_eq!(srow.iter().filter(|&&v| v != 0.0).count(), k);
                for j in 0..n {
                    prop_assert_eq!(srow[j] != 0.0, st.support.contains(i, j));
                }
            }
            let fsum: f64 = st.loads_f.iter().sum();
            prop_assert!((fsum - k as f64).abs() < 1e-12);
            let psum: f64 = st.loads_p.iter().sum();
            prop_assert!((psum - tokens as f64).abs() < 1e-9);
            for (f, c) in st.loads_f.iter().zip(st.support.counts()) {
                prop_assert_eq!(f * tokens as f64, c as f64);
            }

            let out = forward(&p, &x, &st, 0.0).unwrap();
            for i in 0..tokens {
                let mut y = Array1::<f64>::zeros(2);
                for (j, v) in &out.active[i] {
                    y.scaled_add(st.scores.get(i, *j), v);
                }
                for (a, b) in y.iter().zip(out.combined.row(i).iter()) {
                    prop_assert!((a - b).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn permutation_equivariance(seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let p = random_params(&mut rng, 3, 2, 4, 2);
            let x = gaussian_sample(&mut rng, 6, 3, 0.0, 1.0);
            let perm = [3usize, 0, 5, 1, 4, 2];
            let xp = Matrix::from_array(x.as_array().select(ndarray::Axis(0), &perm)).unwrap();
            let a = route(&p, &x).unwrap();
            let b = route(&p, &xp).unwrap();
            let ya = forward(&p, &x, &a, 0.0).unwrap();
            let yb = forward(&p, &xp, &b, 0.0).unwrap();
            for (new, &old) in perm.iter().enumerate() {
                prop_assert_eq!(b.scores.row(new), a.scores.row(old));
                prop_assert_eq!(yb.combined.row(new), ya.combined.row(old));
            }
        }
    }
}
